import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from modalheart.dataset import AugmentPolicy, Component, DataKind, SampleRecord
from modalheart.training import (OptimState, ScheduleConfig, TrainConfig, adamw_step, lr_at,
                                 prepare_image, train)

S = ScheduleConfig(lambda_t=2.5e-4, n_warmup=5, n_iter=1005)


def test_lr_pins():
    assert lr_at(0, S) == 0
    assert lr_at(5, S) == pytest.approx(2.5e-4, rel=1e-12)
    assert lr_at(505, S) == pytest.approx(1.25e-4, rel=1e-12)
    assert lr_at(1005, S) == pytest.approx(0, abs=1e-18)


def test_lr_out_of_range():
    for i in (-1, 1006):
        with pytest.raises(ValueError):
            lr_at(i, S)
    with pytest.raises(ValueError):
        ScheduleConfig(n_warmup=10, n_iter=10)


@given(st.integers(0, 1004))
def test_lr_monotone_pieces(i):
    a, b = lr_at(i, S), lr_at(i + 1, S)
    assert 0 <= a <= S.lambda_t
    if i + 1 <= S.n_warmup:
        assert b >= a
    elif i >= S.n_warmup:
        assert b <= a


def test_adamw_first_step_hand_formula():
    w = {"x": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    g = {"x": torch.tensor([0.5, 0.1], dtype=torch.float64)}
    st_ = OptimState.zeros_like(w, weight_decay=0.05)
    out = adamw_step(w, g, st_, 0.01)
    # bias-corrected moments equal g and g^2 after one step
    ref = w["x"] - 0.01 * 0.05 * w["x"] - 0.01 * g["x"] / (g["x"].abs() + 1e-8)
    assert torch.allclose(out["x"], ref, atol=1e-15)
    assert st_.step == 1


def test_adamw_zero_grad_only_decays():
    w = {"x": torch.ones(3, dtype=torch.float64)}
    out = adamw_step(w, {"x": torch.zeros(3, dtype=torch.float64)}, OptimState.zeros_like(w), 0.1)
    assert torch.allclose(out["x"], torch.full((3,), 1 - 0.1 * 0.05, dtype=torch.float64))


def test_adamw_shape_mismatch():
    w = {"x": torch.ones(3, dtype=torch.float64)}
    with pytest.raises(ValueError):
        adamw_step(w, {"x": torch.ones(2, dtype=torch.float64)}, OptimState.zeros_like(w), 0.1)


def _records(n=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = 10.0 + 2 * i
        img = np.clip(rng.uniform(size=(12, 12)) * 0.2 + label / 40, 0, 1)
        out.append(SampleRecord(img, label, DataKind.ORIGINAL, Component.NOT_COMPLEX, f"s{i % 4}", "CTL"))
    return out


def _cfg(tiny, **kw):
    base = dict(model=tiny, schedule=ScheduleConfig(1e-3, 2, 20), batch_size=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_is_deterministic(tiny_config):
    a = train(_records(), _cfg(tiny_config))
    b = train(_records(), _cfg(tiny_config))
    assert [h.total for h in a.history] == [h.total for h in b.history]
    assert all(torch.equal(a.params.tensors[k], b.params.tensors[k]) for k in a.params.tensors)
    c = train(_records(), _cfg(tiny_config, seed=4))
    assert [h.total for h in c.history] != [h.total for h in a.history]


def test_train_history_and_labels(tiny_config, tmp_path):
    recs = _records()
    res = train(recs, _cfg(tiny_config), checkpoint_path=tmp_path / "c.mdck")
    assert len(res.history) == 20 and res.optim.step == 20
    labels = np.array([r.label_months for r in recs])
    assert res.params.label_mean == pytest.approx(labels.mean())
    assert res.params.label_std == pytest.approx(labels.std())
    assert all(math.isfinite(h.total) and h.masked_patch_count == 2 for h in res.history)
    assert (tmp_path / "c.mdck").exists()


def test_train_empty_raises(tiny_config):
    with pytest.raises(ValueError):
        train([], _cfg(tiny_config))


def test_prepare_image_resizes():
    assert prepare_image(np.ones((12, 12)), (8, 8)).shape == (8, 8)
    x = np.ones((8, 8), dtype=np.float32)
    assert prepare_image(x, (8, 8)).dtype == np.float64


def test_train_config_from_dict(tiny_config):
    cfg = _cfg(tiny_config, augment=AugmentPolicy(size=None, p_erase=0.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig(steps=7).n_steps == 7 and TrainConfig().n_steps == 1000


def test_training_reduces_loss(tiny_config):
    res = train(_records(16), _cfg(tiny_config, schedule=ScheduleConfig(3e-3, 5, 150), batch_size=8))
    first = np.mean([h.total for h in res.history[:10]])
    last = np.mean([h.total for h in res.history[-10:]])
    assert last < first
