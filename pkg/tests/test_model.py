import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from modalheart.model import (CheckpointError, ModelConfig, Mode, NonFiniteError,
                              batch_masks, forward, gradients, init_params, is_decoder_param,
                              load_checkpoint, param_layout, patchify, predict_months, random_mask,
                              save_checkpoint, sincos_table, unpatchify)
from modalheart.training import OptimState


def test_layout_matches_init(tiny_config):
    p = init_params(tiny_config)
    p.validate()
    assert p.count() == 1641
    assert [n for n, _ in param_layout(tiny_config)] == list(p.tensors)


def test_validate_rejects_bad_maps(tiny_config):
    p = init_params(tiny_config)
    p.tensors.pop("reg_token")
    with pytest.raises(ValueError, match="missing"):
        p.validate()
    q = init_params(tiny_config)
    q.tensors["reg_head.bias"] = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(ValueError, match="shape"):
        q.validate()


def test_init_is_seeded(tiny_config):
    a, b, c = init_params(tiny_config, 1), init_params(tiny_config, 1), init_params(tiny_config, 2)
    assert all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert not torch.equal(a.tensors["enc.0.attn.qkv.weight"], c.tensors["enc.0.attn.qkv.weight"])


def test_vit_tiny_dimensions():
    cfg = ModelConfig.vit_tiny()
    assert cfg.n_tokens == 196 and cfg.n_masked == 147
    assert (cfg.enc_dim, cfg.enc_blocks, cfg.enc_heads) == (192, 12, 3)
    assert (cfg.dec_dim, cfg.dec_blocks, cfg.dec_heads) == (128, 2, 16)
    shapes = dict(param_layout(cfg))
    assert shapes["patch_embed.weight"] == (256, 192) and shapes["dec_head.weight"] == (128, 256)


@pytest.mark.parametrize("kw", [dict(patch=5), dict(mask_ratio=1.0), dict(alpha=1.5), dict(enc_heads=3),
                                dict(enc_dim=6, enc_heads=2)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    for cfg in (ModelConfig(), ModelConfig.vit_tiny(mask_ratio=0.5)):
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_patchify_round_trip(gh, gw, b):
    p = 3
    x = np.random.default_rng(gh * 10 + gw).standard_normal((b, gh * p, gw * p))
    tok = patchify(x, p)
    assert tok.shape == (b, gh * gw, p * p)
    assert np.array_equal(unpatchify(tok, p, x.shape[1:]), x)
    assert np.array_equal(tok[0, 0], x[0, :p, :p].reshape(-1))
    if gw > 1:
        assert np.array_equal(tok[0, 1], x[0, :p, p:2 * p].reshape(-1))


def test_patchify_torch_matches_numpy():
    x = np.arange(64.0).reshape(8, 8)
    assert np.array_equal(patchify(torch.from_numpy(x), 4).numpy(), patchify(x, 4))
    with pytest.raises(ValueError):
        patchify(np.ones((7, 8)), 4)


def test_random_mask_partition():
    rng = np.random.default_rng(0)
    keep, masked = random_mask(196, 0.75, rng)
    assert len(masked) == 147 and len(keep) == 49
    assert sorted(np.concatenate([keep, masked]).tolist()) == list(range(196))
    with pytest.raises(ValueError):
        random_mask(10, 0.0, rng)


def test_batch_masks_differ_per_image(tiny_config):
    m = batch_masks(16, ModelConfig.vit_tiny(), np.random.default_rng(1))
    assert m.shape == (16, 147)
    assert len({tuple(r) for r in m}) > 1


def test_sincos_table():
    t = sincos_table(8, (2, 3))
    assert t.shape == (7, 8)
    assert not torch.any(t[0])
    assert torch.all(t.abs() <= 1)
    # row for patch (0, 0): sin parts zero, cos parts one
    assert torch.allclose(t[1], torch.tensor([0, 0, 1, 1, 0, 0, 1, 1], dtype=torch.float64))


def test_forward_shapes_and_loss(tiny_config):
    p = init_params(tiny_config)
    imgs = np.random.default_rng(2).uniform(size=(3, 8, 8))
    masks = batch_masks(3, tiny_config, np.random.default_rng(3))
    res = forward(p, imgs, masks, labels=[0.1, -0.2, 0.3])
    assert res.prediction.shape == (3,)
    assert res.reconstruction.shape == (3, 4, 16)
    assert res.masked_patch_count == 2
    a = tiny_config.alpha
    assert res.loss.item() == a * res.l_reg.item() + (1 - a) * res.l_ssat.item()
    b = res.breakdown()
    assert b.total == res.loss.item() and b.masked_patch_count == 2


def test_regression_only_ignores_decoder(tiny_config):
    p = init_params(tiny_config)
    imgs = np.random.default_rng(4).uniform(size=(2, 8, 8))
    before = forward(p, imgs, mode=Mode.REGRESSION_ONLY, labels=[0.0, 1.0])
    q = p.clone()
    for k in q.tensors:
        if is_decoder_param(k):
            q.tensors[k] = q.tensors[k] + 3.0
    after = forward(q, imgs, mode=Mode.REGRESSION_ONLY, labels=[0.0, 1.0])
    assert torch.equal(before.prediction, after.prediction)
    assert before.reconstruction is None and before.loss.item() == before.l_reg.item()
    grads, _ = gradients(p, imgs, [0.0, 1.0], mode=Mode.REGRESSION_ONLY)
    assert all(not torch.any(grads[k]) for k in grads if is_decoder_param(k))


def test_regression_prediction_independent_of_mask(tiny_config):
    p = init_params(tiny_config)
    imgs = np.random.default_rng(5).uniform(size=(2, 8, 8))
    r1 = forward(p, imgs, batch_masks(2, tiny_config, np.random.default_rng(1)))
    r2 = forward(p, imgs, batch_masks(2, tiny_config, np.random.default_rng(2)))
    assert torch.equal(r1.prediction, r2.prediction)


def test_alpha_extremes(tiny_config):
    p = init_params(tiny_config)
    imgs = np.random.default_rng(6).uniform(size=(2, 8, 8))
    masks = batch_masks(2, tiny_config, np.random.default_rng(0))
    g0, r0 = gradients(p, imgs, [0.5, -0.5], masks, alpha=0.0)
    assert r0.loss.item() == r0.l_ssat.item()
    assert not torch.any(g0["reg_head.weight"])
    g1, r1 = gradients(p, imgs, [0.5, -0.5], masks, alpha=1.0)
    assert r1.loss.item() == r1.l_reg.item()
    assert not torch.any(g1["dec_head.weight"])


def test_joint_mode_needs_masks_and_size(tiny_config):
    p = init_params(tiny_config)
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, 12, 12)), mode=Mode.REGRESSION_ONLY)


def test_nonfinite_parameter_named(tiny_config):
    p = init_params(tiny_config)
    p.tensors["enc.0.mlp.fc1.weight"][0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="enc.0.mlp.fc1.weight"):
        forward(p, np.zeros((1, 8, 8)), mode=Mode.REGRESSION_ONLY)


def test_predict_months_destandardizes(tiny_config):
    p = init_params(tiny_config)
    imgs = np.random.default_rng(7).uniform(size=(5, 8, 8))
    raw = forward(p, imgs, mode=Mode.REGRESSION_ONLY).prediction.detach().numpy()
    p.label_mean, p.label_std = 20.0, 4.0
    assert np.allclose(predict_months(p, imgs, batch_size=2), raw * 4 + 20, atol=1e-12)
    assert predict_months(p, np.zeros((0, 8, 8))).shape == (0,)


def test_checkpoint_round_trip(tmp_path, tiny_config):
    p = init_params(tiny_config, 3)
    p.label_mean, p.label_std = 21.5, 3.25
    path = tmp_path / "m.mdck"
    save_checkpoint(path, p)
    back, step, moments = load_checkpoint(path, tiny_config)
    assert step == 0 and moments is None
    assert (back.label_mean, back.label_std) == (21.5, 3.25)
    assert all(torch.equal(p.tensors[k], back.tensors[k]) for k in p.tensors)


def test_checkpoint_with_optimizer_state(tmp_path, tiny_config):
    p = init_params(tiny_config)
    st_ = OptimState.zeros_like(p.tensors)
    st_.step = 7
    st_.m["reg_token"] += 1.0
    path = tmp_path / "m.mdck"
    save_checkpoint(path, p, st_)
    _, step, moments = load_checkpoint(path)
    assert step == 7 and torch.all(moments["m/reg_token"] == 1.0)


def test_checkpoint_errors(tmp_path, tiny_config):
    path = tmp_path / "m.mdck"
    save_checkpoint(path, init_params(tiny_config))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, ModelConfig())
    bad = tmp_path / "bad.mdck"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    cut = tmp_path / "cut.mdck"
    cut.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(cut)
