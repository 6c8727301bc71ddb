"""Per-sequence inference, fusion by averaging, error-margin metrics and timing."""
from __future__ import annotations

import csv
import enum
import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .dataset import (Component, DataKind, GenerationConfig, decompose_sequence,
                      records_for_kind)
from .hodmd import SequenceTooShort, _spatial_basis, dmd_d
from .modal_svd import hosvd, svd_stage
from .model import ModelParams, predict_months
from .tensor import VideoSequence
from .training import prepare_image


class TestKind(str, enum.Enum):
    __test__ = False

    ORIGINAL = "original"
    SVD1_RECON = "svd1_recon"
    SVD1_MODES = "svd1_modes"
    HODMD_RECON = "hodmd_recon"
    HODMD_MODES_ABS = "hodmd_modes_abs"
    HODMD_MODES_REAL = "hodmd_modes_real"
    HODMD_MODES_IMAG = "hodmd_modes_imag"

    @classmethod
    def parse(cls, text: str) -> "TestKind":
        return cls(text.strip().lower().replace("-", "_"))

    @property
    def source(self) -> tuple[DataKind, Optional[Component]]:
        return _SOURCES[self]


_SOURCES = {
    TestKind.ORIGINAL: (DataKind.ORIGINAL, None),
    TestKind.SVD1_RECON: (DataKind.SVD1_RECON, None),
    TestKind.SVD1_MODES: (DataKind.SVD1_MODE, None),
    TestKind.HODMD_RECON: (DataKind.HODMD_RECON, None),
    TestKind.HODMD_MODES_ABS: (DataKind.HODMD_MODE, Component.ABS),
    TestKind.HODMD_MODES_REAL: (DataKind.HODMD_MODE, Component.REAL),
    TestKind.HODMD_MODES_IMAG: (DataKind.HODMD_MODE, Component.IMAG),
}

DEFAULT_TEST_KINDS = (TestKind.ORIGINAL, TestKind.SVD1_RECON, TestKind.SVD1_MODES,
                      TestKind.HODMD_RECON, TestKind.HODMD_MODES_ABS)


@dataclass
class SequencePrediction:
    sequence_id: str
    heart_state: str
    per_image: list[float]
    fused: float
    truth: float
    test_kind: str

    @property
    def error(self) -> float:
        return self.fused - self.truth


def fuse(per_image: Sequence[float]) -> float:
    if len(per_image) == 0:
        raise ValueError("no per-image predictions to fuse")
    return float(np.mean(np.asarray(per_image, dtype=np.float64)))


def transform_images(seq: VideoSequence, kind: TestKind, cfg: GenerationConfig = GenerationConfig(),
                dec=None) -> list[np.ndarray]:
    """Images a test clip contributes under one transform (scaled to [0, 1])."""
    data_kind, comp = kind.source
    if dec is None:
        dec = decompose_sequence(seq, cfg, {data_kind})
    if data_kind in (DataKind.HODMD_RECON, DataKind.HODMD_MODE) and dec.hodmd is None:
        raise SequenceTooShort(dec.skipped_reason or f"{seq.sequence_id}: no HODMD data")
    return [r.image for r in records_for_kind(dec, data_kind, comp)]


def predict_sequence(params: ModelParams, seq: VideoSequence, kind: TestKind | str,
                     cfg: GenerationConfig = GenerationConfig(), dec=None) -> SequencePrediction:
    kind = TestKind.parse(kind) if isinstance(kind, str) else kind
    imgs = [prepare_image(im, params.config.img_size) for im in transform_images(seq, kind, cfg, dec)]
    preds = predict_months(params, np.stack(imgs))
    ann = seq.annotation
    return SequencePrediction(ann.sequence_id, ann.heart_state, [float(p) for p in preds],
                              fuse(preds), float(ann.failure_age_months), kind.value)


# -- metrics ----------------------------------------------------------------

@dataclass
class GroupMetrics:
    mu: float
    sigma: float
    rmse: float
    max_error: float
    min_error: float
    min_abs_error: float
    max_abs_error: float
    mean_error: float
    n_sequences: int
    n_images: int


@dataclass
class MetricsReport:
    per_state: dict[str, GroupMetrics]
    total: GroupMetrics
    test_kind: str = ""
    timing: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {"test_kind": self.test_kind,
               "per_state": {k: asdict(v) for k, v in sorted(self.per_state.items())},
               "total": asdict(self.total)}
        if self.timing is not None:
            out["timing"] = self.timing
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def group_metrics(preds: Sequence[SequencePrediction]) -> GroupMetrics:
    p = np.array([x.fused for x in preds], dtype=np.float64)
    t = np.array([x.truth for x in preds], dtype=np.float64)
    e = p - t
    mu = float(p.mean())
    return GroupMetrics(
        mu=mu, sigma=float(np.sqrt(np.mean((p - mu) ** 2))),
        rmse=float(np.sqrt(np.mean(e ** 2))),
        max_error=float(e.max()), min_error=float(e.min()),
        min_abs_error=float(np.abs(e).min()), max_abs_error=float(np.abs(e).max()),
        mean_error=float(e.mean()),
        n_sequences=len(preds), n_images=int(sum(len(x.per_image) for x in preds)))


def evaluate(preds: Sequence[SequencePrediction]) -> MetricsReport:
    """Per-heart-state and overall statistics of fused per-sequence predictions."""
    if not preds:
        raise ValueError("no predictions to evaluate")
    preds = sorted(preds, key=lambda x: x.sequence_id)
    by_state: dict[str, list[SequencePrediction]] = {}
    for x in preds:
        by_state.setdefault(x.heart_state, []).append(x)
    kinds = sorted({x.test_kind for x in preds})
    return MetricsReport({s: group_metrics(v) for s, v in by_state.items()}, group_metrics(preds),
                         ",".join(kinds))


def format_table(report: MetricsReport) -> str:
    """Aligned text table: mu +- sigma, error margin, max/min errors."""
    head = ["State", "Seqs", "Images", "Predicted (mu +- sigma)", "Error margin",
            "Max error (w/)", "Min error (w/)", "Min error (w/o)"]
    rows = []
    for name, g in list(sorted(report.per_state.items())) + [("Total", report.total)]:
        rows.append([name, str(g.n_sequences), str(g.n_images), f"{g.mu:.2f} +- {g.sigma:.2f}",
                     f"{g.rmse:.2f}", f"{g.max_error:+.2f}", f"{g.min_error:+.2f}",
                     f"{g.min_abs_error:.2f}"])
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in [head, ["-" * w for w in widths]] + rows]
    return "\n".join(lines) + "\n"


PREDICTION_COLUMNS = ["sequence_id", "heart_state", "test_kind", "n_images", "predicted_months",
                      "true_months", "error_months"]


def write_predictions(path, preds: Sequence[SequencePrediction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for x in preds:
            w.writerow([x.sequence_id, x.heart_state, x.test_kind, len(x.per_image),
                        repr(x.fused), repr(x.truth), repr(x.error)])


def read_predictions(path) -> list[SequencePrediction]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"sequence_id", "heart_state", "predicted_months", "true_months"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            n = int(row.get("n_images") or 1)
            fused = float(row["predicted_months"])
            out.append(SequencePrediction(row["sequence_id"], row["heart_state"], [fused] * n, fused,
                                          float(row["true_months"]), row.get("test_kind", "")))
    return out


# -- timing -----------------------------------------------------------------

class CorpusTooSmall(ValueError):
    pass


def bench(sequences: Sequence[VideoSequence], params: ModelParams,
          cfg: GenerationConfig = GenerationConfig(), warmup_images: int = 10,
          min_images: int = 100) -> dict:
    """Per-image wall-clock costs (ms) of SVD, HOSVD, DMD-d and the regressor.

    The first ``warmup_images`` frames go through every stage untimed. Timed
    averages cover at least ``min_images`` frames, cycling the corpus when
    it is shorter. File I/O is outside the timed region.
    """
    total = sum(s.n_snapshots for s in sequences)
    if total < warmup_images:
        raise CorpusTooSmall(f"corpus has {total} images, need at least {warmup_images}")
    hcfg = cfg.hodmd_config()
    size = params.config.img_size

    def run(seq, clock):
        t0 = clock()
        svd = svd_stage(seq, linalg.rank_rule(cfg.svd_rank))
        t1 = clock()
        f = hosvd(svd.reconstructions, hcfg.eps_svd)
        _, coeffs = _spatial_basis(f)
        t2 = clock()
        try:
            dmd_d(coeffs, hcfg)
        except SequenceTooShort:
            pass
        t3 = clock()
        imgs = np.stack([prepare_image(seq.frames[:, :, k], size) for k in range(seq.n_snapshots)])
        t4 = clock()
        predict_months(params, imgs)
        t5 = clock()
        return t1 - t0, t2 - t1, t3 - t2, t5 - t4

    warm = 0
    for seq in sequences:
        if warm >= warmup_images:
            break
        run(seq, time.perf_counter)
        warm += seq.n_snapshots

    sums = np.zeros(4)
    counted = 0
    i = 0
    while counted < min_images:
        seq = sequences[i % len(sequences)]
        sums += run(seq, time.perf_counter)
        counted += seq.n_snapshots
        i += 1
    ms = sums * 1000.0 / counted
    t_pred = float(ms[3])
    return {"t_svd_ms": float(ms[0]), "t_hosvd_ms": float(ms[1]), "t_hodmd_ms": float(ms[2]),
            "t_pred_ms": t_pred, "throughput_fps": throughput(t_pred), "images": counted}


def throughput(t_pred_ms: float) -> float:
    return 1000.0 / t_pred_ms if t_pred_ms > 0 else math.inf
