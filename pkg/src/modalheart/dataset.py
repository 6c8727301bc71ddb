"""Training-database creation: ROI crops, modal data generation, cases, splits, augmentation."""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from . import linalg
from .hodmd import HodmdConfig, HodmdResult, SequenceTooShort, hodmd_iterative
from .modal_svd import DEFAULT_SVD_RANK, SvdStageOutput, complex_components, svd_of_modes, svd_stage
from .tensor import Roi, SequenceAnnotation, VideoSequence, read_tensor_file, write_tensor_file

log = logging.getLogger(__name__)


class EmptyRoi(ValueError):
    pass


class DataKind(str, enum.Enum):
    ORIGINAL = "original"
    SVD1_RECON = "svd1_recon"
    SVD1_MODE = "svd1_mode"
    HODMD_RECON = "hodmd_recon"
    HODMD_MODE = "hodmd_mode"
    SVD2_RECON = "svd2_recon"


class Component(str, enum.Enum):
    REAL = "real"
    IMAG = "imag"
    ABS = "abs"
    NOT_COMPLEX = "not_complex"


COMPLEX_KINDS = frozenset({DataKind.HODMD_MODE, DataKind.SVD2_RECON})
HODMD_KINDS = frozenset({DataKind.HODMD_RECON, DataKind.HODMD_MODE, DataKind.SVD2_RECON})

_O, _S1R, _S1M = DataKind.ORIGINAL, DataKind.SVD1_RECON, DataKind.SVD1_MODE
_HR, _HM, _S2R = DataKind.HODMD_RECON, DataKind.HODMD_MODE, DataKind.SVD2_RECON

TRAINING_CASES: dict[int, frozenset[DataKind]] = {
    1: frozenset({_O}),
    2: frozenset({_S1R}),
    3: frozenset({_O, _S1R, _S1M}),
    4: frozenset({_O, _S1R}),
    5: frozenset({_S1R, _S1M}),
    6: frozenset({_HR}),
    7: frozenset({_HR, _HM}),
    8: frozenset({_S1R, _HR}),
    9: frozenset({_O, _S1R, _HR}),
    10: frozenset({_HR, _HM, _S2R}),
    11: frozenset({_S1R, _S1M, _HR, _HM}),
    12: frozenset({_S1R, _S1M, _HR, _HM, _S2R}),
    13: frozenset({_O, _S1R, _S1M, _HR, _HM}),
    14: frozenset({_O, _S1R, _S1M, _HR, _HM, _S2R}),
}


@dataclass(frozen=True)
class TrainingCase:
    id: int
    kinds: frozenset

    @classmethod
    def get(cls, case_id: int) -> "TrainingCase":
        if case_id not in TRAINING_CASES:
            raise ValueError(f"training case must be 1..14, got {case_id}")
        return cls(case_id, TRAINING_CASES[case_id])


@dataclass
class SampleRecord:
    image: np.ndarray
    label_months: float
    kind: DataKind
    component: Component
    sequence_id: str
    heart_state: str
    flagged_constant: bool = False


# -- homogenization ---------------------------------------------------------

def detect_roi(frame: np.ndarray) -> Roi:
    """Bounding box of the largest bright connected region after Otsu thresholding."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise ValueError("empty frame")
    if not np.any(frame > 0):
        raise EmptyRoi("frame has no bright region")
    lo, hi = frame.min(), frame.max()
    if lo == hi:
        return Roi(0, 0, frame.shape[0], frame.shape[1])
    mask = frame > threshold_otsu(frame)
    labels, n = ndimage.label(mask)
    if n == 0:
        raise EmptyRoi("thresholding left no foreground")
    sizes = np.bincount(labels.ravel())[1:]
    biggest = int(np.argmax(sizes)) + 1
    sl = ndimage.find_objects(labels)[biggest - 1]
    return Roi(sl[0].start, sl[1].start, sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)


def crop(frame: np.ndarray, roi: Roi) -> np.ndarray:
    if not roi.fits(frame.shape[:2]):
        raise ValueError(f"roi {roi} outside frame of shape {frame.shape}")
    return np.array(frame[roi.x:roi.x + roi.width, roi.y:roi.y + roi.height], copy=True)


def homogenize(frame: np.ndarray, roi: Optional[Roi] = None) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise ValueError("empty frame")
    return crop(frame, roi if roi is not None else detect_roi(frame))


def homogenize_sequence(seq: VideoSequence) -> VideoSequence:
    """Crop every frame to one box: the annotated ROI or the one found on the max projection."""
    roi = seq.annotation.roi or detect_roi(seq.frames.max(axis=2))
    frames = seq.frames[roi.x:roi.x + roi.width, roi.y:roi.y + roi.height, :].copy()
    ann = SequenceAnnotation(seq.annotation.sequence_id, seq.annotation.heart_state,
                             seq.annotation.failure_age_months, None, seq.annotation.split_hint)
    return VideoSequence(frames, seq.dt_seconds, ann)


# -- image scaling ----------------------------------------------------------

def scale01(img: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]; a constant image maps to zeros and is flagged."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    if span <= 1e-12 * max(abs(hi), abs(lo), 1e-300) or span == 0:
        return np.zeros_like(img), True
    return np.clip((img - lo) / span, 0.0, 1.0), False


def expand_complex(mode: np.ndarray) -> list[tuple[Component, np.ndarray, bool]]:
    """abs, real and imag planes of a complex mode, each scaled to [0, 1]."""
    out = []
    for comp, plane in zip((Component.ABS, Component.REAL, Component.IMAG),
                           complex_components(mode)):
        scaled, flat = scale01(plane)
        out.append((comp, scaled, flat))
    return out


# -- generation config and per-sequence decomposition ----------------------

@dataclass(frozen=True)
class AugmentPolicy:
    size: Optional[tuple[int, int]] = (224, 224)
    p_flip: float = 0.5
    p_erase: float = 0.25
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)


@dataclass(frozen=True)
class GenerationConfig:
    case: int = 14
    svd_rank: int = DEFAULT_SVD_RANK
    eps_svd: float = 5e-4
    eps_dmd: float = 5e-4
    d_divisor: int = 5
    min_snapshots: int = 100
    dt_seconds: float = 0.004
    max_outer_iters: int = 10
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 42

    def hodmd_config(self) -> HodmdConfig:
        return HodmdConfig(d_divisor=self.d_divisor, eps_svd=self.eps_svd, eps_dmd=self.eps_dmd,
                           dt_seconds=self.dt_seconds, min_snapshots=self.min_snapshots,
                           max_outer_iters=self.max_outer_iters)

    @classmethod
    def from_dict(cls, raw: dict) -> "GenerationConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        if "augment" in raw:
            aug = dict(raw["augment"])
            for key in ("size", "erase_area", "erase_aspect"):
                if aug.get(key) is not None:
                    aug[key] = tuple(aug[key])
            raw["augment"] = AugmentPolicy(**aug)
        if "fractions" in raw:
            raw["fractions"] = tuple(raw["fractions"])
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "GenerationConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SequenceDecomposition:
    sequence: VideoSequence
    svd1: SvdStageOutput
    hodmd: Optional[HodmdResult] = None
    svd2: Optional[SvdStageOutput] = None
    skipped_reason: Optional[str] = None

    @property
    def hodmd_modes(self) -> list[np.ndarray]:
        return [] if self.hodmd is None else [m.u for m in self.hodmd.spectrum.modes]


def decompose_sequence(seq: VideoSequence, cfg: GenerationConfig,
                       kinds: Iterable[DataKind] = tuple(DataKind)) -> SequenceDecomposition:
    """SVD of the clip, HODMD of its SVD reconstruction, SVD of the HODMD modes.

    Work is limited to what ``kinds`` needs. Clips shorter than
    ``min_snapshots`` get no HODMD-derived data.
    """
    kinds = set(kinds)
    svd1 = svd_stage(seq, linalg.rank_rule(cfg.svd_rank))
    out = SequenceDecomposition(seq, svd1)
    if not kinds & HODMD_KINDS:
        return out
    try:
        out.hodmd = hodmd_iterative(VideoSequence(svd1.reconstructions, seq.dt_seconds, seq.annotation),
                                    cfg.hodmd_config())
    except SequenceTooShort as exc:
        log.warning("sequence %s too short for HODMD: %s", seq.sequence_id, exc)
        out.skipped_reason = str(exc)
        return out
    modes = out.hodmd_modes
    if DataKind.SVD2_RECON in kinds and len(modes) >= 1:
        out.svd2 = svd_of_modes(modes, linalg.rank_rule(cfg.svd_rank))
    return out


def _frames(stack: np.ndarray) -> list[np.ndarray]:
    return [stack[:, :, k] for k in range(stack.shape[2])]


def records_for_kind(dec: SequenceDecomposition, kind: DataKind,
                     component: Optional[Component] = None) -> list[SampleRecord]:
    """Scaled sample images of one kind for one decomposed clip.

    ``component`` restricts complex kinds to a single plane (used at test time).
    """
    ann = dec.sequence.annotation
    label, sid, state = float(ann.failure_age_months), ann.sequence_id, ann.heart_state

    def rec(img, comp=Component.NOT_COMPLEX, flat=None):
        if flat is None:
            img, flat = scale01(img)
        return SampleRecord(img, label, kind, comp, sid, state, flat)

    if kind is DataKind.ORIGINAL:
        return [rec(f) for f in _frames(dec.sequence.frames)]
    if kind is DataKind.SVD1_RECON:
        return [rec(f) for f in _frames(dec.svd1.reconstructions)]
    if kind is DataKind.SVD1_MODE:
        return [rec(m) for m in dec.svd1.modes]
    if dec.hodmd is None:
        return []
    if kind is DataKind.HODMD_RECON:
        return [rec(f) for f in _frames(dec.hodmd.reconstruction)]
    if kind is DataKind.HODMD_MODE:
        out = []
        for mode in dec.hodmd_modes:
            for comp, img, flat in expand_complex(mode):
                if component is None or comp is component:
                    out.append(rec(img, comp, flat))
        return out
    if kind is DataKind.SVD2_RECON:
        if dec.svd2 is None:
            return []
        comps = (Component.ABS, Component.REAL, Component.IMAG)
        out = []
        for j, img in enumerate(_frames(dec.svd2.reconstructions)):
            comp = comps[j % 3]
            if component is None or comp is component:
                out.append(rec(img, comp))
        return out
    raise ValueError(f"unknown kind {kind}")


def generate_case(sequences: Sequence[VideoSequence], case: TrainingCase | int,
                  cfg: GenerationConfig = GenerationConfig()) -> list[SampleRecord]:
    if isinstance(case, int):
        case = TrainingCase.get(case)
    records = []
    for seq in sequences:
        dec = decompose_sequence(seq, cfg, case.kinds)
        for kind in DataKind:
            if kind in case.kinds:
                records.extend(records_for_kind(dec, kind))
    return records


# -- counting ---------------------------------------------------------------

def kind_counts(n_snapshots: int, n_svd_modes: int, n_hodmd_modes: int,
                hodmd_snapshots: Optional[int] = None) -> dict[DataKind, int]:
    """Closed-form image counts per kind (totals over any group of clips)."""
    hs = n_snapshots if hodmd_snapshots is None else hodmd_snapshots
    return {
        DataKind.ORIGINAL: n_snapshots,
        DataKind.SVD1_RECON: n_snapshots,
        DataKind.SVD1_MODE: n_svd_modes,
        DataKind.HODMD_RECON: hs,
        DataKind.HODMD_MODE: 3 * n_hodmd_modes,
        DataKind.SVD2_RECON: 3 * n_hodmd_modes,
    }


def case_total(counts: dict[DataKind, int], case: TrainingCase | int) -> int:
    if isinstance(case, int):
        case = TrainingCase.get(case)
    return sum(counts[k] for k in case.kinds)


@dataclass(frozen=True)
class CorpusCounts:
    """One row of corpus bookkeeping: totals per (heart state, split)."""

    heart_state: str
    split: str
    sequences: int
    snapshots: int
    svd_modes: int
    hodmd_modes: int
    hodmd_snapshots: Optional[int] = None


def read_corpus_counts(path) -> list[CorpusCounts]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            hs = (row.get("hodmd_snapshots") or "").strip()
            rows.append(CorpusCounts(row["heart_state"], row["split"], int(row["sequences"]),
                                     int(row["snapshots"]), int(row["svd_modes"]),
                                     int(row["hodmd_modes"]), int(hs) if hs else None))
    return rows


def reference_corpus_counts() -> list[CorpusCounts]:
    """Bookkeeping of the 157-clip cardiac reference corpus shipped with the package."""
    with resources.as_file(resources.files("modalheart.data") / "reference_counts.csv") as p:
        return read_corpus_counts(p)


def dry_run_counts(rows: Sequence[CorpusCounts], case: TrainingCase | int,
                   split: str = "train") -> dict:
    """Count training images per kind for ``case`` from metadata alone."""
    if isinstance(case, int):
        case = TrainingCase.get(case)
    chosen = [r for r in rows if r.split.lower() == split]
    per_kind = {k: 0 for k in DataKind}
    for r in chosen:
        for k, n in kind_counts(r.snapshots, r.svd_modes, r.hodmd_modes, r.hodmd_snapshots).items():
            per_kind[k] += n
    selected = {k: (per_kind[k] if k in case.kinds else 0) for k in DataKind}
    return {"case": case.id, "per_kind": selected, "total": sum(selected.values())}


# -- splitting --------------------------------------------------------------

SPLITS = ("train", "val", "test")


def rng_for(seed: int, key: str = "", op: str = "") -> np.random.Generator:
    """Independent generator per (seed, key, op); stable across processes."""
    return np.random.default_rng([seed, zlib.crc32(key.encode()), zlib.crc32(op.encode())])


def _target_counts(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_sequences(annotations: Sequence[SequenceAnnotation],
                    fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 42) -> dict[str, str]:
    """Assign each sequence to train/val/test, stratified by heart state.

    Inside a state, clips are sorted by failure age (ties shuffled by the
    seed) and dealt out in quantile order so each split sees a similar age
    distribution. Annotated split hints are honored as-is.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    out: dict[str, str] = {}
    free: dict[str, list[SequenceAnnotation]] = {}
    for ann in annotations:
        if ann.split_hint is not None:
            out[ann.sequence_id] = {"Train": "train", "Val": "val", "Test": "test"}[ann.split_hint.value]
        else:
            free.setdefault(ann.heart_state, []).append(ann)
    for state in sorted(free):
        group = free[state]
        rng = rng_for(seed, state, "split")
        jitter = rng.permutation(len(group))
        group = [g for _, _, g in sorted(zip([a.failure_age_months for a in group], jitter, group),
                                         key=lambda z: (z[0], z[1]))]
        targets = _target_counts(len(group), fractions)
        assigned = [0, 0, 0]
        offset = rng.random()
        for i, ann in enumerate(group):
            # largest deficit against the ideal running share, capped by the targets
            best, best_gap = None, -math.inf
            for s in range(3):
                if assigned[s] >= targets[s]:
                    continue
                gap = (i + offset) * targets[s] / len(group) - assigned[s]
                if gap > best_gap + 1e-12:
                    best, best_gap = s, gap
            assigned[best] += 1
            out[ann.sequence_id] = SPLITS[best]
    return out


@dataclass
class DatasetSplit:
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]
    assignment: dict[str, str]
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)


def split_dataset(records: Sequence[SampleRecord], fractions=(0.6, 0.2, 0.2), seed: int = 42,
                  labels: Optional[dict[str, SequenceAnnotation]] = None) -> DatasetSplit:
    """Partition records by sequence; see :func:`split_sequences`."""
    if labels is None:
        labels = {}
        for r in records:
            labels.setdefault(r.sequence_id, SequenceAnnotation(r.sequence_id, r.heart_state, r.label_months))
    assignment = split_sequences(list(labels.values()), fractions, seed)
    parts = {s: [] for s in SPLITS}
    for r in records:
        parts[assignment[r.sequence_id]].append(r)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], assignment, tuple(fractions))


# -- augmentation -----------------------------------------------------------

def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    th, tw = size
    if (h, w) == (th, tw):
        return img.copy()
    ys = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    coords = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def hflip(img: np.ndarray) -> np.ndarray:
    return np.array(img[:, ::-1], copy=True)


def erase(img: np.ndarray, rect: tuple[int, int, int, int], value: float = 0.0) -> np.ndarray:
    r, c, h, w = rect
    out = np.array(img, copy=True)
    out[r:r + h, c:c + w] = value
    return out


def random_erase_rect(shape: tuple[int, int], rng: np.random.Generator,
                      policy: AugmentPolicy) -> tuple[int, int, int, int]:
    h, w = shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(*policy.erase_area) * area
        aspect = math.exp(rng.uniform(math.log(policy.erase_aspect[0]), math.log(policy.erase_aspect[1])))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 1 <= eh <= h and 1 <= ew <= w:
            return int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)), eh, ew
    side = max(1, int(round(math.sqrt(policy.erase_area[0] * area))))
    side = min(side, h, w)
    return int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)), side, side


def augment(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy(),
            force_flip: Optional[bool] = None,
            force_erase: Optional[tuple[int, int, int, int]] = None) -> np.ndarray:
    """Resize, then random horizontal flip, then random erasing (fill 0)."""
    out = np.asarray(img, dtype=np.float64)
    if policy.size is not None:
        out = resize_bilinear(out, policy.size)
    flip = rng.random() < policy.p_flip if force_flip is None else force_flip
    if flip:
        out = hflip(out)
    if force_erase is not None:
        out = erase(out, force_erase)
    elif rng.random() < policy.p_erase:
        out = erase(out, random_erase_rect(out.shape, rng, policy))
    return out


# -- archive ----------------------------------------------------------------

INDEX_COLUMNS = ["sample_id", "path", "kind", "component", "sequence_id", "heart_state",
                 "label_months", "split"]


def write_archive(out_dir, records: Sequence[SampleRecord], assignment: dict[str, str]) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    index = out_dir / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for i, r in enumerate(records):
            sample_id = f"s{i:07d}"
            rel = f"images/{sample_id}.mdt"
            write_tensor_file(out_dir / rel, r.image)
            w.writerow([sample_id, rel, r.kind.value, r.component.value, r.sequence_id,
                        r.heart_state, repr(float(r.label_months)), assignment[r.sequence_id]])
    return index


def read_archive(index_path, split: Optional[str] = None) -> list[SampleRecord]:
    index_path = Path(index_path)
    out = []
    with open(index_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            img = read_tensor_file(index_path.parent / row["path"])
            out.append(SampleRecord(img, float(row["label_months"]), DataKind(row["kind"]),
                                    Component(row["component"]), row["sequence_id"], row["heart_state"]))
    return out
