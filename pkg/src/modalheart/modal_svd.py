"""Sequence-level SVD (mode images, filtered reconstructions) and HOSVD."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .linalg import TruncationRule
from .tensor import VideoSequence, reshape_to_snapshot_matrix

DEFAULT_SVD_RANK = 5


class SequenceTooShortForSvd(ValueError):
    pass


@dataclass
class SvdStageOutput:
    modes: list[np.ndarray]
    reconstructions: np.ndarray
    sigma_retained: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.modes)


def _svd_of_stack(frames: np.ndarray, rule: TruncationRule) -> SvdStageOutput:
    nx, ny, k = frames.shape
    factors = linalg.svd(reshape_to_snapshot_matrix(frames))
    kept = linalg.truncate(factors, rule)
    recon = (kept.U * kept.sigma) @ kept.V.T
    modes = [kept.U[:, j].reshape(nx, ny).copy() for j in range(kept.rank)]
    return SvdStageOutput(modes, recon.reshape(nx, ny, k), kept.sigma.copy())


def svd_stage(seq: VideoSequence | np.ndarray,
              rule: TruncationRule = linalg.rank_rule(DEFAULT_SVD_RANK)) -> SvdStageOutput:
    """Truncated SVD of a clip: unit-norm mode images plus the rank-r video."""
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq, dtype=np.float64)
    if frames.shape[2] < 2:
        raise SequenceTooShortForSvd(f"need at least 2 snapshots, got {frames.shape[2]}")
    return _svd_of_stack(frames, rule)


def svd_of_images(images: Sequence[np.ndarray],
                  rule: TruncationRule = linalg.rank_rule(DEFAULT_SVD_RANK)) -> SvdStageOutput:
    if len(images) < 2:
        raise SequenceTooShortForSvd(f"need at least 2 images, got {len(images)}")
    return _svd_of_stack(np.stack([np.asarray(im, dtype=np.float64) for im in images], axis=2), rule)


def complex_components(mode: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(abs, real, imag) planes of a complex mode image, unscaled."""
    mode = np.asarray(mode)
    return np.abs(mode), mode.real.copy(), np.imag(mode).copy()


def svd_of_modes(modes: Sequence[np.ndarray],
                 rule: TruncationRule = linalg.rank_rule(DEFAULT_SVD_RANK)) -> SvdStageOutput:
    """Second SVD pass over HODMD modes.

    Each complex mode contributes its abs, real and imag planes to a
    pseudo-sequence of 3M images. Only the reconstructions are meaningful
    downstream; ``modes`` of the result is left empty on purpose.
    """
    stack = []
    for m in modes:
        stack.extend(complex_components(m))
    out = svd_of_images(stack, rule)
    return SvdStageOutput([], out.reconstructions, out.sigma_retained)


# -- HOSVD ------------------------------------------------------------------

@dataclass
class HosvdFactors:
    core: np.ndarray
    factors: list[np.ndarray]
    singular_values: list[np.ndarray]

    @property
    def retained_ranks(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def mode_product(t: np.ndarray, mat: np.ndarray, mode: int) -> np.ndarray:
    """Contract axis ``mode`` of ``t`` with the columns of ``mat`` (t x_mode mat)."""
    out = np.tensordot(mat, t, axes=([1], [mode]))
    return np.moveaxis(out, 0, mode)


def hosvd(t: np.ndarray, eps: float) -> HosvdFactors:
    """Truncated HOSVD keeping, per direction, sigma_k/sigma_0 > eps."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0 or min(t.shape) < 1:
        raise ValueError(f"degenerate tensor shape {t.shape}")
    if not eps > 0:
        raise ValueError("tolerance must be positive")
    factors, sigmas = [], []
    for n in range(t.ndim):
        f = linalg.svd(unfold(t, n))
        r = linalg.retained_by_tolerance(f.sigma, eps)
        factors.append(f.U[:, :r].copy())
        sigmas.append(f.sigma.copy())
    core = t
    for n, u in enumerate(factors):
        core = mode_product(core, u.T, n)
    return HosvdFactors(core, factors, sigmas)


def hosvd_reconstruct(f: HosvdFactors) -> np.ndarray:
    out = f.core
    for n, u in enumerate(f.factors):
        out = mode_product(out, u, n)
    return out
