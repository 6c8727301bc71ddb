"""Synthetic clips and corpora with known generators."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Roi, SequenceAnnotation, VideoSequence, write_manifest, write_tensor_file

DT = 0.004


@dataclass(frozen=True)
class Tone:
    freq_hz: float
    growth: float


TWO_TONES = (Tone(5.0, -0.3), Tone(8.0, 0.2))


def two_tone_video(nx: int = 16, ny: int = 16, k: int = 250, dt: float = DT,
                   tones: tuple[Tone, Tone] = TWO_TONES, noise: float = 0.0,
                   seed: int = 0) -> np.ndarray:
    """Two separable spatial patterns, each driven by one damped/growing tone."""
    t = np.arange(k) * dt
    xs = np.linspace(-1, 1, nx)
    ys = np.linspace(-1, 1, ny)
    p1 = np.outer(np.exp(-xs ** 2), np.cos(np.pi * ys))
    p2 = np.outer(np.sin(np.pi * xs), np.exp(-2 * ys ** 2))
    s1 = np.exp(tones[0].growth * t) * np.cos(2 * np.pi * tones[0].freq_hz * t)
    s2 = np.exp(tones[1].growth * t) * np.sin(2 * np.pi * tones[1].freq_hz * t)
    v = p1[:, :, None] * s1 + p2[:, :, None] * s2
    if noise:
        v = v + noise * np.random.default_rng(seed).standard_normal(v.shape)
    return v


def damped_oscillator(k: int = 250, dt: float = DT, freq_hz: float = 5.0,
                      growth: float = -0.5) -> np.ndarray:
    t = np.arange(k) * dt
    return np.exp(growth * t) * np.cos(2 * np.pi * freq_hz * t)


def planted_linear_system(n: int = 6, k: int = 60, seed: int = 0):
    """Snapshots of x_{k+1} = A x_k with a known diagonalizable A.

    Returns (snapshots (n, k), eigenvalues of A). Every eigendirection is
    excited with comparable weight.
    """
    rng = np.random.default_rng(seed)
    half = n // 2
    mags = rng.uniform(0.97, 1.0, size=half)
    angles = rng.uniform(0.1, 1.2, size=half)
    mus = mags * np.exp(1j * angles)
    eigs = np.concatenate([mus, mus.conj()])
    if n % 2:
        eigs = np.concatenate([eigs, [rng.uniform(0.95, 1.0)]])
    # real block-diagonal form, then a random similarity transform
    blocks = np.zeros((n, n))
    for j, mu in enumerate(mus):
        a, b = mu.real, mu.imag
        blocks[2 * j:2 * j + 2, 2 * j:2 * j + 2] = [[a, -b], [b, a]]
    if n % 2:
        blocks[-1, -1] = eigs[-1].real
    basis = rng.standard_normal((n, n))
    A = basis @ blocks @ np.linalg.inv(basis)
    x = np.empty((n, k))
    x[:, 0] = basis @ np.ones(n)
    for j in range(1, k):
        x[:, j] = A @ x[:, j - 1]
    return x, eigs, A


# -- toy cardiac corpus -----------------------------------------------------

STATE_BANDS = (("CTL", 5.0, 7.5), ("OB", 7.5, 10.0), ("SH", 10.0, 12.5))


def age_from_frequency(freq_hz: float) -> float:
    """Failure age (months) as a fixed decreasing function of the dominant frequency."""
    return 40.0 - 2.0 * freq_hz


def ring_pattern(n: int, freq_hz: float) -> np.ndarray:
    xs = np.linspace(-1, 1, n)
    rho = np.hypot(*np.meshgrid(xs, xs, indexing="ij"))
    r0 = 0.15 + 0.065 * (freq_hz - 5.0)
    return np.exp(-((rho - r0) ** 2) / (2 * 0.09 ** 2))


@dataclass(frozen=True)
class CorpusSpec:
    n_sequences: int = 60
    roi_size: int = 32
    canvas: tuple[int, int] = (40, 44)
    k_range: tuple[int, int] = (100, 140)
    noise: float = 0.01
    base_level: float = 0.5
    dt: float = DT
    short_sequences: int = 0


def toy_cardiac_sequence(freq_hz: float, k: int, rng: np.random.Generator, spec: CorpusSpec,
                         sequence_id: str, state: str) -> tuple[np.ndarray, SequenceAnnotation]:
    """A pulsing ring whose radius and beat frequency both encode the failure age."""
    n = spec.roi_size
    t = np.arange(k) * spec.dt
    phase = rng.uniform(0, 2 * np.pi)
    pulse = 1.2 + np.cos(2 * np.pi * freq_hz * t + phase)
    body = spec.base_level + 0.5 * ring_pattern(n, freq_hz)[:, :, None] * pulse
    body = body + spec.noise * rng.standard_normal(body.shape)
    body = np.clip(body, 0.01, None)
    cx = int(rng.integers(1, spec.canvas[0] - n))
    cy = int(rng.integers(1, spec.canvas[1] - n))
    canvas = np.zeros(spec.canvas + (k,))
    canvas[cx:cx + n, cy:cy + n, :] = body
    # a small burned-in annotation mark away from the heart region
    canvas[0:2, 0, :] = 1.0
    ann = SequenceAnnotation(sequence_id, state, round(age_from_frequency(freq_hz), 6), Roi(cx, cy, n, n))
    return canvas, ann


def toy_cardiac_corpus(spec: CorpusSpec = CorpusSpec(), seed: int = 42) -> list[VideoSequence]:
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(spec.n_sequences):
        state, lo, hi = STATE_BANDS[i % len(STATE_BANDS)]
        freq = float(rng.uniform(lo, hi))
        k = int(rng.integers(spec.k_range[0], spec.k_range[1] + 1))
        if i < spec.short_sequences:
            k = 99
        frames, ann = toy_cardiac_sequence(freq, k, rng, spec, f"seq{i:03d}", state)
        seqs.append(VideoSequence(frames, spec.dt, ann))
    return seqs


PRESETS = ("two-tone", "cardiac-toy", "short")


def preset_corpus(name: str, seed: int = 42) -> list[VideoSequence]:
    if name == "two-tone":
        rng = np.random.default_rng(seed)
        out = []
        for i, state in enumerate(("CTL", "OB", "SH")):
            f1 = float(rng.uniform(4.0, 6.0))
            tones = (Tone(f1, -0.3), Tone(f1 + 3.0, 0.2))
            v = two_tone_video(tones=tones, noise=0.0)
            ann = SequenceAnnotation(f"tone{i}", state, round(age_from_frequency(f1), 6))
            out.append(VideoSequence(v, DT, ann))
        return out
    if name == "cardiac-toy":
        return toy_cardiac_corpus(CorpusSpec(), seed)
    if name == "short":
        return toy_cardiac_corpus(CorpusSpec(n_sequences=6, short_sequences=1), seed)
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


def write_corpus(out_dir, sequences: list[VideoSequence], manifest_name: str = "manifest.csv") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "sequences").mkdir(parents=True, exist_ok=True)
    rows = []
    for seq in sequences:
        rel = Path("sequences") / f"{seq.sequence_id}.mdt"
        write_tensor_file(out_dir / rel, seq.frames)
        rows.append((rel.as_posix(), seq.annotation))
    path = out_dir / manifest_name
    write_manifest(path, rows)
    return path
