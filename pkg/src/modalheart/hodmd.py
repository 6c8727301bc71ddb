"""Higher order DMD (DMD-d) and its iterative HOSVD-based multidimensional driver.

The reduced pipeline works on an (r, K) matrix of temporal coefficients:

1. stack ``d`` consecutive snapshots into a delay-embedded matrix,
2. compress it with an SVD truncated at ``eps_svd``,
3. fit the one-step Koopman matrix by least squares,
4. eigendecompose it; log(mu)/dt gives growth rate and angular frequency,
5. fit amplitudes against all K snapshots at once,
6. drop modes whose relative amplitude is at or below ``eps_dmd``.

``hodmd_iterative`` wraps this with a HOSVD of the (N_x, N_y, K) video and
repeats on its own reconstruction until the retained HOSVD ranks stop
changing.
"""
from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .modal_svd import HosvdFactors, hosvd
from .tensor import (BadMagic, TensorFormatError, Truncated, VideoSequence, dump_tensor,
                     load_tensor)

MAGIC_SPECTRUM = b"MDSP"


class SequenceTooShort(ValueError):
    pass


class ZeroInput(ValueError):
    pass


class ExtrapolationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class HodmdConfig:
    d: Optional[int] = None
    d_divisor: int = 5
    eps_svd: float = 5e-4
    eps_dmd: float = 5e-4
    dt_seconds: float = 0.004
    min_snapshots: int = 100
    max_outer_iters: int = 10
    band_hz: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not (self.eps_svd > 0 and self.eps_dmd > 0):
            raise ValueError("tolerances must be positive")
        if not self.dt_seconds > 0:
            raise ValueError("dt_seconds must be positive")
        if self.d is not None and self.d < 1:
            raise ValueError("d must be >= 1")
        if self.d_divisor < 1 or self.min_snapshots < 1 or self.max_outer_iters < 1:
            raise ValueError("d_divisor, min_snapshots and max_outer_iters must be >= 1")

    def delay_for(self, k: int) -> int:
        """Delay index for a K-snapshot clip: explicit ``d`` or floor(K / divisor)."""
        d = self.d if self.d is not None else k // self.d_divisor
        return max(1, min(d, k - 1))


@dataclass
class DmdMode:
    u: np.ndarray
    a: float
    delta: float
    omega: float
    mu: complex

    @property
    def frequency_hz(self) -> float:
        return self.omega / (2 * math.pi)


@dataclass
class DmdSpectrum:
    modes: list[DmdMode]
    dt: float
    t1: float = 0.0
    timespan: float = 0.0
    retained_hosvd_ranks: tuple[int, ...] = (0, 0, 0)

    def __len__(self):
        return len(self.modes)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([m.a for m in self.modes])

    @property
    def omegas(self) -> np.ndarray:
        return np.array([m.omega for m in self.modes])

    @property
    def deltas(self) -> np.ndarray:
        return np.array([m.delta for m in self.modes])

    def window_energy(self) -> np.ndarray:
        """RMS magnitude of each mode's contribution a*|mu|^k over the sampled snapshots.

        Unlike ``a`` (the value at t1) this does not favour modes that die
        out after a few frames.
        """
        n = int(round(self.timespan / self.dt)) + 1 if self.dt > 0 else 1
        k = np.arange(n)
        out = []
        for m in self.modes:
            lg = 2 * k * m.delta * self.dt
            peak = lg.max()
            out.append(m.a * math.exp(0.5 * peak) * math.sqrt(np.mean(np.exp(lg - peak))))
        return np.array(out)

    def dominant_modes(self, n: int = 1, oscillating: bool = True) -> list[DmdMode]:
        """The ``n`` modes with the largest window energy (one per conjugate pair when oscillating)."""
        energy = self.window_energy()
        order = np.argsort(-energy, kind="stable")
        picked = [self.modes[j] for j in order if not oscillating or self.modes[j].omega > 1e-9]
        return picked[:n]

    def dominant_frequency_hz(self) -> float:
        """|frequency| of the oscillating mode with the most energy in the window (0 if none)."""
        top = self.dominant_modes(1)
        return top[0].frequency_hz if top else 0.0


@dataclass
class KoopmanSystem:
    """Delay-embedded snapshots and the reduced one-step operator fit on them."""

    delay_windows: np.ndarray
    basis: np.ndarray
    reduced_snapshots: np.ndarray
    operator: np.ndarray


def delay_embed(x: np.ndarray, d: int) -> np.ndarray:
    """Stack ``d`` consecutive columns: result is (d*r, K-d+1)."""
    r, k = x.shape
    if not 1 <= d <= k:
        raise ValueError(f"delay {d} invalid for {k} snapshots")
    return np.concatenate([x[:, i:k - d + 1 + i] for i in range(d)], axis=0)


def koopman_system(x: np.ndarray, d: int, eps_svd: float) -> KoopmanSystem:
    windows = delay_embed(x, d)
    f = linalg.truncate(linalg.svd(windows), linalg.tol_rule(eps_svd))
    # keep the one-step fit overdetermined (or square)
    cap = max(1, windows.shape[1] - 1)
    if f.rank > cap:
        f = linalg.truncate(f, linalg.rank_rule(cap))
    reduced = f.sigma[:, None] * f.V.T
    past, future = reduced[:, :-1], reduced[:, 1:]
    # R past = future  <=>  past^T R^T = future^T
    sol = linalg.lstsq(past.T, future.T)
    return KoopmanSystem(windows, f.U, reduced, sol.x.T)


def fit_amplitudes(x: np.ndarray, q: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Complex b minimizing sum_k ||x_k - Q diag(mu^k) b||^2 over every snapshot."""
    r, k = x.shape
    mu = np.asarray(mu, dtype=np.complex128)
    # columns of growing modes are divided by |mu|^(K-1) so mu^k never overflows
    log_mu = np.log(np.where(mu == 0, 1e-300, mu))
    shift = np.maximum(log_mu.real, 0.0) * (k - 1)
    powers = np.exp(np.arange(k)[:, None] * log_mu[None, :] - shift[None, :])
    powers[:, mu == 0] = 0.0
    powers[0, mu == 0] = 1.0
    design = (powers[:, None, :] * q[None, :, :]).reshape(k * r, len(mu))
    rhs = x.T.reshape(k * r).astype(np.complex128)
    return linalg.lstsq(design, rhs).x * np.exp(-shift)


def _empty_spectrum(dt: float, k: int) -> DmdSpectrum:
    return DmdSpectrum([], dt, 0.0, (k - 1) * dt)


def dmd_d(reduced: np.ndarray, cfg: HodmdConfig, d: Optional[int] = None) -> DmdSpectrum:
    """Higher order DMD on an (r, K) coefficient matrix.

    Mode vectors ``u`` in the result live in the same r-dimensional
    coordinates as the input. An identically zero input gives an empty
    spectrum.
    """
    x = np.asarray(reduced, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    r, k = x.shape
    d = cfg.delay_for(k) if d is None else d
    if k < d + 2:
        raise SequenceTooShort(f"need K >= d + 2 snapshots, got K={k}, d={d}")
    dt = cfg.dt_seconds
    if not np.any(x):
        return _empty_spectrum(dt, k)
    system = koopman_system(x, d, cfg.eps_svd)
    pairs = linalg.eig(system.operator)
    mu = pairs.values
    # first delay block of the lifted eigenvectors = modes at the reference snapshot
    q = (system.basis @ pairs.vectors)[:r, :]
    norms = np.linalg.norm(q, axis=0)
    live = norms > 1e-14 * max(norms.max(), 1e-300)
    q, mu = q[:, live] / norms[live], mu[live]
    b = fit_amplitudes(x, q, mu)
    amps = np.abs(b)
    phase = np.where(amps > 0, b / np.where(amps > 0, amps, 1), 1)
    q = q * phase
    rates = np.log(mu.astype(np.complex128)) / dt

    order = np.argsort(-amps, kind="stable")
    modes = [DmdMode(q[:, j].copy(), float(amps[j]), float(rates[j].real), float(rates[j].imag),
                     complex(mu[j])) for j in order]
    modes = select_modes(modes, cfg.eps_dmd, cfg.band_hz)
    return DmdSpectrum(modes, dt, 0.0, (k - 1) * dt)


def select_modes(modes: list[DmdMode], eps_dmd: float,
                 band_hz: Optional[tuple[float, float]] = None) -> list[DmdMode]:
    """Amplitude-tolerance truncation, optionally followed by a |f| band filter."""
    if not modes or modes[0].a <= 0:
        return []
    a0 = modes[0].a
    kept = [m for m in modes if m.a / a0 > eps_dmd]
    if band_hz is not None:
        lo, hi = band_hz
        kept = [m for m in kept if lo <= abs(m.frequency_hz) <= hi]
    return kept


def reconstruct(spec: DmdSpectrum, times: Sequence[float] | np.ndarray) -> np.ndarray:
    """Real part of sum_m a_m u_m exp((delta_m + i omega_m)(t - t1)).

    Output shape is ``u.shape + (len(times),)``.
    """
    if not spec.modes:
        raise ValueError("cannot reconstruct from an empty spectrum")
    t = np.asarray(times, dtype=np.float64) - spec.t1
    span = spec.timespan
    if np.any(t < -1e-12 * max(span, 1)) or np.any(t > span * (1 + 1e-12) + 1e-15):
        warnings.warn("reconstruction times fall outside the sampled window",
                      ExtrapolationWarning, stacklevel=2)
    shape = spec.modes[0].u.shape
    u = np.stack([m.u.reshape(-1) for m in spec.modes], axis=1)
    a = np.array([m.a for m in spec.modes])
    rates = np.array([m.delta + 1j * m.omega for m in spec.modes])
    dyn = np.exp(rates[:, None] * t[None, :]) * a[:, None]
    return (u @ dyn).real.reshape(shape + (len(t),))


def reconstruct_snapshots(spec: DmdSpectrum, k: int) -> np.ndarray:
    """Reconstruction at t1 + k*dt using integer powers of mu (no rounding drift)."""
    shape = spec.modes[0].u.shape
    u = np.stack([m.u.reshape(-1) for m in spec.modes], axis=1)
    ab = np.array([m.a for m in spec.modes])
    mu = np.array([m.mu for m in spec.modes])
    dyn = (mu[:, None] ** np.arange(k)[None, :]) * ab[:, None]
    return (u @ dyn).real.reshape(shape + (k,))


# -- multidimensional iterative driver -------------------------------------

@dataclass
class HodmdResult:
    spectrum: DmdSpectrum
    reconstruction: np.ndarray
    iterations: int
    rank_history: list[tuple[int, ...]] = field(default_factory=list)


def _spatial_basis(f: HosvdFactors) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal spatial basis W (N_p, r) and temporal coefficients (r, K)."""
    u1, u2, u3 = f.factors
    r1, r2, r3 = f.retained_ranks
    g = f.core.reshape(r1 * r2, r3) @ u3.T
    inner = linalg.svd(g)
    keep = inner.sigma > inner.sigma[0] * 1e-13 if inner.sigma[0] > 0 else inner.sigma > 0
    p, lam, v = inner.U[:, keep], inner.sigma[keep], inner.V[:, keep]
    w = np.einsum("ia,jb,abn->ijn", u1, u2, p.reshape(r1, r2, -1))
    return w.reshape(u1.shape[0] * u2.shape[0], -1), lam[:, None] * v.T


def hodmd_iterative(seq: VideoSequence | np.ndarray, cfg: HodmdConfig = HodmdConfig(),
                    dt_seconds: Optional[float] = None) -> HodmdResult:
    """HOSVD -> DMD-d -> reconstruct, repeated until the HOSVD ranks settle."""
    if isinstance(seq, VideoSequence):
        frames = seq.frames
        if dt_seconds is None and seq.dt_seconds != cfg.dt_seconds:
            cfg = replace(cfg, dt_seconds=seq.dt_seconds)
    else:
        frames = np.asarray(seq, dtype=np.float64)
    if dt_seconds is not None:
        cfg = replace(cfg, dt_seconds=dt_seconds)
    nx, ny, k = frames.shape
    if k < cfg.min_snapshots:
        raise SequenceTooShort(f"sequence has {k} snapshots, HODMD needs >= {cfg.min_snapshots}")
    if not np.any(frames):
        raise ZeroInput("video is identically zero")
    d = cfg.delay_for(k)

    current = frames
    history: list[tuple[int, ...]] = []
    spec = recon = None
    iterations = 0
    while iterations < cfg.max_outer_iters:
        iterations += 1
        f = hosvd(current, cfg.eps_svd)
        ranks = f.retained_ranks
        w, coeffs = _spatial_basis(f)
        reduced_spec = dmd_d(coeffs, cfg, d)
        modes = []
        for m in reduced_spec.modes:
            u = (w @ m.u).reshape(nx, ny)
            nrm = np.linalg.norm(u)
            modes.append(DmdMode(u / nrm, m.a * nrm, m.delta, m.omega, m.mu))
        spec = DmdSpectrum(modes, cfg.dt_seconds, 0.0, (k - 1) * cfg.dt_seconds, ranks)
        recon = reconstruct_snapshots(spec, k) if modes else np.zeros_like(frames)
        converged = bool(history) and history[-1] == ranks
        history.append(ranks)
        if converged or not modes:
            break
        current = recon
    return HodmdResult(spec, recon, iterations, history)


# -- MDSP container ---------------------------------------------------------

def dump_spectrum(spec: DmdSpectrum, fh) -> None:
    ranks = tuple(spec.retained_hosvd_ranks) + (0,) * (3 - len(spec.retained_hosvd_ranks))
    fh.write(MAGIC_SPECTRUM)
    fh.write(struct.pack("<Q3d3Q", len(spec.modes), spec.dt, spec.t1, spec.timespan, *ranks[:3]))
    for m in spec.modes:
        fh.write(struct.pack("<5d", m.a, m.delta, m.omega, m.mu.real, m.mu.imag))
        dump_tensor(np.asarray(m.u, dtype=np.complex128), fh)


def load_spectrum(fh) -> DmdSpectrum:
    if fh.read(4) != MAGIC_SPECTRUM:
        raise BadMagic("not an MDSP spectrum")
    head = fh.read(struct.calcsize("<Q3d3Q"))
    if len(head) != struct.calcsize("<Q3d3Q"):
        raise Truncated("spectrum header truncated")
    n, dt, t1, span, r1, r2, r3 = struct.unpack("<Q3d3Q", head)
    modes = []
    for _ in range(n):
        rec = fh.read(40)
        if len(rec) != 40:
            raise Truncated("spectrum mode record truncated")
        a, delta, omega, mre, mim = struct.unpack("<5d", rec)
        u = load_tensor(fh)
        if not np.iscomplexobj(u):
            raise TensorFormatError("mode image must be an MDTC block")
        modes.append(DmdMode(u, a, delta, omega, complex(mre, mim)))
    return DmdSpectrum(modes, dt, t1, span, (r1, r2, r3))


def write_spectrum_file(path, spec: DmdSpectrum) -> None:
    with open(path, "wb") as fh:
        dump_spectrum(spec, fh)


def read_spectrum_file(path) -> DmdSpectrum:
    with open(path, "rb") as fh:
        return load_spectrum(fh)


def spectrum_to_bytes(spec: DmdSpectrum) -> bytes:
    buf = io.BytesIO()
    dump_spectrum(spec, buf)
    return buf.getvalue()
