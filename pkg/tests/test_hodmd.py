import io
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modalheart.fixtures import (TWO_TONES, damped_oscillator, planted_linear_system,
                                 two_tone_video)
from modalheart.hodmd import (DmdMode, DmdSpectrum, ExtrapolationWarning, HodmdConfig,
                              SequenceTooShort, ZeroInput, delay_embed, dmd_d,
                              hodmd_iterative, koopman_system, load_spectrum, read_spectrum_file,
                              reconstruct, reconstruct_snapshots, select_modes,
                              spectrum_to_bytes, write_spectrum_file)
from modalheart.tensor import BadMagic, Truncated

DT = 0.004
CFG = HodmdConfig()


def test_delay_rule():
    assert CFG.delay_for(250) == 50
    assert CFG.delay_for(4) == 1
    assert HodmdConfig(d=7).delay_for(250) == 7


def test_delay_embed_shape_and_blocks():
    x = np.arange(12.0).reshape(2, 6)
    e = delay_embed(x, 3)
    assert e.shape == (6, 4)
    assert np.array_equal(e[2:4, 0], x[:, 1])
    with pytest.raises(ValueError):
        delay_embed(x, 7)


def test_damped_oscillator():
    x = damped_oscillator()
    spec = dmd_d(x, CFG, d=50)
    assert len(spec.modes) == 2
    for m in spec.modes:
        assert abs(abs(m.omega) - 2 * np.pi * 5) <= 1e-6 * 2 * np.pi * 5
        assert abs(m.delta + 0.5) <= 1e-6 * 0.5
    assert spec.modes[0].omega == pytest.approx(-spec.modes[1].omega, rel=1e-9)


def test_constant_signal_single_mode():
    x = np.full((1, 150), 2.5)
    spec = dmd_d(x, CFG)
    assert len(spec.modes) == 1
    m = spec.modes[0]
    assert abs(m.omega) < 1e-10 and abs(m.delta) < 1e-8
    assert np.allclose(reconstruct_snapshots(spec, 150), x, atol=1e-10)


def test_weak_tone_dropped():
    t = np.arange(250) * DT
    x = np.cos(2 * np.pi * 5 * t) + 1e-5 * np.cos(2 * np.pi * 11 * t)
    spec = dmd_d(x, CFG)
    assert len(spec.modes) == 2
    assert all(abs(abs(m.frequency_hz) - 5) < 1e-6 for m in spec.modes)


def test_too_short_and_zero():
    with pytest.raises(SequenceTooShort):
        dmd_d(np.ones((2, 5)), CFG, d=4)
    empty = dmd_d(np.zeros((3, 60)), CFG)
    assert len(empty.modes) == 0
    with pytest.raises(SequenceTooShort):
        hodmd_iterative(np.random.default_rng(0).standard_normal((4, 4, 99)), CFG)
    with pytest.raises(ZeroInput):
        hodmd_iterative(np.zeros((4, 4, 120)), CFG)


def test_koopman_fit_is_least_squares():
    x = damped_oscillator()[None, :] + 0.01 * np.random.default_rng(1).standard_normal((1, 250))
    sys = koopman_system(x, 20, 5e-4)
    past, future = sys.reduced_snapshots[:, :-1], sys.reduced_snapshots[:, 1:]
    resid = future - sys.operator @ past
    # normal equations: residual orthogonal to the regressors
    assert np.max(np.abs(resid @ past.T)) <= 1e-9 * np.linalg.norm(past) ** 2


def test_planted_linear_system_d1():
    for seed in range(5):
        x, eigs, _ = planted_linear_system(n=6, k=60, seed=seed)
        spec = dmd_d(x, HodmdConfig(eps_svd=1e-12, eps_dmd=1e-12), d=1)
        got = np.array([m.mu for m in spec.modes])
        assert len(got) == 6
        assert max(np.min(np.abs(got - e)) for e in eigs) <= 1e-8


def _check_spectrum_invariants(spec):
    a = spec.amplitudes
    assert np.all(np.diff(a) <= 0) and a[0] > 0
    for m in spec.modes:
        assert np.linalg.norm(m.u) == pytest.approx(1.0, abs=1e-10)
        assert abs(m.mu - np.exp((m.delta + 1j * m.omega) * spec.dt)) <= 1e-10
        assert abs(abs(m.mu) - np.exp(m.delta * spec.dt)) <= 1e-10
        assert -np.pi / spec.dt < m.omega <= np.pi / spec.dt


def test_two_tone_video_clean():
    v = two_tone_video()
    res = hodmd_iterative(v, CFG)
    spec = res.spectrum
    assert len(spec.modes) == 4
    assert res.iterations <= 10
    assert np.linalg.norm(res.reconstruction - v) <= 1e-6 * np.linalg.norm(v)
    _check_spectrum_invariants(spec)
    for tone in TWO_TONES:
        w = 2 * np.pi * tone.freq_hz
        m = min(spec.modes, key=lambda m: abs(m.omega - w))
        assert abs(m.omega - w) <= 1e-6 * w
        assert abs(m.delta - tone.growth) <= 1e-6 * abs(tone.growth)
    # conjugate pairs with equal amplitude
    pos = sorted((m for m in spec.modes if m.omega > 0), key=lambda m: m.omega)
    neg = sorted((m for m in spec.modes if m.omega < 0), key=lambda m: -m.omega)
    for p, n in zip(pos, neg):
        assert abs(p.a - n.a) <= 1e-9 * p.a
        assert np.allclose(p.u, n.u.conj(), atol=1e-9)


def test_two_tone_video_noisy():
    res = hodmd_iterative(two_tone_video(noise=0.01, seed=3), CFG)
    assert res.iterations <= 10
    osc = sorted(m.frequency_hz for m in res.spectrum.dominant_modes(2))
    for f, tone in zip(osc, sorted(TWO_TONES, key=lambda t: t.freq_hz)):
        assert abs(f - tone.freq_hz) <= 1e-2 * tone.freq_hz
    assert res.spectrum.dominant_frequency_hz() in [pytest.approx(t.freq_hz, rel=1e-2) for t in TWO_TONES]


@pytest.mark.parametrize("seed", range(10))
def test_noisy_dominant_tones_across_noise_draws(seed):
    spec = hodmd_iterative(two_tone_video(noise=0.01, seed=seed), CFG).spectrum
    found = sorted(m.frequency_hz for m in spec.dominant_modes(2))
    for f, tone in zip(found, sorted(TWO_TONES, key=lambda t: t.freq_hz)):
        assert abs(f - tone.freq_hz) <= 1e-2 * tone.freq_hz


def test_window_energy_discounts_fast_decay():
    u = np.ones(2, dtype=complex) / np.sqrt(2)
    fast = DmdMode(u, 5.0, -150.0, 2 * np.pi * 100, np.exp((-150 + 2j * np.pi * 100) * DT))
    slow = DmdMode(u, 1.0, 0.0, 2 * np.pi * 5, np.exp(2j * np.pi * 5 * DT))
    spec = DmdSpectrum([fast, slow], DT, 0.0, 249 * DT)
    assert spec.dominant_frequency_hz() == pytest.approx(5.0)
    assert spec.window_energy()[1] == pytest.approx(1.0)


def test_reconstruct_constant_mode():
    c = np.full((3, 2), 0.7)
    spec = DmdSpectrum([DmdMode(c.astype(complex), 1.0, 0.0, 0.0, 1 + 0j)], DT, 0.0, 1.0)
    out = reconstruct(spec, [0.0, 0.3, 1.0])
    assert out.shape == (3, 2, 3) and np.allclose(out, 0.7)


def test_reconstruct_periodic_pair():
    u = np.array([1.0 + 0.5j, -0.3 + 1j]) / np.sqrt(2.35)
    w = 2 * np.pi * 3
    mu = np.exp(1j * w * DT)
    spec = DmdSpectrum([DmdMode(u, 1.0, 0.0, w, mu), DmdMode(u.conj(), 1.0, 0.0, -w, mu.conj())], DT, 0.0, 10.0)
    t = np.linspace(0, 1, 37)
    a = reconstruct(spec, t)
    b = reconstruct(spec, t + 2 * np.pi / w)
    assert np.max(np.abs(a - b)) <= 1e-8
    # closed form: 2 Re(u e^{iwt})
    assert np.allclose(a, 2 * (u[:, None] * np.exp(1j * w * t)).real, atol=1e-12)


def test_reconstruct_matches_first_snapshot_fit():
    x = damped_oscillator()[None, :]
    spec = dmd_d(x, CFG)
    assert abs(reconstruct(spec, [0.0])[0, 0] - x[0, 0]) <= 1e-8
    assert np.allclose(reconstruct(spec, np.arange(250) * DT), reconstruct_snapshots(spec, 250), atol=1e-9)


def test_reconstruct_errors_and_extrapolation():
    with pytest.raises(ValueError):
        reconstruct(DmdSpectrum([], DT), [0.0])
    spec = dmd_d(damped_oscillator()[None, :], CFG)
    with pytest.warns(ExtrapolationWarning):
        reconstruct(spec, [10.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        reconstruct(spec, [0.0, spec.timespan])


_LOOSE = dmd_d(two_tone_video(8, 8, 150, noise=0.01).reshape(64, 150)[:6], HodmdConfig(eps_dmd=1e-12))


@given(st.floats(1e-6, 0.2), st.floats(1e-6, 0.2))
def test_eps_dmd_monotone(e1, e2):
    spec = _LOOSE
    lo, hi = sorted((e1, e2))
    assert len(select_modes(spec.modes, hi)) <= len(select_modes(spec.modes, lo))


def test_band_filter():
    t = np.arange(250) * DT
    x = np.cos(2 * np.pi * 5 * t) + 0.5 * np.cos(2 * np.pi * 11 * t)
    spec = dmd_d(x, HodmdConfig(band_hz=(10.0, 12.0)))
    assert spec.modes and all(10 <= abs(m.frequency_hz) <= 12 for m in spec.modes)


def test_spectrum_container_round_trip(tmp_path):
    res = hodmd_iterative(two_tone_video(), CFG)
    p = tmp_path / "s.mdsp"
    write_spectrum_file(p, res.spectrum)
    back = read_spectrum_file(p)
    assert spectrum_to_bytes(back) == p.read_bytes()
    assert back.retained_hosvd_ranks == res.spectrum.retained_hosvd_ranks
    for a, b in zip(back.modes, res.spectrum.modes):
        assert np.array_equal(a.u, b.u) and (a.a, a.delta, a.omega, a.mu) == (b.a, b.delta, b.omega, b.mu)


def test_spectrum_container_errors():
    with pytest.raises(BadMagic):
        load_spectrum(io.BytesIO(b"NOPE" + bytes(80)))
    raw = spectrum_to_bytes(dmd_d(damped_oscillator()[None, :], CFG))
    with pytest.raises(Truncated):
        load_spectrum(io.BytesIO(raw[:-5]))
