import warnings

import numpy as np
import pytest

from ipac.aberration import AberrationFunction, remove_piston
from ipac.arraymodel import ProbeGeometry, PulseSpec, TransmitScheme
from ipac.baseline import (coherence_delays, coherence_estimate, focusing_times, max_second_difference,
                           rephase_hyperbola)
from ipac.wavemodel import ScattererScene, simulate_channels

from conftest import C


@pytest.fixture(scope="module")
def setup():
    # thin element: no elevation-lens group delay, so the focusing law is exact
    geom = ProbeGeometry(48, 0.1e-3, 0.08e-3, 0.1e-3, 8e-3)
    pulse = PulseSpec(15.625e6, 0.67, 3, 62.5e6)
    scheme = TransmitScheme("plane_wave", tuple(np.deg2rad([-4.0, 0.0, 4.0])))
    return geom, pulse, scheme


def _peak_times(sig, fs, up=16):
    n = sig.shape[-1]
    fine = np.fft.irfft(np.fft.rfft(sig, axis=-1), n=n * up, axis=-1) * up
    env = np.abs(fine)
    return np.argmax(env, axis=-1) / (fs * up)


def _rephased(setup, pos, screen=None, at=None):
    geom, pulse, scheme = setup
    ch = simulate_channels([ScattererScene([pos], [1.0])], screen, geom, pulse, scheme, C)
    a = 1
    at = pos if at is None else at
    times = focusing_times(geom, scheme, a, at[0], at[1], C)
    sig, t = rephase_hyperbola(ch.samples[0, a], ch.sampling_rate, ch.t0, times, 3 * 3 / pulse.center_frequency)
    return ch, sig


def test_unaberrated_rephase_is_flat(setup):
    ch, sig = _rephased(setup, (0.3e-3, 4.5e-3))
    peaks = np.argmax(np.abs(sig), axis=-1)
    assert np.ptp(peaks) <= 1


def test_aberrated_residual_matches_delays(setup):
    geom, pulse, _ = setup
    n = geom.n_elements
    tau = 0.8 / pulse.center_frequency * np.sin(np.linspace(0, 2 * np.pi, n))
    ch, sig = _rephased(setup, (0.0, 4.5e-3), AberrationFunction(np.ones(n), tau))
    # the echo returns through the screen on receive only once per element in the rephased trace,
    # plus a transmit contribution common to all elements (removed with the piston)
    est = coherence_delays(sig, ch.sampling_rate)
    assert np.max(np.abs(est - remove_piston(tau))) < 1 / ch.sampling_rate


def test_wrong_position_adds_tilt(setup):
    geom, pulse, _ = setup
    lam = pulse.wavelength(C)
    pos = (0.0, 4.5e-3)
    ch, sig = _rephased(setup, pos, at=(pos[0] + lam, pos[1]))
    est = coherence_delays(sig, ch.sampling_rate)
    xe = np.arange(geom.n_elements) - (geom.n_elements - 1) / 2
    slope = np.polyfit(xe, est, 1)[0]
    # geometric oracle: receive times differ by (|r - x_n| - |r' - x_n|)/c
    from ipac.arraymodel import element_positions
    x = element_positions(geom)[:, 0]
    oracle = remove_piston((np.hypot(pos[1], pos[0] - x) - np.hypot(pos[1], pos[0] + lam - x)) / C)
    assert abs(slope) * (geom.n_elements - 1) > 1 / ch.sampling_rate
    assert np.sqrt(np.mean((est - oracle) ** 2)) < 0.125 / ch.sampling_rate


def test_identical_signals_zero():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(64)
    assert np.allclose(coherence_delays(np.tile(s, (8, 1)), 50e6), 0.0, atol=1e-15)


def _shifted_copies(shifts, fs, n=256):
    t = (np.arange(n) - n / 2) / fs
    f0 = 10e6
    return np.array([np.exp(-((t - d) * f0 / 1.2) ** 2) * np.cos(2 * np.pi * f0 * (t - d)) for d in shifts])


def test_ramp_recovered():
    fs = 50e6
    ramp = np.linspace(-3, 3, 16) / fs * 0.77
    est = coherence_delays(_shifted_copies(ramp, fs), fs)
    assert np.sqrt(np.mean((est - remove_piston(ramp)) ** 2)) < 0.125 / fs


def test_translation_invariance():
    fs = 50e6
    shifts = np.random.default_rng(1).uniform(-1, 1, 12) / fs
    a = coherence_delays(_shifted_copies(shifts, fs), fs)
    b = coherence_delays(_shifted_copies(shifts + 2.3 / fs, fs), fs)
    assert np.allclose(a, b, atol=1e-3 / fs)


def test_dead_element_interpolated():
    fs = 50e6
    ramp = np.linspace(0, 2, 10) / fs
    sig = _shifted_copies(ramp, fs)
    sig[4] = 0.0
    with pytest.warns(RuntimeWarning, match="without signal"):
        est = coherence_delays(sig, fs)
    assert np.all(np.isfinite(est))
    assert est[4] == pytest.approx(0.5 * (est[3] + est[5]))


def test_needs_two_elements():
    with pytest.raises(ValueError):
        coherence_delays(np.zeros((5, 32)), 50e6)
    sig = np.zeros((5, 32))
    sig[2, 10] = 1.0
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            coherence_delays(sig, 50e6)


def test_estimate_averages_bubbles(setup):
    geom, pulse, scheme = setup
    n = geom.n_elements
    tau = 0.3 / pulse.center_frequency * np.cos(np.linspace(0, np.pi, n))
    pos = np.array([[-0.8e-3, 4.0e-3], [0.9e-3, 5.5e-3]])
    ch = simulate_channels([ScattererScene(pos, [1.0, 0.8])], AberrationFunction(np.ones(n), tau), geom,
                           pulse, scheme, C)
    est = coherence_estimate(ch, pos, geom, pulse, scheme, c=C)
    assert np.sqrt(np.mean((est - remove_piston(tau)) ** 2)) < 0.1 / pulse.center_frequency
    with pytest.raises(ValueError):
        coherence_estimate(ch, np.empty((0, 2)), geom, pulse, scheme)


def test_max_second_difference():
    assert max_second_difference([1.0, 2.0, 3.0, 4.0]) == 0.0
    assert max_second_difference([0.0, 1.0, 0.0]) == 2.0
    assert max_second_difference([1.0]) == 0.0
