"""Coherence-based aberration estimate from isolated bubble echoes.

Each bubble hyperbola is flattened with the geometric focusing law, then
neighboring channels are cross-correlated and the lags are integrated
across the aperture.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy import fft as sfft

from .aberration import remove_piston
from .arraymodel import ProbeGeometry, PulseSpec, TransmitScheme, element_positions, transmit_time
from .wavemodel import ChannelData

logger = logging.getLogger(__name__)


def focusing_times(geom: ProbeGeometry, scheme: TransmitScheme, transmit: int, x: float, z: float,
                   c: float) -> np.ndarray:
    """Round-trip arrival time of a point echo on every element.

    For a plane wave at angle ``theta`` this is
    ``(z cos(theta) + x sin(theta) + |r - r_n|) / c`` plus the constant firing
    offset of the transmit sequence.
    """
    xe = element_positions(geom)[:, 0]
    t_tx = transmit_time(scheme, geom, c, x, z)[transmit]
    return t_tx + np.hypot(z, x - xe) / c


def rephase_hyperbola(samples, sampling_rate: float, t0: float, times, half_window: float) -> tuple[np.ndarray, np.ndarray]:
    """Shift each element trace by ``-times[n]`` and crop ``|t| <= half_window``.

    Parameters
    ----------
    samples : array ``[element, time]``
        RF traces of one frame and transmit.
    times : array ``[element]``
        Expected arrival time per element (s).

    Returns
    -------
    realigned : array ``[element, window]``
    t : array ``[window]``
        Time axis relative to the expected arrival.

    The shift is applied as a spectral phase ramp on a zero-padded copy, so
    sub-sample arrivals are honored exactly for band-limited signals.
    """
    samples = np.asarray(samples, dtype=float)
    times = np.asarray(times, dtype=float)
    n_el, n_t = samples.shape
    if times.shape != (n_el,):
        raise ValueError("one arrival time per element required")
    n_fft = sfft.next_fast_len(2 * n_t)
    f = sfft.rfftfreq(n_fft, 1 / sampling_rate)
    spec = sfft.rfft(samples, n=n_fft, axis=-1)
    # out_n(t) = s_n(t + times_n), sampled at t = t0 + k / fs relative times
    shifted = sfft.irfft(spec * np.exp(2j * np.pi * f[None, :] * (times[:, None] - t0)), n=n_fft, axis=-1)
    half = int(np.ceil(half_window * sampling_rate))
    idx = np.arange(-half, half + 1) % n_fft
    return shifted[:, idx], np.arange(-half, half + 1) / sampling_rate


def _lag(a, b, sampling_rate: float, pad: int) -> float:
    """Delay of ``b`` relative to ``a`` from the peak of their zero-padded correlation."""
    n = len(a)
    n_fft = 2 * n
    spec = np.conj(sfft.rfft(a, n_fft)) * sfft.rfft(b, n_fft)
    xc = sfft.irfft(spec, n=n_fft * pad)
    m = len(xc)
    k = int(np.argmax(xc))
    # parabolic refinement of the padded peak removes the residual grid bias
    y0, y1, y2 = xc[(k - 1) % m], xc[k], xc[(k + 1) % m]
    den = y0 - 2 * y1 + y2
    frac = 0.5 * (y0 - y2) / den if den < 0 else 0.0
    if k > m // 2:
        k -= m
    return (k + frac) / (sampling_rate * pad)


def coherence_delays(realigned, sampling_rate: float, pad: int = 8,
                     energy_floor: float = 1e-6) -> np.ndarray:
    """Per-element delays (s) from neighbor cross-correlation lags.

    Lags between consecutive usable elements are summed along the
    aperture; elements whose energy falls below ``energy_floor`` times the
    median energy are flagged and their delays interpolated from
    neighbors. The result is piston-free.
    """
    sig = np.asarray(realigned, dtype=float)
    energy = np.sum(sig ** 2, axis=-1)
    ref = np.median(energy[energy > 0]) if np.any(energy > 0) else 0.0
    good = np.nonzero(energy > energy_floor * ref)[0] if ref > 0 else np.array([], dtype=int)
    if good.size < 2:
        raise ValueError("need at least 2 elements with signal")
    if good.size < len(sig):
        warnings.warn(f"{len(sig) - good.size} element(s) without signal; delays interpolated",
                      RuntimeWarning, stacklevel=2)
    lags = [_lag(sig[i], sig[j], sampling_rate, pad) for i, j in zip(good[:-1], good[1:])]
    tau_good = np.concatenate([[0.0], np.cumsum(lags)])
    tau = np.interp(np.arange(len(sig)), good, tau_good)
    return remove_piston(tau)


def coherence_estimate(channel: ChannelData, positions, geom: ProbeGeometry, pulse: PulseSpec,
                       scheme: TransmitScheme, frame: int = 0, transmit: int | None = None,
                       c: float | None = None, window_pulses: float = 3.0, pad: int = 8) -> np.ndarray:
    """Average coherence delays over several bubbles of one frame.

    ``positions`` are ``(x, z)`` bubble locations; ``transmit`` defaults to
    the middle of the sequence. The window spans ``window_pulses`` pulse
    lengths on each side of the hyperbola.
    """
    c = channel.metadata.get("sound_speed", 1540.0) if c is None else c
    a = scheme.n_transmits // 2 if transmit is None else transmit
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) == 0:
        raise ValueError("no bubble position given")
    half = window_pulses * pulse.n_cycles / pulse.center_frequency
    est = []
    for x, z in pos:
        times = focusing_times(geom, scheme, a, x, z, c)
        sig, _ = rephase_hyperbola(channel.samples[frame, a], channel.sampling_rate, channel.t0, times, half)
        est.append(coherence_delays(sig, channel.sampling_rate, pad))
    return remove_piston(np.mean(est, axis=0))


def max_second_difference(delays) -> float:
    """Largest absolute second difference along the aperture."""
    d = np.asarray(delays, dtype=float)
    return float(np.max(np.abs(np.diff(d, 2)))) if d.size >= 3 else 0.0
