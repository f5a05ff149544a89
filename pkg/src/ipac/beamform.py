"""Delay-and-sum image formation, compounding, clutter filtering, power Doppler."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .arraymodel import ProbeGeometry, TransmitScheme, element_positions, transmit_footprint, transmit_time

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageGrid:
    """Rectangular pixel grid in the imaging plane (meters)."""

    x_min: float
    x_max: float
    z_min: float
    z_max: float
    pitch: float

    def __post_init__(self):
        if self.pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        if self.z_min <= 0 or self.z_max <= self.z_min or self.x_max <= self.x_min:
            raise ValueError("grid must have x_min < x_max and 0 < z_min < z_max")

    @property
    def x(self) -> np.ndarray:
        n = int(np.floor((self.x_max - self.x_min) / self.pitch + 1e-9)) + 1
        return self.x_min + self.pitch * np.arange(n)

    @property
    def z(self) -> np.ndarray:
        n = int(np.floor((self.z_max - self.z_min) / self.pitch + 1e-9)) + 1
        return self.z_min + self.pitch * np.arange(n)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.z), len(self.x)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """``(X, Z)`` arrays of shape ``(nz, nx)``."""
        return np.meshgrid(self.x, self.z)

    def index_to_position(self, iz, ix) -> tuple[np.ndarray, np.ndarray]:
        """Map (possibly fractional) pixel indices to meters."""
        return self.x_min + np.asarray(ix) * self.pitch, self.z_min + np.asarray(iz) * self.pitch

    def position_to_index(self, x, z) -> tuple[np.ndarray, np.ndarray]:
        return (np.asarray(z) - self.z_min) / self.pitch, (np.asarray(x) - self.x_min) / self.pitch


def analytic_signal(rf, axis: int = -1) -> np.ndarray:
    """Analytic signal by one-sided spectral selection; ``real(out) == rf``."""
    rf = np.asarray(rf, dtype=float)
    n = rf.shape[axis]
    spec = sfft.fft(rf, axis=axis)
    h = np.zeros(n)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1
        h[1:n // 2] = 2
    else:
        h[0] = 1
        h[1:(n + 1) // 2] = 2
    shape = [1] * rf.ndim
    shape[axis] = n
    return sfft.ifft(spec * h.reshape(shape), axis=axis)


class DelayAndSum:
    """Plane/diverging-wave DAS with optional per-element receive corrections.

    Tables of interpolation indices are computed once per transmit and
    reused for every frame. Interpolation is linear on the baseband IQ
    signal, followed by carrier phase rotation.

    Parameters
    ----------
    geom, scheme, c
        Probe, transmit sequence and assumed sound speed.
    grid : ImageGrid
    sampling_rate, t0, n_samples
        Time axis of the channel data.
    demod_frequency : float
        Carrier used for baseband interpolation [Hz].
    corrections : array, optional
        Per-element receive delays ``tau_n`` [s], added to the focusing
        law; shape ``(n_elements,)`` or ``(n_transmits, n_elements)``.
    f_number : float, optional
        Receive aperture limit; 0 disables it.
    transmit_corrections : bool, optional
        Also add, per pixel, the correction interpolated at the element
        where the transmit ray through that pixel leaves the array. This
        approximates the transmit-side delay of a near-field screen.
    """

    def __init__(self, geom: ProbeGeometry, scheme: TransmitScheme, c: float, grid: ImageGrid,
                 sampling_rate: float, t0: float, n_samples: int, demod_frequency: float,
                 corrections=None, f_number: float = 0.0, transmit_corrections: bool = False):
        self.geom = geom
        self.scheme = scheme
        self.grid = grid
        self.fs = sampling_rate
        self.t0 = t0
        self.n_samples = n_samples
        self.omega_d = 2 * np.pi * demod_frequency
        n_el = geom.n_elements
        tau = np.zeros((scheme.n_transmits, n_el)) if corrections is None else np.asarray(corrections, float)
        if tau.ndim == 1:
            tau = np.broadcast_to(tau, (scheme.n_transmits, n_el))
        if tau.shape != (scheme.n_transmits, n_el):
            raise ValueError("corrections must have one delay per element")
        X, Z = grid.mesh()
        xe = element_positions(geom)[:, 0]
        t_rx = np.hypot(X[None] - xe[:, None, None], Z[None]) / c
        t_tx = transmit_time(scheme, geom, c, X, Z)
        if transmit_corrections:
            foot = transmit_footprint(scheme, X, Z)
            t_tx = t_tx + np.stack([np.interp(foot[a], xe, tau[a]) for a in range(scheme.n_transmits)])
        if f_number > 0:
            mask = np.abs(X[None] - xe[:, None, None]) <= Z[None] / (2 * f_number)
        else:
            mask = np.ones(t_rx.shape, dtype=bool)
        self._tables = []
        for a in range(scheme.n_transmits):
            t = t_tx[a][None] + t_rx + tau[a][:, None, None]
            pos = (t - t0) * self.fs
            i0 = np.floor(pos).astype(np.int64)
            frac = pos - i0
            valid = mask & (i0 >= 0) & (i0 + 1 < n_samples)
            i0 = np.where(valid, i0, 0)
            rot = np.where(valid, np.exp(1j * self.omega_d * t), 0)
            self._tables.append((i0.reshape(n_el, -1), frac.reshape(n_el, -1), rot.reshape(n_el, -1)))

    @classmethod
    def for_channel(cls, channel, geom, scheme, grid, demod_frequency, c=None, corrections=None,
                    f_number=0.0, transmit_corrections=False):
        c = channel.metadata.get("sound_speed", 1540.0) if c is None else c
        return cls(geom, scheme, c, grid, channel.sampling_rate, channel.t0, channel.n_samples,
                   demod_frequency, corrections, f_number, transmit_corrections)

    def baseband(self, rf) -> np.ndarray:
        """Analytic signal demodulated by the carrier (IQ), same shape as ``rf``."""
        t = self.t0 + np.arange(rf.shape[-1]) / self.fs
        return analytic_signal(rf) * np.exp(-1j * self.omega_d * t)

    def beamform_transmit(self, iq, transmit: int) -> np.ndarray:
        """Beamform one transmit from IQ data ``[..., element, time]`` -> ``[..., nz, nx]``."""
        i0, frac, rot = self._tables[transmit]
        lead = iq.shape[:-2]
        n_el = iq.shape[-2]
        iq = iq.reshape((-1, n_el, iq.shape[-1]))
        out = np.zeros((iq.shape[0], i0.shape[1]), dtype=complex)
        for n in range(n_el):
            sig = iq[:, n, :]
            v = sig[:, i0[n]] * (1 - frac[n]) + sig[:, i0[n] + 1] * frac[n]
            out += v * rot[n]
        return out.reshape(lead + self.grid.shape)

    def __call__(self, rf) -> np.ndarray:
        """Per-transmit complex images from RF ``[..., transmit, element, time]``.

        Returns ``[..., transmit, nz, nx]``.
        """
        iq = self.baseband(np.asarray(rf, dtype=float))
        images = [self.beamform_transmit(iq[..., a, :, :], a) for a in range(self.scheme.n_transmits)]
        return np.stack(images, axis=-3)


def das(channel, geom: ProbeGeometry, scheme: TransmitScheme, grid: ImageGrid, transmit: int,
        corrections=None, frame: int = 0, demod_frequency: float | None = None, c: float | None = None):
    """Single-frame, single-transmit DAS image (convenience wrapper)."""
    fd = demod_frequency if demod_frequency is not None else channel.metadata.get("center_frequency")
    if fd is None:
        raise ValueError("demodulation frequency unknown; pass demod_frequency")
    bf = DelayAndSum.for_channel(channel, geom, scheme, grid, fd, c=c, corrections=corrections)
    iq = bf.baseband(channel.samples[frame, transmit])
    return bf.beamform_transmit(iq, transmit)


def compound(images, axis: int = -3) -> np.ndarray:
    """Coherent sum over the transmit axis."""
    return np.sum(images, axis=axis)


def svd_clutter_filter(stack, threshold: int) -> np.ndarray:
    """Zero the ``threshold`` largest singular components across frames.

    ``stack`` has frames on axis 0; every other axis is flattened into the
    space dimension of the Casorati matrix.
    """
    stack = np.asarray(stack)
    n_f = stack.shape[0]
    if n_f < 2:
        raise ValueError("SVD clutter filtering needs at least 2 frames")
    if threshold <= 0:
        return stack.copy()
    if threshold >= n_f:
        warnings.warn("SVD threshold >= number of frames: output is all zero", RuntimeWarning, stacklevel=2)
        return np.zeros_like(stack)
    casorati = stack.reshape(n_f, -1).T
    u, s, vh = np.linalg.svd(casorati, full_matrices=False)
    kept = (u[:, threshold:] * s[threshold:]) @ vh[threshold:]
    return kept.T.reshape(stack.shape).astype(stack.dtype, copy=False)


def bandpass(rf, sampling_rate: float, low: float | None = None, high: float | None = None) -> np.ndarray:
    """Brick-wall spectral band-pass along time; pass-through when both edges are None."""
    rf = np.asarray(rf, dtype=float)
    if low is None and high is None:
        return rf.copy()
    n = rf.shape[-1]
    f = sfft.rfftfreq(n, 1 / sampling_rate)
    keep = np.ones_like(f, dtype=bool)
    if low is not None:
        keep &= f >= low
    if high is not None:
        keep &= f <= high
    return sfft.irfft(sfft.rfft(rf, axis=-1) * keep, n=n, axis=-1)


def power_doppler(frames) -> np.ndarray:
    """Per-pixel mean of ``|pixel|^2`` across frames (axis 0)."""
    frames = np.asarray(frames)
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame")
    return np.mean(np.abs(frames) ** 2, axis=0)
