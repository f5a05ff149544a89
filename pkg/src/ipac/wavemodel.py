"""Frequency-domain forward model and channel-data synthesis.

The model signal on receive element ``m`` for one transmit is

    M_m = u_m * sum_s sum_n R[m, s] Gamma[s] T[n, s] u_n

which in matrix form reads ``M = u o (H u)`` with ``H = R diag(Gamma) T^T``.
Operators are evaluated on whole frequency grids at once; the leading axis of
every batched array is frequency.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .arraymodel import (
    ProbeGeometry,
    PulseSpec,
    TransmitScheme,
    _geometry_terms,
    directivity,
    elevation_integral,
    element_positions,
    pulse_spectrum,
    transducer_response,
    transmit_delays,
    transmit_time,
)

logger = logging.getLogger(__name__)

DEFAULT_SOUND_SPEED = 1540.0
BAND_FLOOR = 0.01


@dataclass
class ScattererScene:
    """Point scatterers: ``positions`` is ``(S, 2)`` ``(x, z)``, ``reflectivity`` ``(S,)``."""

    positions: np.ndarray
    reflectivity: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        refl = np.asarray(self.reflectivity, dtype=complex)
        if refl.ndim == 0:
            refl = np.full(len(self.positions), refl)
        self.reflectivity = refl.reshape(-1)
        if len(self.reflectivity) != len(self.positions):
            raise ValueError("one reflectivity per scatterer required")
        if not np.all(np.isfinite(self.reflectivity)):
            raise ValueError("reflectivities must be finite")
        if np.any(self.positions[:, 1] <= 0):
            raise ValueError("scatterers must lie in front of the array (z > 0)")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=complex))

    def scaled(self, factor) -> "ScattererScene":
        return ScattererScene(self.positions.copy(), self.reflectivity * factor)

    def merged(self, other: "ScattererScene") -> "ScattererScene":
        return ScattererScene(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.reflectivity, other.reflectivity]),
        )


@dataclass
class ChannelData:
    """Real RF channel samples ``[frame, transmit, element, time]``.

    ``band_bins`` are the rfft bin indices of the working band. The spectral
    view uses the ``exp(+i omega t)`` kernel with absolute time
    ``t = t0 + n / sampling_rate`` and is scaled so that simulated data give
    back the model spectra exactly.
    """

    samples: np.ndarray
    sampling_rate: float
    t0: float
    band_bins: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4:
            raise ValueError("samples must be [frame, transmit, element, time]")
        self.band_bins = np.asarray(self.band_bins, dtype=np.int64)

    @property
    def n_frames(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[-1]

    @property
    def time(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sampling_rate

    @property
    def omegas(self) -> np.ndarray:
        return 2 * np.pi * self.band_bins * self.sampling_rate / self.n_samples

    def spectrum(self, bins=None) -> np.ndarray:
        """Spectral view ``[frame, transmit, element, bin]`` on ``bins`` (default band)."""
        bins = self.band_bins if bins is None else np.asarray(bins)
        spec = sfft.rfft(self.samples, axis=-1)[..., bins]
        omega = 2 * np.pi * bins * self.sampling_rate / self.n_samples
        return np.conj(spec) * np.exp(1j * omega * self.t0) / self.sampling_rate

    def with_samples(self, samples) -> "ChannelData":
        return ChannelData(samples, self.sampling_rate, self.t0, self.band_bins.copy(), dict(self.metadata))

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.bin`` (little-endian float64) and ``<stem>.json``."""
        stem = Path(stem)
        raw = self.samples.astype("<f8").tobytes()
        bin_path = stem.with_suffix(".bin")
        json_path = stem.with_suffix(".json")
        bin_path.write_bytes(raw)
        sidecar = {
            "shape": list(self.samples.shape),
            "dtype": "<f8",
            "axes": ["frame", "transmit", "element", "time"],
            "sampling_rate": self.sampling_rate,
            "t0": self.t0,
            "band_bins": self.band_bins.tolist(),
            "sha256": hashlib.sha256(raw).hexdigest(),
            "metadata": self.metadata,
        }
        json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return bin_path, json_path

    @classmethod
    def load(cls, stem) -> "ChannelData":
        stem = Path(stem)
        sidecar = json.loads(stem.with_suffix(".json").read_text())
        raw = stem.with_suffix(".bin").read_bytes()
        if hashlib.sha256(raw).hexdigest() != sidecar["sha256"]:
            raise ValueError(f"checksum mismatch for {stem}.bin")
        samples = np.frombuffer(raw, dtype=sidecar["dtype"]).reshape(sidecar["shape"]).astype(np.float64)
        return cls(samples, sidecar["sampling_rate"], sidecar["t0"], np.asarray(sidecar["band_bins"]),
                   sidecar.get("metadata", {}))


def greens(r_a, r_b, k) -> np.ndarray:
    """Free-space Helmholtz Green's function ``exp(i k r) / (4 pi r)``."""
    r_a = np.asarray(r_a, dtype=float)
    r_b = np.asarray(r_b, dtype=float)
    r = np.linalg.norm(r_b - r_a, axis=-1)
    if np.any(r == 0):
        raise ValueError("Green's function is singular for coincident points")
    return np.exp(1j * np.asarray(k) * r) / (4 * np.pi * r)


def _one_way_factors(geom, pulse, positions, omega, c):
    """``sqrt(W) D F G`` for every (frequency, element, scatterer): shape (F, N, S)."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    xe = element_positions(geom)
    dist, sin_alpha = _geometry_terms(xe, positions)
    k = (omega / c)[:, None, None]
    root_w = np.sqrt(transducer_response(pulse, omega))[:, None, None]
    d = np.sinc(k * geom.element_width / 2 * sin_alpha / np.pi)
    f = elevation_integral(geom.element_height, geom.elevation_focus, dist[None], k)
    g = np.exp(1j * k * dist) / (4 * np.pi * dist)
    return root_w * d * f * g


def _steering(scheme, geom, omega, c):
    """``exp(i omega dtau_n)`` per (frequency, transmit, element)."""
    dtau = transmit_delays(scheme, geom, c)
    return np.exp(1j * np.asarray(omega)[:, None, None] * dtau[None])


def reflection_operator(geom: ProbeGeometry, pulse: PulseSpec, scene: ScattererScene, omega,
                        c: float = DEFAULT_SOUND_SPEED) -> np.ndarray:
    """Receive operator ``R[m, s] = sqrt(W) D F G``; ``(F, N, S)`` for array ``omega``."""
    out = _one_way_factors(geom, pulse, scene.positions, omega, c)
    return out[0] if np.ndim(omega) == 0 else out


def transmit_operator(geom: ProbeGeometry, pulse: PulseSpec, scheme: TransmitScheme,
                      scene: ScattererScene, omega, transmit: int,
                      c: float = DEFAULT_SOUND_SPEED) -> np.ndarray:
    """Transmit operator ``T[n, s] = D F sqrt(W) P0 exp(i omega dtau_n) G`` for one transmit."""
    omega_arr = np.atleast_1d(np.asarray(omega, dtype=float))
    base = _one_way_factors(geom, pulse, scene.positions, omega_arr, c)
    steer = _steering(scheme, geom, omega_arr, c)[:, transmit, :, None]
    p0 = pulse_spectrum(pulse, omega_arr)[:, None, None]
    out = base * p0 * steer
    return out[0] if np.ndim(omega) == 0 else out


def propagator(T, R, gamma) -> np.ndarray:
    """``H = R diag(Gamma) T^T``; leading batch axes of ``T`` and ``R`` broadcast."""
    gamma = np.asarray(gamma)
    return (R * gamma[..., None, :]) @ np.swapaxes(T, -1, -2)


def forward_signal(H, u) -> np.ndarray:
    """Hadamard form ``M = u o (H u)``; ``u`` has shape ``(..., N)``."""
    u = np.asarray(u)
    return u * np.einsum("...mn,...n->...m", H, u)


def model_spectra(geom, pulse, scheme, scene: ScattererScene, omega, u=None,
                  c: float = DEFAULT_SOUND_SPEED, chunk: int = 64) -> np.ndarray:
    """Model spectra ``[transmit, element, frequency]`` for one scene.

    Evaluates ``u o (R Gamma T^T u)`` without forming ``H``. ``u`` is
    ``(F, N)`` or ``None`` for no aberration.
    """
    omega = np.asarray(omega, dtype=float)
    n_tx = scheme.n_transmits
    out = np.zeros((n_tx, geom.n_elements, len(omega)), dtype=complex)
    if len(scene) == 0:
        return out
    p0 = pulse_spectrum(pulse, omega)
    steer_all = _steering(scheme, geom, omega, c)
    # chunk over frequency so dense tissue scenes stay within memory
    per_chunk = max(1, int(chunk * 2000 / max(len(scene), 1)))
    for lo in range(0, len(omega), per_chunk):
        sl = slice(lo, lo + per_chunk)
        r = _one_way_factors(geom, pulse, scene.positions, omega[sl], c)
        uc = np.ones((len(omega[sl]), geom.n_elements)) if u is None else u[sl]
        # transmit field at each scatterer: P0 sum_n A_n u_n R[n, s]
        drive = steer_all[sl] * uc[:, None, :]
        field_at_s = np.einsum("ftn,fns->fts", drive, r) * p0[sl, None, None]
        echo = np.einsum("fms,fts->ftm", r * scene.reflectivity[None, None, :], field_at_s)
        out[:, :, sl] = np.transpose(echo * uc[:, None, :], (1, 2, 0))
    return out


def record_length(geom, pulse, scheme, fov_depth: float, c: float = DEFAULT_SOUND_SPEED,
                  margin_periods: float = 12.0) -> int:
    """Number of samples covering the deepest round trip plus pulse tails."""
    xe = element_positions(geom)
    corner_x = np.array([xe[0, 0], xe[-1, 0]])
    t_tx = transmit_time(scheme, geom, c, corner_x[:, None], np.array([fov_depth]))
    t_rx = np.hypot(geom.aperture, fov_depth) / c
    t_max = t_tx.max() + t_rx + margin_periods * pulse.period + 2 * pulse.period
    return int(sfft.next_fast_len(int(np.ceil(t_max * pulse.sampling_rate)), real=True))


def band_bins_for(pulse: PulseSpec, n_samples: int, floor: float = BAND_FLOOR) -> np.ndarray:
    """rfft bins where the two-way response ``W`` is at least ``floor``."""
    freqs = np.arange(n_samples // 2 + 1) * pulse.sampling_rate / n_samples
    w = transducer_response(pulse, 2 * np.pi * freqs)
    bins = np.nonzero(w >= floor)[0]
    return bins[(bins > 0) & (bins < n_samples // 2)]


def spectra_to_samples(spectra, omegas, bins, n_samples, sampling_rate, t0=0.0) -> np.ndarray:
    """Inverse of :meth:`ChannelData.spectrum` for band-limited spectra (last axis = bins)."""
    full = np.zeros(spectra.shape[:-1] + (n_samples // 2 + 1,), dtype=complex)
    full[..., bins] = sampling_rate * np.conj(spectra * np.exp(-1j * omegas * t0))
    return sfft.irfft(full, n=n_samples, axis=-1)


def simulate_channels(scenes, aberration, geom: ProbeGeometry, pulse: PulseSpec,
                      scheme: TransmitScheme, c: float = DEFAULT_SOUND_SPEED,
                      n_samples: int | None = None, fov_depth: float | None = None,
                      static_scene: ScattererScene | None = None, t0: float = 0.0,
                      band_floor: float = BAND_FLOOR, metadata: dict | None = None) -> ChannelData:
    """Synthesize RF channel data for a list of per-frame scenes.

    The same phase-screen ``aberration`` (or ``None``) acts on transmit and
    receive. ``static_scene`` (e.g. tissue speckle) is added identically to
    every frame and is simulated once.
    """
    if c <= 0:
        raise ValueError("sound speed must be positive")
    if isinstance(scenes, ScattererScene):
        scenes = [scenes]
    if len(scenes) < 1:
        raise ValueError("at least one frame is required")
    if n_samples is None:
        depths = [s.positions[:, 1].max() for s in scenes if len(s)]
        if static_scene is not None and len(static_scene):
            depths.append(static_scene.positions[:, 1].max())
        depth = fov_depth if fov_depth is not None else (max(depths) if depths else 10 * pulse.wavelength(c))
        n_samples = record_length(geom, pulse, scheme, depth, c)
    bins = band_bins_for(pulse, n_samples, band_floor)
    omegas = 2 * np.pi * bins * pulse.sampling_rate / n_samples
    u = None if aberration is None else aberration.spectrum(omegas).T
    static = None
    if static_scene is not None and len(static_scene):
        static = model_spectra(geom, pulse, scheme, static_scene, omegas, u, c)
    spectra = np.empty((len(scenes), scheme.n_transmits, geom.n_elements, len(bins)), dtype=complex)
    for i, scene in enumerate(scenes):
        spectra[i] = model_spectra(geom, pulse, scheme, scene, omegas, u, c)
        if static is not None:
            spectra[i] += static
    samples = spectra_to_samples(spectra, omegas, bins, n_samples, pulse.sampling_rate, t0)
    meta = dict(metadata or {})
    meta.setdefault("sound_speed", c)
    return ChannelData(samples, pulse.sampling_rate, t0, bins, meta)


def add_noise(channel: ChannelData, target_snr_db: float, seed: int | None = None) -> ChannelData:
    """Add white Gaussian noise with ``sigma = peak / 10**(snr / 20)``."""
    if not np.isfinite(target_snr_db):
        raise ValueError("target SNR must be finite")
    peak = np.max(np.abs(channel.samples))
    sigma = peak / 10 ** (target_snr_db / 20)
    rng = np.random.default_rng(seed)
    noisy = channel.samples + sigma * rng.standard_normal(channel.samples.shape)
    out = channel.with_samples(noisy)
    out.metadata["noise_sigma"] = float(sigma)
    out.metadata["snr_db"] = float(target_snr_db)
    out.metadata["noise_seed"] = seed
    return out


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """``20 log10(peak(clean) / std(noisy - clean))``."""
    return float(20 * np.log10(np.max(np.abs(clean)) / np.std(noisy - clean)))
