"""Phase-screen aberrations: generation, spectral form and delay extraction."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from skimage.restoration import unwrap_phase


@dataclass
class AberrationFunction:
    """Per-element amplitude ``a_n`` in (0, 1] and delay ``tau_n`` [s]."""

    amplitude: np.ndarray
    delay: np.ndarray

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=float).reshape(-1)
        self.delay = np.asarray(self.delay, dtype=float).reshape(-1)
        if self.amplitude.shape != self.delay.shape:
            raise ValueError("amplitude and delay must have one entry per element")

    @classmethod
    def identity(cls, n_elements: int) -> "AberrationFunction":
        return cls(np.ones(n_elements), np.zeros(n_elements))

    @classmethod
    def from_delays(cls, delay) -> "AberrationFunction":
        delay = np.asarray(delay, dtype=float)
        return cls(np.ones_like(delay), delay)

    @property
    def n_elements(self) -> int:
        return len(self.delay)

    def spectrum(self, omega) -> np.ndarray:
        """``u[n, j] = a_n exp(i omega_j tau_n)``; see :func:`to_spectrum`."""
        return to_spectrum(self, omega)

    def piston_removed(self) -> "AberrationFunction":
        return AberrationFunction(self.amplitude.copy(), remove_piston(self.delay))

    def to_csv(self, path=None, center_frequency: float | None = None) -> str:
        """Serialize as CSV (``element,amplitude,delay_ns``) with a comment header."""
        buf = io.StringIO()
        buf.write(f"# f_c_hz={center_frequency if center_frequency is not None else 'nan'}\n")
        buf.write("# piston=removed\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["element", "amplitude", "delay_ns"])
        for i, (a, d) in enumerate(zip(self.amplitude, remove_piston(self.delay))):
            writer.writerow([i, repr(float(a)), repr(float(d * 1e9))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "AberrationFunction":
        text = Path(source).read_text() if isinstance(source, (str, Path)) and Path(source).exists() else str(source)
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(rows)
        amp, delay = [], []
        for row in reader:
            amp.append(float(row["amplitude"]))
            delay.append(float(row["delay_ns"]) * 1e-9)
        return cls(np.array(amp), np.array(delay))


def remove_piston(delay) -> np.ndarray:
    delay = np.asarray(delay, dtype=float)
    return delay - delay.mean(axis=-1, keepdims=True)


def _smoothed_unit(rng, n, width):
    x = rng.uniform(size=n)
    if width > 1:
        x = uniform_filter1d(x, size=int(width), mode="reflect")
    return x


def random_phase_screen(n_elements: int, center_frequency: float, seed=None,
                        max_attenuation: float = 0.5, max_delay_wavelengths: float = 1.0,
                        smoothness_len: int = 16) -> AberrationFunction:
    """Random smooth phase screen from uniform draws.

    Per-element draws, uniform over the allowed range (attenuation in
    ``[0, max_attenuation]``, delay in ``[0, max_delay_wavelengths]``
    carrier periods), are smoothed with a moving average of
    ``smoothness_len`` elements. Smoothing keeps every value inside the
    range, so the delay span never exceeds ``max_delay_wavelengths``
    periods. Delays are piston-free.
    """
    if not 0 <= max_attenuation < 1:
        raise ValueError("max_attenuation must be in [0, 1)")
    rng = np.random.default_rng(seed)
    amp = 1 - max_attenuation * _smoothed_unit(rng, n_elements, smoothness_len)
    delay = max_delay_wavelengths / center_frequency * _smoothed_unit(rng, n_elements, smoothness_len)
    return AberrationFunction(amp, remove_piston(delay))


def to_spectrum(ab: AberrationFunction, omega) -> np.ndarray:
    """Aberration spectrum, shape ``(n_elements, len(omega))``."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    return ab.amplitude[:, None] * np.exp(1j * omega[None, :] * ab.delay[:, None])


def unwrap_phase_2d(spectrum) -> np.ndarray:
    """Unwrap the phase of an (element, frequency) matrix.

    Accepts complex values or wrapped phases. Uses reliability-sorted
    region growing (Herraez et al.); degenerate single-row or single-column
    inputs fall back to 1-D unwrapping.
    """
    arr = np.asarray(spectrum)
    if arr.size == 0:
        raise ValueError("empty input")
    phase = np.angle(arr) if np.iscomplexobj(arr) else np.angle(np.exp(1j * arr))
    if phase.ndim == 1:
        return np.unwrap(phase)
    if phase.shape[0] == 1 or phase.shape[1] == 1:
        axis = 1 if phase.shape[0] == 1 else 0
        return np.unwrap(phase, axis=axis)
    return unwrap_phase(phase)


def reference_columns(u) -> np.ndarray:
    """Remove each frequency column's common phase (phase of the element sum)."""
    u = np.asarray(u, dtype=complex)
    ref = u.sum(axis=-2, keepdims=True)
    mag = np.abs(ref)
    ref = np.where(mag > 0, ref / np.where(mag > 0, mag, 1), 1)
    return u * np.conj(ref)


def delays_from_spectrum(unwrapped, omega, weights=None) -> np.ndarray:
    """Per-element delays from unwrapped phases ``(..., n_elements, n_freq)``.

    Each frequency column is referenced to its mean over elements, then the
    delay of each element is the weighted least-squares slope through the
    origin of that relative phase against ``omega``; leading (frame) axes
    are averaged. The result is piston-free. With a single frequency bin the
    delay is the relative phase divided by ``omega`` and a warning is issued.
    """
    phi = np.asarray(unwrapped, dtype=float)
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.shape[-1] != len(omega):
        raise ValueError("phase matrix and frequency grid disagree")
    rel = phi - phi.mean(axis=-2, keepdims=True)
    if len(omega) < 2:
        warnings.warn("single frequency bin: delays from phase / omega", RuntimeWarning, stacklevel=2)
        tau = rel[..., 0] / omega[0]
    else:
        w = np.ones_like(omega) if weights is None else np.asarray(weights, dtype=float)
        tau = (rel * (w * omega)).sum(axis=-1) / np.sum(w * omega**2)
    tau = tau.reshape(-1, tau.shape[-1]).mean(axis=0)
    return remove_piston(tau)


def extract_delays(u_hat, omega, weights=None) -> np.ndarray:
    """Delays from complex per-frequency solutions ``(..., n_elements, n_freq)``.

    Column referencing, 2-D unwrapping of every frame, then
    :func:`delays_from_spectrum` with frame averaging.
    """
    u_hat = np.asarray(u_hat, dtype=complex)
    frames = u_hat.reshape((-1,) + u_hat.shape[-2:])
    phases = np.stack([unwrap_phase_2d(reference_columns(f)) for f in frames])
    return delays_from_spectrum(phases, omega, weights)
