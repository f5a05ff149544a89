"""Transducer model: geometry, element physics, pulse and transmit steering.

All points live in the imaging plane (y = 0) and are given as ``(x, z)``
pairs in meters, with the array along x at z = 0 and depth along +z.
The time convention is ``exp(-i omega t)``, so a delay ``tau`` multiplies a
spectrum by ``exp(+i omega tau)`` and outgoing waves carry ``exp(+i k r)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import fresnel, roots_legendre


class InvalidPulseError(ValueError):
    """Raised when a pulse definition cannot produce a transducer response."""


@dataclass(frozen=True)
class ProbeGeometry:
    """1-D array description.

    Parameters
    ----------
    n_elements : int
        Number of elements.
    pitch : float
        Center-to-center element spacing [m].
    element_width : float
        Element width ``b`` along the array [m].
    element_height : float
        Element height ``h`` in elevation [m].
    elevation_focus : float
        Elevation lens focal distance ``r_f`` [m].
    kind : str
        ``"linear"`` or ``"phased"``.
    """

    n_elements: int
    pitch: float
    element_width: float
    element_height: float
    elevation_focus: float
    kind: str = "linear"

    def __post_init__(self):
        if self.n_elements < 2:
            raise ValueError("n_elements must be >= 2")
        if not (self.pitch > self.element_width > 0):
            raise ValueError("need pitch > element_width > 0")
        if self.element_height < 0 or self.elevation_focus <= 0:
            raise ValueError("element_height must be >= 0 and elevation_focus > 0")
        if self.kind not in ("linear", "phased"):
            raise ValueError(f"unknown probe kind {self.kind!r}")

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.pitch


@dataclass(frozen=True)
class PulseSpec:
    """Transmit pulse and transducer passband.

    ``center_frequency`` is in Hz; ``omega_c`` gives the angular value.
    """

    center_frequency: float
    fractional_bandwidth: float
    n_cycles: float
    sampling_rate: float

    def __post_init__(self):
        if not 0 < self.fractional_bandwidth < 2:
            raise InvalidPulseError("fractional_bandwidth must lie in (0, 2)")
        f_max = self.center_frequency * (1 + self.fractional_bandwidth / 2)
        if self.sampling_rate <= 2 * f_max:
            raise InvalidPulseError(
                f"sampling_rate {self.sampling_rate:g} Hz does not exceed twice the "
                f"upper band edge {f_max:g} Hz"
            )
        if self.n_cycles <= 0:
            raise InvalidPulseError("n_cycles must be positive")

    @property
    def omega_c(self) -> float:
        return 2 * np.pi * self.center_frequency

    @property
    def omega_b(self) -> float:
        return self.fractional_bandwidth * self.omega_c

    @property
    def period(self) -> float:
        return 1.0 / self.center_frequency

    def wavelength(self, c: float) -> float:
        return c / self.center_frequency


@dataclass(frozen=True)
class TransmitScheme:
    """Sequence of transmits: steered plane waves or diverging waves.

    For ``kind="plane_wave"`` the steering ``angles`` (radians) must be
    strictly increasing. For ``kind="diverging"`` each entry of
    ``virtual_sources`` is an ``(x, z)`` point behind the array (z < 0) and
    is one transmit event.
    """

    kind: str = "plane_wave"
    angles: tuple[float, ...] = (0.0,)
    virtual_sources: tuple[tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind == "plane_wave":
            a = np.asarray(self.angles, dtype=float)
            if a.size == 0:
                raise ValueError("plane-wave scheme needs at least one angle")
            if np.any(np.diff(a) <= 0):
                raise ValueError("plane-wave angles must be strictly increasing")
            if np.any(np.abs(a) >= np.pi / 2):
                raise ValueError("plane-wave angles must satisfy |theta| < pi/2")
        elif self.kind == "diverging":
            if len(self.virtual_sources) == 0:
                raise ValueError("diverging scheme needs at least one virtual source")
            for xs, zs in self.virtual_sources:
                if zs >= 0:
                    raise ValueError("virtual sources must lie behind the array (z < 0)")
        else:
            raise ValueError(f"unknown transmit kind {self.kind!r}")

    @property
    def n_transmits(self) -> int:
        if self.kind == "plane_wave":
            return len(self.angles)
        return len(self.virtual_sources)

    @property
    def angle_array(self) -> np.ndarray:
        """Steering angle of each transmit (diverging: direction of the source)."""
        if self.kind == "plane_wave":
            return np.asarray(self.angles, dtype=float)
        vs = np.asarray(self.virtual_sources, dtype=float)
        return np.arctan2(-vs[:, 0], -vs[:, 1])


def element_positions(geom: ProbeGeometry) -> np.ndarray:
    """Element centers as an ``(n_elements, 2)`` array of ``(x, z)``, centered on 0."""
    x = (np.arange(geom.n_elements) - (geom.n_elements - 1) / 2) * geom.pitch
    return np.stack([x, np.zeros_like(x)], axis=-1)


def _response_exponent(pulse: PulseSpec) -> float:
    ratio = 2 * pulse.omega_c / pulse.omega_b
    if ratio <= 1:
        raise InvalidPulseError("fractional bandwidth must be < 2")
    return np.log(126.0) / np.log(ratio)


def transducer_response(pulse: PulseSpec, omega) -> np.ndarray:
    """Two-way element response ``W(omega)``: a generalized Gaussian window.

    ``W(omega_c) = 1`` and ``W(omega_c +- omega_b / 2) = 1/2``.
    """
    p = _response_exponent(pulse)
    x = 2 * np.abs(np.asarray(omega, dtype=float) - pulse.omega_c) / pulse.omega_b
    return np.exp(-np.log(2.0) * x**p)


def _geometry_terms(r_n, r_s):
    r_n = np.asarray(r_n, dtype=float)
    r_s = np.asarray(r_s, dtype=float)
    if r_n.ndim == 2 and r_s.ndim == 2:
        d = r_s[None, :, :] - r_n[:, None, :]
    else:
        d = r_s - r_n
    dist = np.hypot(d[..., 0], d[..., 1])
    if np.any(dist == 0):
        raise ValueError("scatterer coincides with an element")
    sin_alpha = d[..., 0] / dist
    return dist, sin_alpha


def directivity(geom: ProbeGeometry, r_n, r_s, k) -> np.ndarray:
    """Baffled-piston directivity ``sinc(k b / 2 sin(alpha))``.

    ``r_n`` and ``r_s`` are ``(N, 2)`` and ``(S, 2)`` point arrays (result
    shape ``(..., N, S)``) or single points. ``k`` broadcasts against the
    trailing ``(N, S)`` shape.
    """
    _, sin_alpha = _geometry_terms(r_n, r_s)
    arg = np.asarray(k) * geom.element_width / 2 * sin_alpha
    # numpy's sinc is sin(pi x) / (pi x)
    return np.sinc(arg / np.pi)


def _fresnel_strip(a, half_height):
    """Exact ``int_{-H}^{H} exp(i a y^2) dy`` for real ``a`` (any sign)."""
    a = np.asarray(a, dtype=float)
    out = np.full(a.shape, 2 * half_height, dtype=complex)
    nz = np.abs(a) > 0
    aa = np.abs(a[nz])
    scale = np.sqrt(np.pi / (2 * aa))
    s, c = fresnel(half_height * np.sqrt(2 * aa / np.pi))
    val = 2 * scale * (c + 1j * s)
    out[nz] = np.where(a[nz] > 0, val, np.conj(val))
    return out


def elevation_integral(height, focus, dist, k, method="fresnel", order=64):
    """Elevation focusing factor for in-plane points at range ``dist``.

    Integrates the lens phase ``exp(-i k y'^2 / 2 r_f)`` against the Fresnel
    propagation phase ``exp(+i k y'^2 / 2 |r|)`` over the element height, so
    the magnitude peaks where ``|r| = r_f``. ``method="quadrature"`` uses
    Gauss-Legendre of the given order; ``"fresnel"`` the closed form.
    """
    k = np.asarray(k, dtype=float)
    dist = np.asarray(dist, dtype=float)
    a = k / 2 * (1 / dist - 1 / focus)
    if height == 0:
        return np.zeros(np.broadcast(a).shape, dtype=complex)
    if method == "fresnel":
        return _fresnel_strip(a, height / 2)
    if method == "quadrature":
        nodes, weights = roots_legendre(order)
        y = nodes * height / 2
        w = weights * height / 2
        return np.sum(w * np.exp(1j * a[..., None] * y**2), axis=-1)
    raise ValueError(f"unknown method {method!r}")


def elevation_focusing(geom: ProbeGeometry, r_n, r_s, k, method="fresnel") -> np.ndarray:
    """Elevation factor ``F`` between element(s) ``r_n`` and point(s) ``r_s``."""
    dist, _ = _geometry_terms(r_n, r_s)
    return elevation_integral(geom.element_height, geom.elevation_focus, dist, k, method=method)


def pulse_waveform(pulse: PulseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sampled ``n_cycles`` sine burst at the carrier, centered on t = 0."""
    n = int(round(pulse.n_cycles * pulse.sampling_rate / pulse.center_frequency))
    t = (np.arange(n) - (n - 1) / 2) / pulse.sampling_rate
    duration = pulse.n_cycles / pulse.center_frequency
    return t, np.sin(pulse.omega_c * (t + duration / 2))


def pulse_spectrum(pulse: PulseSpec, omega) -> np.ndarray:
    """Discrete-time Fourier transform ``P0(omega)`` of the sampled burst.

    Uses the ``exp(+i omega t)`` kernel of the package time convention and is
    scaled by ``1 / sampling_rate`` so that it approximates the continuous
    transform.
    """
    t, p = pulse_waveform(pulse)
    omega = np.asarray(omega, dtype=float)
    phase = np.exp(1j * omega[..., None] * t)
    return phase @ p / pulse.sampling_rate


def transmit_delays(scheme: TransmitScheme, geom: ProbeGeometry, c: float) -> np.ndarray:
    """Per-transmit firing delays, shape ``(n_transmits, n_elements)``, min 0 per row."""
    x = element_positions(geom)
    if scheme.kind == "plane_wave":
        theta = np.asarray(scheme.angles, dtype=float)
        d = np.outer(np.sin(theta), x[:, 0]) / c
    else:
        vs = np.asarray(scheme.virtual_sources, dtype=float)
        d = np.hypot(x[None, :, 0] - vs[:, None, 0], x[None, :, 1] - vs[:, None, 1]) / c
    return d - d.min(axis=1, keepdims=True)


def transmit_time(scheme: TransmitScheme, geom: ProbeGeometry, c: float, x, z) -> np.ndarray:
    """Arrival time of each transmitted wavefront at points ``(x, z)``.

    Returns shape ``(n_transmits,) + broadcast(x, z).shape``; consistent with
    :func:`transmit_delays`, i.e. the first element fires at t = 0.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    xe = element_positions(geom)
    out = []
    if scheme.kind == "plane_wave":
        for theta in scheme.angles:
            offset = np.min(xe[:, 0] * np.sin(theta))
            out.append((x * np.sin(theta) + z * np.cos(theta) - offset) / c)
    else:
        for xv, zv in scheme.virtual_sources:
            offset = np.min(np.hypot(xe[:, 0] - xv, xe[:, 1] - zv))
            out.append((np.hypot(x - xv, z - zv) - offset) / c)
    return np.stack(out)


def transmit_footprint(scheme: TransmitScheme, x, z) -> np.ndarray:
    """Lateral position where the transmit ray reaching ``(x, z)`` leaves the array.

    Plane waves travel along straight rays at their steering angle;
    diverging waves along the line from the virtual source. Shape
    ``(n_transmits,) + broadcast(x, z).shape``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    out = []
    if scheme.kind == "plane_wave":
        for theta in scheme.angles:
            out.append(x - z * np.tan(theta))
    else:
        for xv, zv in scheme.virtual_sources:
            out.append(xv + (x - xv) * (-zv) / (z - zv))
    return np.stack(out)
