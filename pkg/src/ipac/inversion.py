"""Inverse-problem aberration estimation.

The quadratic model ``M(u) = u o (H u)`` is linearized around ``u0``:

    s ~ M(u0) + grad(u0) (u - u0) = K [u; 1],
    K = [grad(u0) | M(u0) - grad(u0) u0],   grad(u) = diag(H u) + diag(u) H,

and ``u`` is recovered per frequency by Tikhonov-regularized least squares
with a second-difference penalty along the array. Transmit angles stack as
extra rows of ``K``. The outer loop re-beamforms with the current delays,
re-localizes the scatterers and re-linearizes around the last solution.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .aberration import AberrationFunction, extract_delays, remove_piston
from .arraymodel import ProbeGeometry, PulseSpec, TransmitScheme, pulse_spectrum, transducer_response
from .wavemodel import ChannelData, ScattererScene, _one_way_factors, _steering, forward_signal

logger = logging.getLogger(__name__)


class NoScattererError(RuntimeError):
    """No usable scatterer was found to build the forward model."""


class SingularSystemError(np.linalg.LinAlgError):
    """Regularized normal matrix is singular."""

    def __init__(self, smallest_eigenvalue: float):
        self.smallest_eigenvalue = smallest_eigenvalue
        super().__init__(f"normal matrix is singular (smallest eigenvalue {smallest_eigenvalue:.3e})")


class DivergenceWarning(RuntimeWarning):
    pass


def second_difference_matrix(n: int) -> np.ndarray:
    """``D2`` with one-sided first differences on the boundary rows."""
    if n < 2:
        raise ValueError("need at least 2 unknowns")
    d = np.zeros((n, n))
    d[0, :2] = [-1, 1]
    d[-1, -2:] = [-1, 1]
    for i in range(1, n - 1):
        d[i, i - 1:i + 2] = [1, -2, 1]
    return d


@dataclass
class RegularizationSpec:
    alpha: float = 0.01
    relative: bool = True
    """Scale ``alpha`` by the mean diagonal of ``K^H K`` of each system."""

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def matrix(self, n: int) -> np.ndarray:
        return second_difference_matrix(n)


@dataclass
class LinearOperatorK:
    """Augmented operator ``K`` (rows x (n + 1)) and its linearization point."""

    K: np.ndarray
    u0: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        return self.K[..., :-1]

    @property
    def offset(self) -> np.ndarray:
        return self.K[..., -1]

    def apply(self, u) -> np.ndarray:
        """``K [u; 1]``."""
        return np.einsum("...mn,...n->...m", self.gradient, u) + self.offset


@dataclass
class IpacResult:
    u_hat: np.ndarray
    """Last per-frequency solutions ``[frame, element, frequency]``."""
    delays: np.ndarray
    omegas: np.ndarray
    history: list[float]
    converged: bool
    iterations: int
    delay_history: list[np.ndarray] = field(default_factory=list)
    n_scatterers: list[list[int]] = field(default_factory=list)
    amplitude: np.ndarray | None = None
    """Per-element amplitude estimate normalized to a maximum of 1."""

    def aberration(self) -> AberrationFunction:
        if self.amplitude is not None:
            amp = np.asarray(self.amplitude, dtype=float)
        else:
            amp = np.abs(self.u_hat).mean(axis=(0, 2))
        amp = np.clip(amp / amp.max(), 1e-6, 1.0) if amp.max() > 0 else np.ones_like(amp)
        return AberrationFunction(amp, self.delays)

    def save(self, directory, stem: str = "ipac", config_hash: str | None = None,
             center_frequency: float | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}_delays.csv"
        json_path = directory / f"{stem}_history.json"
        self.aberration().to_csv(csv_path, center_frequency)
        payload = {
            "history": [float(h) for h in self.history],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n_scatterers": self.n_scatterers,
            "config_hash": config_hash,
        }
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return csv_path, json_path


def gradient(H, u) -> np.ndarray:
    """``diag(H u) + diag(u) H`` (batched over leading axes)."""
    H = np.asarray(H)
    u = np.asarray(u)
    g = u[..., :, None] * H
    hu = np.einsum("...mn,...n->...m", H, u)
    idx = np.arange(H.shape[-1])
    g[..., idx, idx] += hu
    return g


def assemble_k(H, u0) -> LinearOperatorK:
    """``K = [grad(u0) | M(u0) - grad(u0) u0]``."""
    H = np.asarray(H)
    u0 = np.broadcast_to(np.asarray(u0, dtype=complex), H.shape[:-1])
    g = gradient(H, u0)
    m0 = u0 * np.einsum("...mn,...n->...m", H, u0)
    last = m0 - np.einsum("...mn,...n->...m", g, u0)
    return LinearOperatorK(np.concatenate([g, last[..., None]], axis=-1), np.array(u0))


def stack_angles(k_per_angle, s_per_angle) -> tuple[np.ndarray, np.ndarray]:
    """Row-block concatenation of per-angle operators and data vectors."""
    ks = [k.K if isinstance(k, LinearOperatorK) else np.asarray(k) for k in k_per_angle]
    ss = [np.asarray(s) for s in s_per_angle]
    if len(ks) != len(ss) or not ks:
        raise ValueError("need one data vector per operator")
    ncol = ks[0].shape[-1]
    for k, s in zip(ks, ss):
        if k.shape[-1] != ncol or k.shape[-2] != s.shape[-1] or k.shape[:-2] != ks[0].shape[:-2]:
            raise ValueError("dimension mismatch between stacked blocks")
    return np.concatenate(ks, axis=-2), np.concatenate(ss, axis=-1)


def tikhonov_solve(K, s, reg: RegularizationSpec | float = 0.0, augmented: bool = False,
                   relative: bool | None = None) -> np.ndarray:
    """Minimize ``||s - K u||^2 + alpha ||D2 u||^2`` via the normal equations.

    With ``augmented=True`` the last column of ``K`` multiplies a fixed 1 and
    is moved to the data side. Leading axes of ``K``/``s`` are batched. When
    ``relative`` is set, ``alpha`` is scaled by ``trace(K^H K) / n`` per system.
    """
    if not isinstance(reg, RegularizationSpec):
        reg = RegularizationSpec(float(reg), relative=False)
    rel = reg.relative if relative is None else relative
    K = np.asarray(K)
    s = np.asarray(s)
    if augmented:
        s = s - K[..., -1]
        K = K[..., :-1]
    n = K.shape[-1]
    kh = np.conj(np.swapaxes(K, -1, -2))
    normal = kh @ K
    rhs = np.einsum("...nm,...m->...n", kh, s)
    if reg.alpha > 0:
        d2 = reg.matrix(n)
        alpha = reg.alpha
        if rel:
            alpha = alpha * np.real(np.trace(normal, axis1=-2, axis2=-1)) / n
            alpha = np.asarray(alpha)[..., None, None]
        normal = normal + alpha * (d2.T @ d2)
    ev = np.linalg.eigvalsh(normal)
    if np.any(ev[..., 0] <= np.finfo(float).eps * n * np.abs(ev[..., -1])):
        raise SingularSystemError(float(np.min(ev[..., 0])))
    return np.linalg.solve(normal, rhs[..., None])[..., 0]


def build_propagators(geom: ProbeGeometry, pulse: PulseSpec, scheme: TransmitScheme,
                      scene: ScattererScene, omegas, c: float) -> np.ndarray:
    """``H[f, a] = R diag(Gamma) T_a^T`` for every frequency and transmit."""
    omegas = np.asarray(omegas, dtype=float)
    r = _one_way_factors(geom, pulse, scene.positions, omegas, c)
    p0 = pulse_spectrum(pulse, omegas)
    steer = _steering(scheme, geom, omegas, c)
    rg = r * scene.reflectivity[None, None, :]
    base = rg @ np.swapaxes(r, -1, -2)
    # T_a = R * P0 * steer_a along the transmit-element axis
    return base[:, None, :, :] * (p0[:, None, None, None] * steer[:, :, None, :])


SceneEstimator = Callable[[ChannelData, np.ndarray, list], list]


def select_bins(channel: ChannelData, n_bins: int | None) -> np.ndarray:
    """Evenly spaced subset of the working band (all bins when ``n_bins`` is None)."""
    bins = channel.band_bins
    if n_bins is None or n_bins >= len(bins):
        return bins
    idx = np.unique(np.round(np.linspace(0, len(bins) - 1, n_bins)).astype(int))
    return bins[idx]


def spectral_weights(pulse: PulseSpec, omegas) -> np.ndarray:
    """Echo spectrum magnitude ``W |P0|`` normalized to a maximum of 1."""
    w = transducer_response(pulse, omegas) * np.abs(pulse_spectrum(pulse, omegas))
    return w / w.max()


def scatterer_contributions(geom: ProbeGeometry, pulse: PulseSpec, scheme: TransmitScheme,
                            positions, u, omegas, c: float) -> np.ndarray:
    """Unit-reflectivity model signal of each scatterer, ``[s, f, a, m]``.

    ``u`` has shape ``[f, n]``; the model of a scene is the
    reflectivity-weighted sum of these contributions.
    """
    r = _one_way_factors(geom, pulse, positions, omegas, c)  # [f, n, s]
    steer = _steering(scheme, geom, omegas, c)  # [f, a, n]
    p0 = pulse_spectrum(pulse, omegas)
    q = p0[:, None, None] * np.einsum("fan,fns,fn->fas", steer, r, u)
    return np.einsum("fm,fms,fas->sfam", u, r, q)


def merge_scenes(previous: ScattererScene, fresh: ScattererScene, radius: float) -> ScattererScene:
    """Carry refined scatterers over to a new detection set.

    Each fresh detection within ``radius`` of a previous scatterer is
    replaced by that scatterer (position and reflectivity); unmatched fresh
    detections are added as they are and unmatched previous scatterers
    are dropped. Each previous scatterer is used at most once.
    """
    if len(previous) == 0 or len(fresh) == 0:
        return fresh
    d = np.linalg.norm(fresh.positions[:, None, :] - previous.positions[None, :, :], axis=-1)
    pos = fresh.positions.copy()
    gam = np.real(fresh.reflectivity).astype(float)
    scale = np.max(np.real(previous.reflectivity))
    used = np.zeros(len(previous), dtype=bool)
    for i in np.argsort(d.min(axis=1), kind="stable"):
        j = int(np.argmin(np.where(used, np.inf, d[i])))
        if not used[j] and d[i, j] <= radius:
            used[j] = True
            pos[i] = previous.positions[j]
            gam[i] = np.real(previous.reflectivity[j])
        else:
            gam[i] = gam[i] * scale
    return ScattererScene(pos, gam)


def _solve_frame(H, s, u_start, reg, inner_iter):
    """Repeated linearize/solve on one frame; returns ``(u [f, n], rel_residual [f])``."""
    n_f, n_a, n_el = s.shape
    u = u_start
    s_st = s.reshape(n_f, n_a * n_el)
    for _ in range(inner_iter):
        kop = assemble_k(H, u[:, None, :])
        k_st = kop.K.reshape(n_f, n_a * n_el, n_el + 1)
        u = tikhonov_solve(k_st, s_st, reg, augmented=True)
    resid = forward_signal(H, u[:, None, :]) - s
    rel = np.linalg.norm(resid, axis=(1, 2)) / np.maximum(np.linalg.norm(s, axis=(1, 2)), 1e-300)
    return u, rel


def _frame_jacobians(scene: ScattererScene, tau, amp, s, geom, pulse, scheme, omegas, c, h):
    """Residual and Jacobians of one frame for the joint update.

    Columns: delays (in carrier periods), amplitudes, then per scatterer
    reflectivity, x and z (in wavelengths).
    """
    lam = pulse.wavelength(c)
    u = amp[None, :] * np.exp(1j * omegas[:, None] * tau[None, :])
    pos = scene.positions
    gam = np.real(scene.reflectivity).astype(float)
    n_s = len(pos)
    shifted = np.concatenate([pos, pos + [h, 0], pos - [h, 0], pos + [0, h], pos - [0, h]])
    contrib = scatterer_contributions(geom, pulse, scheme, shifted, u, omegas, c).reshape(5, n_s, -1)
    base = contrib[0]
    d_x = (contrib[1] - contrib[2]) / (2 * h) * lam
    d_z = (contrib[3] - contrib[4]) / (2 * h) * lam
    H = build_propagators(geom, pulse, scheme, ScattererScene(pos, gam), omegas, c)
    grad = gradient(H, u[:, None, :])  # [f, a, m, n]
    j_tau = (grad * (1j * omegas[:, None, None, None] / pulse.omega_c * 2 * np.pi
                     * u[:, None, None, :])).reshape(-1, len(amp))
    j_amp = (grad * np.exp(1j * omegas[:, None, None, None] * tau[None, None, None, :])).reshape(-1, len(amp))
    j_scene = np.concatenate([base, gam[:, None] * d_x, gam[:, None] * d_z]).T
    resid = np.asarray(s).ravel() - gam @ base
    return resid, np.concatenate([j_tau, j_amp], axis=1), j_scene


def _joint_residual(scenes, tau, amp, spectra, geom, pulse, scheme, omegas, c) -> float:
    u = amp[None, :] * np.exp(1j * omegas[:, None] * tau[None, :])
    r2 = 0.0
    for sc, s in zip(scenes, spectra):
        model = 0.0
        if len(sc):
            model = forward_signal(build_propagators(geom, pulse, scheme, sc, omegas, c), u[:, None, :])
        r2 += float(np.sum(np.abs(s - model) ** 2))
    return r2


def joint_refine(scenes, delays, amplitude, spectra, geom: ProbeGeometry, pulse: PulseSpec,
                 scheme: TransmitScheme, omegas, c: float, n_steps: int = 2, damping: float = 1e-3,
                 max_step: float | None = None, max_tries: int = 6):
    """Joint Levenberg-Marquardt update of delays, amplitudes and scatterer scenes.

    The aberration is parameterized as ``a_n exp(i omega tau_n)`` and shared
    by all frames; each frame keeps its own scatterer positions and
    reflectivities. Unlike alternating updates, the joint step resolves the
    nearly degenerate pairing between a linear delay tilt and a lateral
    shift of the whole scene. A step is accepted only when it lowers the
    residual; otherwise the damping grows and the step is recomputed.

    Parameters
    ----------
    scenes : list of ScattererScene
    delays, amplitude : arrays ``[n]``
    spectra : list of arrays ``[f, a, m]``
        Measured spectra of each frame at ``omegas``.
    damping
        Initial Levenberg-Marquardt factor on the normal-matrix diagonal.
    max_step
        Clip on position steps; default a quarter wavelength.

    Returns
    -------
    delays, amplitude, scenes, rel_residual
    """
    lam = pulse.wavelength(c)
    max_step = lam / 4 if max_step is None else max_step
    h = lam / 100
    period = 2 * np.pi / pulse.omega_c
    n = len(delays)
    tau = np.asarray(delays, dtype=float).copy()
    amp = np.asarray(amplitude, dtype=float).copy()
    scenes = [ScattererScene(sc.positions.copy(), np.real(sc.reflectivity).astype(float)) for sc in scenes]
    active = [i for i, sc in enumerate(scenes) if len(sc)]
    d2 = float(sum(np.sum(np.abs(sp) ** 2) for sp in spectra))
    r2 = _joint_residual(scenes, tau, amp, spectra, geom, pulse, scheme, omegas, c)
    lm = damping
    for _ in range(n_steps):
        sizes = [3 * len(scenes[i]) for i in active]
        n_col = 2 * n + sum(sizes)
        normal = np.zeros((n_col, n_col))
        rhs = np.zeros(n_col)
        off = 2 * n
        for i, size in zip(active, sizes):
            resid, j_u, j_s = _frame_jacobians(scenes[i], tau, amp, spectra[i], geom, pulse, scheme,
                                               omegas, c, h)
            a_u = np.concatenate([j_u.real, j_u.imag])
            a_s = np.concatenate([j_s.real, j_s.imag])
            b = np.concatenate([resid.real, resid.imag])
            sl = slice(off, off + size)
            normal[:2 * n, :2 * n] += a_u.T @ a_u
            normal[:2 * n, sl] = a_u.T @ a_s
            normal[sl, :2 * n] = normal[:2 * n, sl].T
            normal[sl, sl] = a_s.T @ a_s
            rhs[:2 * n] += a_u.T @ b
            rhs[sl] = a_s.T @ b
            off += size
        scale = np.trace(normal) / n_col
        # gauges: zero-mean delay step (piston) and zero-mean amplitude step (gain)
        normal[:n, :n] += scale / n
        normal[n:2 * n, n:2 * n] += scale / n
        diag = np.diag(normal).copy()
        accepted = False
        for _ in range(max_tries):
            trial = normal.copy()
            trial[np.diag_indices_from(trial)] += lm * diag
            sol = np.linalg.solve(trial, rhs)
            tau_t = remove_piston(tau + sol[:n] * period)
            amp_t = amp + sol[n:2 * n]
            scenes_t = list(scenes)
            off = 2 * n
            for i, size in zip(active, sizes):
                m = size // 3
                d = sol[off:off + size]
                off += size
                step = np.clip(np.stack([d[m:2 * m], d[2 * m:]], -1) * lam, -max_step, max_step)
                pos = scenes[i].positions + step
                pos[:, 1] = np.maximum(pos[:, 1], h)
                scenes_t[i] = ScattererScene(pos, np.real(scenes[i].reflectivity) + d[:m])
            r2_t = _joint_residual(scenes_t, tau_t, amp_t, spectra, geom, pulse, scheme, omegas, c)
            if np.all(amp_t > 0) and r2_t < r2:
                tau, amp, scenes, r2 = tau_t, amp_t, scenes_t, r2_t
                lm = max(lm / 3, 1e-9)
                accepted = True
                break
            lm *= 10
        if not accepted:
            break
    for i in active:
        keep = np.real(scenes[i].reflectivity) > 0
        scenes[i] = ScattererScene(scenes[i].positions[keep], np.real(scenes[i].reflectivity)[keep]) \
            if np.any(keep) else ScattererScene.empty()
    return tau, amp, scenes, (np.sqrt(r2 / d2) if d2 > 0 else np.nan)


def ipac_iterate(channel: ChannelData, scene_estimator: SceneEstimator, geom: ProbeGeometry,
                 pulse: PulseSpec, scheme: TransmitScheme, reg: RegularizationSpec | None = None,
                 max_iter: int = 6, eps: float = 1e-2, c: float | None = None,
                 frames=None, n_bins: int | None = None, min_weight: float = 0.1,
                 inner_iter: int = 3, fit_scale: bool = True, max_residual: float = 0.9,
                 joint_steps: int = 0, match_radius: float | None = None) -> IpacResult:
    """Iterative localize -> linearize -> solve -> correct loop.

    Each iteration estimates the scene from images beamformed with the
    current delays, solves the regularized linear system per frequency
    (``inner_iter`` re-linearizations with the scene held fixed), and
    extracts per-element delays from the unwrapped solution phases. The
    next linearization point is rebuilt from those delays and the mean
    solution amplitudes.

    Parameters
    ----------
    scene_estimator
        ``f(channel, delays, frames) -> list[ScattererScene]`` giving the
        scene of each requested frame for beamforming corrections ``delays``.
    frames
        Frame indices used for inversion (default: all).
    n_bins
        Number of band frequencies used per solve (default: every band bin
        whose echo spectrum weight is at least ``min_weight``).
    fit_scale
        Rescale each scene's reflectivities by the real least-squares gain
        between model and data before linearizing.
    max_residual
        Frequency bins whose relative model residual exceeds this value get
        zero weight in the delay fit.
    joint_steps
        Gauss-Newton steps of :func:`joint_refine` after each delay
        extraction (0 disables). Refined scatterers are carried to the next
        iteration through :func:`merge_scenes` with ``match_radius``
        (default half a wavelength).

    Notes
    -----
    ``history`` holds the weighted relative change of the delay-based
    aberration spectrum between consecutive iterations; convergence is
    declared when it drops below ``eps``.
    """
    reg = RegularizationSpec() if reg is None else reg
    c = channel.metadata.get("sound_speed", 1540.0) if c is None else c
    frames = list(range(channel.n_frames)) if frames is None else list(frames)
    bins = channel.band_bins
    omegas_all = 2 * np.pi * bins * channel.sampling_rate / channel.n_samples
    bins = bins[spectral_weights(pulse, omegas_all) >= min_weight]
    if n_bins is not None and n_bins < len(bins):
        bins = bins[np.unique(np.round(np.linspace(0, len(bins) - 1, n_bins)).astype(int))]
    omegas = 2 * np.pi * bins * channel.sampling_rate / channel.n_samples
    weights = spectral_weights(pulse, omegas)
    data = channel.spectrum(bins)[frames]  # [frame, transmit, element, freq]
    spectra = [np.transpose(d, (2, 0, 1)) for d in data]  # [f, a, m] per frame
    n_el = geom.n_elements
    match_radius = pulse.wavelength(c) / 2 if match_radius is None else match_radius

    delays = np.zeros(n_el)
    amplitude = np.ones(n_el)
    u_prev = np.ones((n_el, len(omegas)), dtype=complex)
    u_hat = np.ones((len(frames), n_el, len(omegas)), dtype=complex)
    refined: dict[int, ScattererScene] = {}
    history: list[float] = []
    delay_history: list[np.ndarray] = []
    n_scat: list[list[int]] = []
    best = None
    converged = False
    rises = 0
    it = 0
    for it in range(1, max_iter + 1):
        scenes = scene_estimator(channel, delays, frames)
        scenes = [merge_scenes(refined[i], sc, match_radius) if i in refined else sc
                  for i, sc in enumerate(scenes)]
        counts = [len(sc) for sc in scenes]
        n_scat.append(counts)
        if not any(counts):
            raise NoScattererError("no scatterer detected in any frame")
        conf = np.zeros((len(frames), len(omegas)))
        for i, scene in enumerate(scenes):
            if len(scene) == 0:
                continue
            H = build_propagators(geom, pulse, scheme, scene, omegas, c)  # [f, a, m, n]
            if fit_scale:
                m1 = forward_signal(H, u_prev.T[:, None, :])
                g = np.real(np.vdot(m1, spectra[i])) / np.real(np.vdot(m1, m1))
                if g > 0:
                    H = H * g
                    scenes[i] = scene.scaled(g)
            sol, rel = _solve_frame(H, spectra[i], u_prev.T, reg, inner_iter)
            u_hat[i] = sol.T
            conf[i] = np.clip(1 - rel / max_residual, 0, None)
        w = weights[None, :] * conf
        per_frame = [extract_delays(u_hat[i], omegas, w[i]) for i in range(len(frames)) if w[i].sum() > 0]
        if per_frame:
            delays = remove_piston(np.mean(per_frame, axis=0))
            amplitude = np.abs(u_hat).mean(axis=(0, 2))
            amplitude = amplitude / amplitude.max()
        if joint_steps > 0:
            delays, amplitude, scenes, _ = joint_refine(scenes, delays, amplitude, spectra, geom, pulse,
                                                        scheme, omegas, c, joint_steps)
            refined = dict(enumerate(scenes))
        u_new = amplitude[:, None] * np.exp(1j * omegas[None, :] * delays[:, None])
        change = float(np.sqrt(np.sum(weights * np.abs(u_new - u_prev) ** 2)
                               / np.sum(weights * np.abs(u_prev) ** 2)))
        u_prev = u_new
        history.append(change)
        delay_history.append(delays.copy())
        logger.info("iteration %d: relative update %.3e, scatterers %s", it, change, counts)
        if best is None or change < best[0]:
            best = (change, delays.copy(), amplitude.copy())
        rises = rises + 1 if len(history) > 1 and history[-1] > history[-2] else 0
        if change < eps:
            converged = True
            break
        if rises >= 3:
            warnings.warn("IPAC update norm increased for 3 consecutive iterations; "
                          "returning best iterate", DivergenceWarning, stacklevel=2)
            _, delays, amplitude = best
            break
    return IpacResult(u_hat, remove_piston(delays), omegas, history, converged, it, delay_history, n_scat,
                      amplitude)
