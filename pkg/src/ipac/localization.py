"""Microbubble detection on beamformed frames and scene construction."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import least_squares

from .beamform import ImageGrid
from .wavemodel import ScattererScene

logger = logging.getLogger(__name__)


@dataclass
class Detection:
    x: float
    z: float
    amplitude: float
    psf_correlation: float = 1.0
    frame: int = 0


@dataclass
class FitStats:
    """Counts fits discarded for non-convergence."""

    attempted: int = 0
    failed: int = 0


def detect_peaks(image, relative_threshold_db: float = 20.0) -> list[tuple[int, int]]:
    """Local maxima (8-neighborhood) of ``|image|`` within ``threshold`` dB of the max."""
    mag = np.abs(np.asarray(image))
    if mag.size == 0:
        raise ValueError("empty image")
    peak = mag.max()
    if peak == 0:
        return []
    floor = peak * 10 ** (-relative_threshold_db / 20)
    local = maximum_filter(mag, size=3, mode="constant", cval=-np.inf) == mag
    iz, ix = np.nonzero(local & (mag >= floor))
    order = np.argsort(-mag[iz, ix], kind="stable")
    return [(int(iz[i]), int(ix[i])) for i in order]


def suppress_neighbors(peaks, shape_zx) -> list[tuple[int, int]]:
    """Greedy non-maximum suppression over peaks sorted by decreasing magnitude.

    A peak is dropped when an already kept peak lies within the half-sizes
    ``shape_zx = (dz, dx)`` pixels (rectangular footprint).
    """
    dz, dx = shape_zx
    kept: list[tuple[int, int]] = []
    for iz, ix in peaks:
        if all(abs(iz - kz) > dz or abs(ix - kx) > dx for kz, kx in kept):
            kept.append((iz, ix))
    return kept


def _gauss2d(params, zz, xx):
    amp, z0, x0, sz, sx, off = params
    return amp * np.exp(-0.5 * (((zz - z0) / sz) ** 2 + ((xx - x0) / sx) ** 2)) + off


def fit_gaussian(patch, max_nfev: int = 200):
    """Least-squares 2-D Gaussian fit to ``|patch|``.

    Returns ``(amplitude, dz, dx, sigma_z, sigma_x)`` with offsets in pixels
    from the patch center, or ``None`` when the fit fails.
    """
    mag = np.abs(np.asarray(patch, dtype=complex if np.iscomplexobj(patch) else float))
    nz, nx = mag.shape
    if nz < 3 or nx < 3:
        raise ValueError("patch must be at least 3x3")
    zz, xx = np.mgrid[0:nz, 0:nx].astype(float)
    cz, cx = (nz - 1) / 2, (nx - 1) / 2
    base = float(mag.min())
    p0 = [float(mag[int(cz), int(cx)]) - base, cz, cx, 1.5, 1.5, base]
    lo = [0, cz - nz / 2, cx - nx / 2, 0.2, 0.2, -np.inf]
    hi = [np.inf, cz + nz / 2, cx + nx / 2, 2 * nz, 2 * nx, np.inf]
    try:
        res = least_squares(lambda p: (_gauss2d(p, zz, xx) - mag).ravel(), p0, bounds=(lo, hi),
                            max_nfev=max_nfev, x_scale="jac")
    except (ValueError, np.linalg.LinAlgError):
        return None
    if not res.success or not np.all(np.isfinite(res.x)):
        return None
    amp, z0, x0, sz, sx, off = res.x
    if abs(z0 - cz) > cz or abs(x0 - cx) > cx:
        return None
    return amp + off, z0 - cz, x0 - cx, sz, sx


def psf_correlation(patch, model_patch) -> float:
    """Normalized (Pearson) correlation between envelope patches, in [-1, 1]."""
    a = np.abs(np.asarray(patch)).ravel()
    b = np.abs(np.asarray(model_patch)).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0:
        return 0.0
    return float(np.clip(np.sum(a * b) / den, -1.0, 1.0))


def extract_patch(image, iz: int, ix: int, half: int):
    """Square patch centered on ``(iz, ix)``, or ``None`` when it leaves the image."""
    nz, nx = image.shape
    if iz - half < 0 or ix - half < 0 or iz + half >= nz or ix + half >= nx:
        return None
    return image[iz - half:iz + half + 1, ix - half:ix + half + 1]


def gaussian_fit(patch, grid: ImageGrid | None = None, center=(0, 0), model_patch=None,
                 stats: FitStats | None = None, frame: int = 0) -> Detection | None:
    """Detection from a peak-centered patch; ``None`` when the fit fails.

    ``center`` is the ``(iz, ix)`` image index of the patch center; without a
    grid, positions are returned in pixel units.
    """
    if stats is not None:
        stats.attempted += 1
    fit = fit_gaussian(patch)
    if fit is None:
        if stats is not None:
            stats.failed += 1
        return None
    amp, dz, dx, _, _ = fit
    iz, ix = center[0] + dz, center[1] + dx
    if grid is not None:
        x, z = grid.index_to_position(iz, ix)
    else:
        x, z = ix, iz
    corr = 1.0 if model_patch is None else psf_correlation(patch, model_patch)
    return Detection(float(x), float(z), float(amp), corr, frame)


def localize(image, grid: ImageGrid, relative_threshold_db: float = 20.0, window: int = 7,
             psf=None, stats: FitStats | None = None, frame: int = 0,
             min_separation=(0, 0)) -> list[Detection]:
    """Detect and fit every candidate of one frame.

    ``psf`` is an optional callable ``psf(x, z) -> model patch`` of the same
    window size used for the correlation score. ``min_separation`` gives
    the ``(dz, dx)`` pixel half-sizes of the non-maximum suppression
    footprint; ``(0, 0)`` keeps every local maximum.
    """
    half = window // 2
    out = []
    peaks = detect_peaks(image, relative_threshold_db)
    if any(min_separation):
        peaks = suppress_neighbors(peaks, min_separation)
    for iz, ix in peaks:
        patch = extract_patch(image, iz, ix, half)
        if patch is None:
            continue
        x_pix, z_pix = grid.index_to_position(iz, ix)
        model = psf(float(x_pix), float(z_pix)) if psf is not None else None
        det = gaussian_fit(patch, grid, (iz, ix), model, stats, frame)
        if det is not None and det.amplitude > 0:
            out.append(det)
    return out


def scene_from_detections(detections, min_correlation: float = 0.5) -> ScattererScene:
    """Scatterers passing the PSF-correlation gate, amplitudes normalized to max 1."""
    kept = [d for d in detections if d.psf_correlation >= min_correlation and d.amplitude > 0]
    if not kept:
        return ScattererScene.empty()
    pos = np.array([[d.x, d.z] for d in kept])
    amp = np.array([d.amplitude for d in kept])
    return ScattererScene(pos, amp / amp.max())


def write_detections_csv(path, detections) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x", "z", "amplitude", "correlation"])
        for d in detections:
            w.writerow([d.frame, repr(d.x), repr(d.z), repr(d.amplitude), repr(d.psf_correlation)])


def read_detections_csv(path) -> list[Detection]:
    with open(path, newline="") as fh:
        return [Detection(float(r["x"]), float(r["z"]), float(r["amplitude"]), float(r["correlation"]),
                          int(r["frame"])) for r in csv.DictReader(fh)]
