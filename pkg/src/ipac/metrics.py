"""Image-quality and solution-similarity metrics.

ROIs are rectangular index ranges ``(z_start, z_stop, x_start, x_stop)``
with Python slice semantics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no finite value for these inputs."""


def _roi_values(image, roi) -> np.ndarray:
    z0, z1, x0, x1 = (int(v) for v in roi)
    vals = np.asarray(image)[z0:z1, x0:x1]
    if vals.size == 0:
        raise ValueError(f"empty ROI {roi}")
    return vals.astype(float).ravel()


def _check_disjoint(a, b) -> None:
    if a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]:
        raise ValueError("vessel and noise ROIs overlap")


def _roi_stats(image, vessel_roi, noise_roi):
    _check_disjoint(vessel_roi, noise_roi)
    v = _roi_values(image, vessel_roi)
    n = _roi_values(image, noise_roi)
    sigma = float(np.std(n))
    if sigma == 0:
        raise UndefinedMetricError("noise ROI has zero standard deviation")
    return float(np.mean(v)), float(np.mean(n)), sigma


def cnr(image, vessel_roi, noise_roi) -> float:
    """``10 log10(|mu_v - mu_n| / sigma_n)`` in dB; ``-inf`` when the means coincide."""
    mu_v, mu_n, sigma = _roi_stats(image, vessel_roi, noise_roi)
    diff = abs(mu_v - mu_n)
    return float("-inf") if diff == 0 else float(10 * np.log10(diff / sigma))


def snr_image(image, vessel_roi, noise_roi) -> float:
    """``10 log10(mu_v / sigma_n)`` in dB; ``-inf`` when ``mu_v <= 0``."""
    mu_v, _, sigma = _roi_stats(image, vessel_roi, noise_roi)
    return float("-inf") if mu_v <= 0 else float(10 * np.log10(mu_v / sigma))


def cosine_similarity(u1, u2) -> float:
    """Modified cosine similarity ``u1 . u2 / max(|u1|^2, |u2|^2)``."""
    u1 = np.asarray(u1, dtype=float).ravel()
    u2 = np.asarray(u2, dtype=float).ravel()
    if u1.shape != u2.shape:
        raise ValueError("vectors must have equal lengths")
    scale = max(np.max(np.abs(u1), initial=0.0), np.max(np.abs(u2), initial=0.0))
    if scale == 0:
        raise UndefinedMetricError("both vectors are zero")
    # the ratio is scale-invariant; normalizing avoids under/overflow in the squares
    u1, u2 = u1 / scale, u2 / scale
    den = max(float(u1 @ u1), float(u2 @ u2))
    return float(u1 @ u2) / den


@dataclass
class FrcResult:
    """FRC curve over rings and the half-bit resolution readout.

    ``frequencies`` are ring radii in cycles per meter. When the curve
    never drops below the threshold, ``crossed`` is False and
    ``resolution`` holds the sentinel ``2 * render_pitch`` (an upper bound).
    """

    frequencies: np.ndarray
    curve: np.ndarray
    threshold: np.ndarray
    ring_counts: np.ndarray
    resolution: float
    crossed: bool
    render_pitch: float


def half_bit_threshold(n) -> np.ndarray:
    """Half-bit information threshold for rings of ``n`` samples."""
    s = 1 / np.sqrt(np.asarray(n, dtype=float))
    return (0.2071 + 1.9102 * s) / (1.2071 + 0.9102 * s)


def render_points(points, grid, upsample: int = 10) -> np.ndarray:
    """Count image of ``(x, z)`` points on a ``upsample``-times finer grid.

    ``grid`` is any object with ``x_min, x_max, z_min, z_max, pitch``.
    Points outside the grid are dropped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    pitch = grid.pitch / upsample
    nx = int(round((grid.x_max - grid.x_min) / pitch)) + 1
    nz = int(round((grid.z_max - grid.z_min) / pitch)) + 1
    ix = np.round((pts[:, 0] - grid.x_min) / pitch).astype(int)
    iz = np.round((pts[:, 1] - grid.z_min) / pitch).astype(int)
    ok = (ix >= 0) & (ix < nx) & (iz >= 0) & (iz < nz)
    img = np.zeros((nz, nx))
    np.add.at(img, (iz[ok], ix[ok]), 1.0)
    return img


def frc_curve(img1, img2, pitch: float):
    """Ring-wise FRC of two equally sized images; returns ``(freqs, frc, counts)``."""
    img1 = np.asarray(img1, dtype=float)
    img2 = np.asarray(img2, dtype=float)
    if img1.shape != img2.shape:
        raise ValueError("images must have the same shape")
    n = max(img1.shape)
    f1 = np.fft.fft2(img1, s=(n, n))
    f2 = np.fft.fft2(img2, s=(n, n))
    k = np.fft.fftfreq(n) * n
    ring = np.rint(np.hypot(k[:, None], k[None, :])).astype(int).ravel()
    n_rings = n // 2 + 1
    keep = ring < n_rings
    ring = ring[keep]
    cross = np.bincount(ring, np.real(f1 * np.conj(f2)).ravel()[keep], n_rings)
    p1 = np.bincount(ring, (np.abs(f1) ** 2).ravel()[keep], n_rings)
    p2 = np.bincount(ring, (np.abs(f2) ** 2).ravel()[keep], n_rings)
    counts = np.bincount(ring, minlength=n_rings)
    den = np.sqrt(p1 * p2)
    frc = np.divide(cross, den, out=np.zeros(n_rings), where=den > 0)
    freqs = np.arange(n_rings) / (n * pitch)
    return freqs, np.clip(frc, -1.0, 1.0), counts


def frc_resolution(points_a, points_b, grid, upsample: int = 10) -> FrcResult:
    """Fourier ring correlation of two rendered point sets with half-bit readout."""
    if len(np.atleast_2d(points_a)) == 0 or len(np.atleast_2d(points_b)) == 0 \
            or np.size(points_a) == 0 or np.size(points_b) == 0:
        raise ValueError("both point sets must be non-empty")
    pitch = grid.pitch / upsample
    img_a = render_points(points_a, grid, upsample)
    img_b = render_points(points_b, grid, upsample)
    freqs, frc, counts = frc_curve(img_a, img_b, pitch)
    thr = half_bit_threshold(np.maximum(counts, 1))
    below = np.nonzero(frc[1:] < thr[1:])[0]
    if below.size == 0:
        return FrcResult(freqs, frc, thr, counts, 2 * pitch, False, pitch)
    r = int(below[0]) + 1
    # linear interpolation of the crossing between rings r-1 and r
    d0 = frc[r - 1] - thr[r - 1]
    d1 = frc[r] - thr[r]
    w = d0 / (d0 - d1) if d0 != d1 else 0.0
    f_cross = freqs[r - 1] + w * (freqs[r] - freqs[r - 1])
    res = 1 / f_cross if f_cross > 0 else float("inf")
    return FrcResult(freqs, frc, thr, counts, float(res), True, pitch)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else repr(v)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_metrics_json(path, metrics: dict) -> Path:
    """Write metrics as sorted JSON; non-finite floats become ``"inf"``/``"-inf"``/``"nan"``."""
    path = Path(path)
    path.write_text(json.dumps(_jsonable(metrics), indent=2, sort_keys=True))
    return path


def append_ledger(path, row: dict) -> Path:
    """Append one row to a CSV experiment ledger, writing the header on creation."""
    path = Path(path)
    row = _jsonable(row)
    fields = sorted(row)
    if path.exists() and path.stat().st_size > 0:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh))
        if header != fields:
            raise ValueError(f"ledger columns {header} do not match row keys {fields}")
        mode = "a"
    else:
        mode = "w"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        if mode == "w":
            w.writeheader()
        w.writerow(row)
    return path
