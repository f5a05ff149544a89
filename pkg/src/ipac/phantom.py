"""Synthetic scenes: moving microbubbles, vessel phantoms and tissue speckle.

These stand in for a vascular flow model: bubbles move along straight
tracks (optionally confined to vessel segments) at a fixed speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .wavemodel import ScattererScene


@dataclass(frozen=True)
class FieldOfView:
    x_min: float
    x_max: float
    z_min: float
    z_max: float

    def contains(self, pos) -> np.ndarray:
        pos = np.asarray(pos)
        return ((pos[..., 0] >= self.x_min) & (pos[..., 0] <= self.x_max)
                & (pos[..., 1] >= self.z_min) & (pos[..., 1] <= self.z_max))


def _reflect(v, lo, hi):
    span = hi - lo
    w = np.mod(v - lo, 2 * span)
    return lo + np.where(w > span, 2 * span - w, w)


def bubble_tracks(rng, n_bubbles: int, n_frames: int, fov: FieldOfView, speed: float,
                  frame_interval: float, amplitude_range=(0.5, 1.0)) -> list[ScattererScene]:
    """Bubbles on straight tracks in random directions, reflected at the FOV edges."""
    rng = np.random.default_rng(rng)
    x0 = rng.uniform(fov.x_min, fov.x_max, n_bubbles)
    z0 = rng.uniform(fov.z_min, fov.z_max, n_bubbles)
    ang = rng.uniform(0, 2 * np.pi, n_bubbles)
    amp = rng.uniform(*amplitude_range, n_bubbles)
    scenes = []
    for f in range(n_frames):
        d = speed * frame_interval * f
        x = _reflect(x0 + d * np.cos(ang), fov.x_min, fov.x_max)
        z = _reflect(z0 + d * np.sin(ang), fov.z_min, fov.z_max)
        scenes.append(ScattererScene(np.stack([x, z], -1), amp))
    return scenes


@dataclass(frozen=True)
class Vessel:
    """Straight vessel segment from ``start`` to ``end`` (meters) with a radius."""

    start: tuple[float, float]
    end: tuple[float, float]
    radius: float


def vessel_flow(rng, vessels, n_per_vessel: int, n_frames: int, speed: float,
                frame_interval: float, amplitude_range=(0.5, 1.0)) -> list[ScattererScene]:
    """Bubbles flowing along vessel segments; positions wrap along each segment."""
    rng = np.random.default_rng(rng)
    per = []
    for v in vessels:
        a = np.asarray(v.start, float)
        b = np.asarray(v.end, float)
        length = np.linalg.norm(b - a)
        axis = (b - a) / length
        normal = np.array([-axis[1], axis[0]])
        s0 = rng.uniform(0, length, n_per_vessel)
        off = rng.uniform(-v.radius, v.radius, n_per_vessel)
        amp = rng.uniform(*amplitude_range, n_per_vessel)
        per.append((a, axis, normal, length, s0, off, amp))
    scenes = []
    for f in range(n_frames):
        pos, amps = [], []
        for a, axis, normal, length, s0, off, amp in per:
            s = np.mod(s0 + speed * frame_interval * f, length)
            pos.append(a + s[:, None] * axis + off[:, None] * normal)
            amps.append(amp)
        scenes.append(ScattererScene(np.concatenate(pos), np.concatenate(amps)))
    return scenes


def tissue_speckle(rng, fov: FieldOfView, density: float, reflectivity_scale: float) -> ScattererScene:
    """Static random scatterers (``density`` per m^2) with real Gaussian amplitudes."""
    rng = np.random.default_rng(rng)
    area = (fov.x_max - fov.x_min) * (fov.z_max - fov.z_min)
    n = int(rng.poisson(density * area))
    x = rng.uniform(fov.x_min, fov.x_max, n)
    z = rng.uniform(fov.z_min, fov.z_max, n)
    return ScattererScene(np.stack([x, z], -1), reflectivity_scale * rng.standard_normal(n))
