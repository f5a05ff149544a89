"""Glue between beamforming, localization and the inversion loop."""

from __future__ import annotations

import logging

import numpy as np

from .arraymodel import ProbeGeometry, PulseSpec, TransmitScheme
from .beamform import DelayAndSum, ImageGrid, compound
from .localization import FitStats, localize, scene_from_detections
from .wavemodel import ChannelData, ScattererScene, simulate_channels

logger = logging.getLogger(__name__)


class PsfModel:
    """Model envelope patches of a single on-axis scatterer, cached by depth."""

    def __init__(self, geom: ProbeGeometry, pulse: PulseSpec, scheme: TransmitScheme, pitch: float,
                 window: int, c: float = 1540.0, depth_step: float | None = None):
        self.geom = geom
        self.pulse = pulse
        self.scheme = scheme
        self.pitch = pitch
        self.half = window // 2
        self.c = c
        self.depth_step = depth_step if depth_step is not None else 2 * pulse.wavelength(c)
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, x: float, z: float) -> np.ndarray:
        key = int(round(z / self.depth_step))
        if key not in self._cache:
            depth = max(key, 1) * self.depth_step
            chan = simulate_channels([ScattererScene([[0.0, depth]], [1.0])], None, self.geom,
                                     self.pulse, self.scheme, self.c)
            span = self.half * self.pitch
            grid = ImageGrid(-span, span + 1e-12, depth - span, depth + span + 1e-12, self.pitch)
            bf = DelayAndSum.for_channel(chan, self.geom, self.scheme, grid,
                                         self.pulse.center_frequency, c=self.c)
            img = compound(bf(chan.samples[0]))
            self._cache[key] = np.abs(img)
        return self._cache[key]


class ImageSceneEstimator:
    """Scene estimate from compounded DAS images: detect, fit, gate.

    Callable as ``estimator(channel, delays, frames) -> list[ScattererScene]``
    as expected by :func:`ipac.inversion.ipac_iterate`.
    """

    def __init__(self, geom: ProbeGeometry, pulse: PulseSpec, scheme: TransmitScheme, grid: ImageGrid,
                 c: float = 1540.0, threshold_db: float = 20.0, window: int = 7,
                 min_correlation: float = 0.5, use_psf: bool = True, f_number: float = 0.0,
                 min_separation=(0, 0), transmit_corrections: bool = False):
        self.geom = geom
        self.pulse = pulse
        self.scheme = scheme
        self.grid = grid
        self.c = c
        self.threshold_db = threshold_db
        self.window = window
        self.min_correlation = min_correlation
        self.f_number = f_number
        self.min_separation = tuple(min_separation)
        self.transmit_corrections = transmit_corrections
        self.psf = PsfModel(geom, pulse, scheme, grid.pitch, window, c) if use_psf else None
        self.stats = FitStats()
        self.detections = []

    def images(self, channel: ChannelData, delays, frames) -> np.ndarray:
        bf = DelayAndSum.for_channel(channel, self.geom, self.scheme, self.grid,
                                     self.pulse.center_frequency, c=self.c, corrections=delays,
                                     f_number=self.f_number,
                                     transmit_corrections=self.transmit_corrections)
        return compound(bf(channel.samples[list(frames)]))

    def __call__(self, channel: ChannelData, delays, frames) -> list[ScattererScene]:
        imgs = self.images(channel, delays, frames)
        scenes = []
        self.detections = []
        for f, img in zip(frames, imgs):
            dets = localize(img, self.grid, self.threshold_db, self.window, self.psf, self.stats, frame=f,
                            min_separation=self.min_separation)
            self.detections.extend(dets)
            scenes.append(scene_from_detections(dets, self.min_correlation))
        return scenes
