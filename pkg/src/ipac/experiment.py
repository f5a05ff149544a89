"""End-to-end composition of one experiment from a resolved configuration.

Used by the command-line driver and by the acceptance suite, so that both
exercise the same code path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aberration import AberrationFunction, random_phase_screen, remove_piston
from .baseline import coherence_estimate
from .beamform import DelayAndSum, ImageGrid, compound, power_doppler, svd_clutter_filter
from .config import ExperimentConfig
from .inversion import IpacResult, NoScattererError, RegularizationSpec, ipac_iterate
from .localization import localize
from .phantom import FieldOfView, Vessel, bubble_tracks, tissue_speckle, vessel_flow
from .pipeline import ImageSceneEstimator, PsfModel
from .wavemodel import ChannelData, ScattererScene, add_noise, simulate_channels


class DimensionMismatchError(ValueError):
    """Channel data, delays and configuration disagree on the array layout."""


@dataclass
class Simulation:
    """Channel data plus the ground truth that produced it."""

    channel: ChannelData
    aberration: AberrationFunction
    scenes: list[ScattererScene]


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def image_grid(cfg: ExperimentConfig) -> ImageGrid:
    im = cfg["imaging"]
    return ImageGrid(im["x_min"], im["x_max"], im["z_min"], im["z_max"], im["pitch"])


def field_of_view(cfg: ExperimentConfig) -> FieldOfView:
    sc = cfg["scene"]
    return FieldOfView(sc["x_min"], sc["x_max"], sc["z_min"], sc["z_max"])


def make_scenes(cfg: ExperimentConfig, seed: int) -> list[ScattererScene]:
    sc = cfg["scene"]
    amp = (sc["amplitude_min"], sc["amplitude_max"])
    if sc["vessels"]:
        vessels = [Vessel((v[0], v[1]), (v[2], v[3]), v[4]) for v in sc["vessels"]]
        per = max(1, sc["n_bubbles"] // len(vessels))
        return vessel_flow(seed, vessels, per, sc["n_frames"], sc["speed"], sc["frame_interval"], amp)
    return bubble_tracks(seed, sc["n_bubbles"], sc["n_frames"], field_of_view(cfg), sc["speed"],
                         sc["frame_interval"], amp)


def make_screen(cfg: ExperimentConfig, seed: int) -> AberrationFunction:
    ab = cfg["aberration"]
    n = cfg["probe"]["n_elements"]
    if ab["max_attenuation"] == 0 and ab["max_delay_wavelengths"] == 0:
        return AberrationFunction.identity(n)
    return random_phase_screen(n, cfg["pulse"]["center_frequency"], seed, ab["max_attenuation"],
                               ab["max_delay_wavelengths"], ab["smoothness_len"])


def simulate(cfg: ExperimentConfig) -> Simulation:
    """Bubbles (and optional tissue) seen through a random screen, plus noise."""
    s_scene, s_screen, s_tissue, s_noise = _child_seeds(cfg.seed, 4)
    geom, pulse, scheme, c = cfg.geometry(), cfg.pulse(), cfg.scheme(), cfg.sound_speed
    scenes = make_scenes(cfg, s_scene)
    screen = make_screen(cfg, s_screen)
    sc = cfg["scene"]
    tissue = None
    if sc["tissue_density"] > 0:
        tissue = tissue_speckle(s_tissue, field_of_view(cfg), sc["tissue_density"], sc["tissue_reflectivity"])
    depth = cfg["acquisition"]["record_depth"] or max(sc["z_max"], cfg["imaging"]["z_max"])
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "config": cfg.to_dict()}
    channel = simulate_channels(scenes, screen, geom, pulse, scheme, c, fov_depth=depth,
                                static_scene=tissue, metadata=meta)
    snr = cfg["acquisition"]["snr_db"]
    if np.isfinite(snr):
        channel = add_noise(channel, snr, s_noise)
    return Simulation(channel, screen, scenes)


def band_summary(cfg: ExperimentConfig, channel: ChannelData) -> str:
    f = channel.band_bins * channel.sampling_rate / channel.n_samples
    return f"{len(f)} bins, {f.min() / 1e6:.3f}-{f.max() / 1e6:.3f} MHz"


def scene_estimator(cfg: ExperimentConfig) -> ImageSceneEstimator:
    inv = cfg["inversion"]
    return ImageSceneEstimator(cfg.geometry(), cfg.pulse(), cfg.scheme(), image_grid(cfg), cfg.sound_speed,
                               threshold_db=inv["threshold_db"], window=inv["window"],
                               min_correlation=inv["min_correlation"], f_number=cfg["imaging"]["f_number"],
                               transmit_corrections=inv["transmit_corrections"])


def check_dimensions(cfg: ExperimentConfig, channel: ChannelData) -> None:
    """Raise when the channel layout does not match the probe and sequence."""
    _, n_tx, n_el, _ = channel.samples.shape
    if n_el != cfg["probe"]["n_elements"] or n_tx != cfg.scheme().n_transmits:
        raise DimensionMismatchError(f"channel data has {n_tx} transmits x {n_el} elements; configuration "
                                     f"expects {cfg.scheme().n_transmits} x {cfg['probe']['n_elements']}")


def run_ipac(cfg: ExperimentConfig, channel: ChannelData, max_iter: int | None = None,
             alpha: float | None = None) -> IpacResult:
    inv = cfg["inversion"]
    check_dimensions(cfg, channel)
    frames = list(range(min(inv["n_frames"], channel.n_frames)))
    return ipac_iterate(channel, scene_estimator(cfg), cfg.geometry(), cfg.pulse(), cfg.scheme(),
                        reg=RegularizationSpec(inv["alpha"] if alpha is None else alpha),
                        max_iter=inv["max_iter"] if max_iter is None else max_iter, eps=inv["eps"],
                        c=cfg.sound_speed, frames=frames, n_bins=inv["n_bins"], inner_iter=inv["inner_iter"],
                        joint_steps=inv["joint_steps"])


def isolated_bubbles(detections, n: int, min_distance: float, rel_amplitude: float = 0.5) -> np.ndarray:
    """Positions of the ``n`` brightest detections with no comparable neighbor within ``min_distance``.

    Neighbors weaker than ``rel_amplitude`` times the candidate (typically
    its own sidelobes) do not disqualify it.
    """
    pos = np.array([[d.x, d.z] for d in detections]).reshape(-1, 2)
    amp = np.array([d.amplitude for d in detections])
    if len(pos) == 0:
        return pos
    dist = np.hypot(*(pos[:, None, :] - pos[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(dist, np.inf)
    near = (dist <= min_distance) & (amp[None, :] >= rel_amplitude * amp[:, None])
    keep = np.nonzero(~near.any(axis=1))[0]
    keep = keep[np.argsort(-amp[keep])][:n]
    return pos[keep]


def run_coherence(cfg: ExperimentConfig, channel: ChannelData, frame: int = 0) -> np.ndarray:
    """Baseline delays from the brightest isolated bubbles of one aberrated frame."""
    check_dimensions(cfg, channel)
    geom, pulse, scheme = cfg.geometry(), cfg.pulse(), cfg.scheme()
    inv, bl = cfg["inversion"], cfg["baseline"]
    grid = image_grid(cfg)
    bf = DelayAndSum.for_channel(channel, geom, scheme, grid, pulse.center_frequency, c=cfg.sound_speed)
    img = np.abs(compound(bf(channel.samples[frame])))
    psf = PsfModel(geom, pulse, scheme, grid.pitch, inv["window"], cfg.sound_speed)
    dets = [d for d in localize(img, grid, inv["threshold_db"], inv["window"], psf, frame=frame)
            if d.psf_correlation >= inv["min_correlation"]]
    pos = isolated_bubbles(dets, bl["n_bubbles"], 4 * pulse.wavelength(cfg.sound_speed))
    if len(pos) == 0:
        raise NoScattererError("no isolated bubble detected for the coherence baseline")
    return coherence_estimate(channel, pos, geom, pulse, scheme, frame, c=cfg.sound_speed,
                              window_pulses=bl["window_pulses"], pad=bl["pad"])


def render(cfg: ExperimentConfig, channel: ChannelData, delays=None) -> dict[str, np.ndarray]:
    """Power Doppler and B-mode images, receive-corrected by ``delays`` when given."""
    check_dimensions(cfg, channel)
    if delays is not None and np.shape(delays) != (cfg["probe"]["n_elements"],):
        raise DimensionMismatchError(f"{np.size(delays)} delays for {cfg['probe']['n_elements']} elements")
    bf = DelayAndSum.for_channel(channel, cfg.geometry(), cfg.scheme(), image_grid(cfg),
                                 cfg.pulse().center_frequency, c=cfg.sound_speed, corrections=delays,
                                 f_number=cfg["imaging"]["f_number"])
    frames = compound(bf(channel.samples))
    thr = cfg["imaging"]["svd_threshold"]
    filtered = svd_clutter_filter(frames, thr) if thr > 0 and len(frames) >= 2 else frames
    return {"power_doppler": power_doppler(filtered), "bmode": np.abs(frames[0])}


def write_scenes_csv(path, scenes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "z", "reflectivity"])
        for f, s in enumerate(scenes):
            for (x, z), g in zip(s.positions, s.reflectivity):
                w.writerow([f, repr(float(x)), repr(float(z)), repr(float(np.real(g)))])


def read_points_csv(path) -> np.ndarray:
    """``(x, z)`` columns of a scene or detection CSV."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["z"])] for r in rows]).reshape(-1, 2)


def delay_error_rms(estimate, truth) -> float:
    """Piston-removed RMS difference of two delay profiles (s)."""
    return float(np.sqrt(np.mean((remove_piston(estimate) - remove_piston(truth)) ** 2)))
