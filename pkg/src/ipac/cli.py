"""Command-line experiment driver: ``ipac {simulate,invert,correct,evaluate}``.

One experiment is one output directory. Every artifact carries the hash of
the resolved configuration. Exit codes: 0 success, 2 configuration or
input error, 3 nothing detected, 4 dimension mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .aberration import AberrationFunction, remove_piston
from .config import PRESETS, ConfigError, ExperimentConfig, load_config, write_config
from .experiment import (DimensionMismatchError, band_summary, delay_error_rms, image_grid, read_points_csv,
                         render, run_coherence, run_ipac, simulate, write_scenes_csv)
from .inversion import DivergenceWarning, IpacResult, NoScattererError
from .metrics import (UndefinedMetricError, append_ledger, cnr, cosine_similarity, frc_resolution, snr_image,
                      write_metrics_json)
from .wavemodel import ChannelData

logger = logging.getLogger("ipac")

EXIT_OK, EXIT_CONFIG, EXIT_NO_DETECTION, EXIT_MISMATCH = 0, 2, 3, 4
LEDGER_FIELDS = ("command", "config_hash", "seed", "cnr_uncorrected_db", "cnr_corrected_db",
                 "snr_uncorrected_db", "snr_corrected_db", "cosine", "rms_delay_s",
                 "frc_resolution_m", "frc_crossed")
IMAGE_NAMES = ("power_doppler", "bmode")
DYNAMIC_RANGE_DB = 40.0


def _overrides(args) -> dict:
    out = {}
    if args.snr_db is not None:
        out[("acquisition", "snr_db")] = args.snr_db
    if args.max_iter is not None:
        out[("inversion", "max_iter")] = args.max_iter
    if args.alpha is not None:
        out[("inversion", "alpha")] = args.alpha
    return out


def resolve_config(args, channel: ChannelData | None = None) -> ExperimentConfig:
    """Configuration from ``--config``/``--preset``, else the one embedded in ``channel``."""
    if args.config is not None or args.preset is not None or channel is None:
        preset = args.preset if (args.preset is not None or args.config is not None) else "l22"
        return load_config(args.config, preset, args.seed or 0, _overrides(args))
    stored = channel.metadata.get("config")
    if not stored:
        raise ConfigError("channel data carries no configuration; pass --config or --preset")
    values = json.loads(json.dumps(stored["values"]))
    for (sec, key), v in _overrides(args).items():
        values.setdefault(sec, {})[key] = v
    seed = stored["seed"] if args.seed is None else args.seed
    return ExperimentConfig(values, seed, stored.get("preset"))


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".bin", ".json") else p


def load_channel(path) -> ChannelData:
    stem = _stem(path)
    if not stem.with_suffix(".bin").exists() or not stem.with_suffix(".json").exists():
        raise FileNotFoundError(f"channel container {stem}.bin/.json not found")
    return ChannelData.load(stem)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    sim = simulate(cfg)
    sim.channel.save(out / "channels")
    fc = cfg["pulse"]["center_frequency"]
    sim.aberration.to_csv(out / "truth_delays.csv", fc)
    write_scenes_csv(out / "truth_scenes.csv", sim.scenes)
    write_config(cfg, out / "config.ini")
    summary = {"config_hash": cfg.hash(), "seed": cfg.seed, "dims": list(sim.channel.samples.shape),
               "band": band_summary(cfg, sim.channel), "noise_sigma": sim.channel.metadata.get("noise_sigma")}
    write_metrics_json(out / "simulate.json", summary)
    print(f"seed={cfg.seed} config_hash={cfg.hash()} dims={summary['dims']} band: {summary['band']}")
    return EXIT_OK


def cmd_invert(args) -> int:
    channel = load_channel(args.channel)
    cfg = resolve_config(args, channel)
    out = _out_dir(args)
    fc = cfg["pulse"]["center_frequency"]
    if args.method == "coherence":
        delays = run_coherence(cfg, channel)
        AberrationFunction.from_delays(delays).to_csv(out / "coherence_delays.csv", fc)
        write_metrics_json(out / "coherence_history.json", {"method": "coherence", "config_hash": cfg.hash(),
                                                            "n_bubbles": cfg["baseline"]["n_bubbles"]})
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DivergenceWarning)
            result: IpacResult = run_ipac(cfg, channel)
        for w in caught:
            if issubclass(w.category, DivergenceWarning):
                print(f"warning: {w.message}", file=sys.stderr)
        result.save(out, "ipac", cfg.hash(), fc)
        delays = result.delays
        print(f"iterations={result.iterations} converged={result.converged} "
              f"history={[round(h, 5) for h in result.history]}")
    truth = _stem(args.channel).parent / "truth_delays.csv"
    if truth.exists():
        rms = delay_error_rms(delays, AberrationFunction.from_csv(truth).delay)
        print(f"rms delay error vs truth: {rms * fc:.4f} periods")
    print(f"config_hash={cfg.hash()} method={args.method} span={np.ptp(remove_piston(delays)) * fc:.4f} periods")
    return EXIT_OK


def _to_png(uncorrected, corrected, path, power: bool) -> None:
    from PIL import Image

    scale = 10 if power else 20
    ref = max(float(uncorrected.max()), float(corrected.max()), np.finfo(float).tiny)
    tiles = []
    for img in (uncorrected, corrected):
        db = scale * np.log10(np.maximum(img / ref, 1e-30))
        tiles.append(np.clip((db + DYNAMIC_RANGE_DB) / DYNAMIC_RANGE_DB, 0, 1))
    gap = np.ones((uncorrected.shape[0], 4))
    rgb = (np.hstack([tiles[0], gap, tiles[1]]) * 255).round().astype(np.uint8)
    Image.fromarray(rgb, mode="L").save(path, format="PNG")


def cmd_correct(args) -> int:
    channel = load_channel(args.channel)
    cfg = resolve_config(args, channel)
    delays = AberrationFunction.from_csv(Path(args.delays)).delay
    out = _out_dir(args)
    before = render(cfg, channel, None)
    after = render(cfg, channel, delays)
    grid = image_grid(cfg)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "shape": list(grid.shape), "dtype": "<f4",
            "grid": {"x_min": grid.x_min, "x_max": grid.x_max, "z_min": grid.z_min, "z_max": grid.z_max,
                     "pitch": grid.pitch},
            "delays": Path(args.delays).name, "files": {}}
    for name in IMAGE_NAMES:
        for tag, imgs in (("uncorrected", before), ("corrected", after)):
            fname = f"{name}_{tag}.f32"
            (out / fname).write_bytes(imgs[name].astype("<f4").tobytes())
            meta["files"][f"{name}_{tag}"] = fname
        _to_png(before[name], after[name], out / f"{name}.png", power=name == "power_doppler")
    write_metrics_json(out / "images.json", meta)
    print(f"config_hash={cfg.hash()} images written to {out}")
    return EXIT_OK


def load_images(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "images.json").read_text())
    shape = tuple(meta["shape"])
    imgs = {k: np.frombuffer((directory / f).read_bytes(), dtype="<f4").reshape(shape).astype(float)
            for k, f in meta["files"].items()}
    return meta, imgs


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    metrics: dict = {"config_hash": cfg.hash(), "seed": cfg.seed}
    row = dict.fromkeys(LEDGER_FIELDS, "")
    if not (args.images or args.delays or args.points):
        raise ConfigError("nothing to evaluate; pass --images, --delays or --points")
    if args.images:
        ev = cfg["evaluate"]
        missing = [k for k in ("vessel_roi", "noise_roi") if k not in ev]
        if missing:
            raise ConfigError(f"[evaluate] missing ROI: {', '.join(missing)}")
        meta, imgs = load_images(args.images)
        metrics["images_config_hash"] = meta["config_hash"]
        for tag in ("uncorrected", "corrected"):
            pd = imgs[f"power_doppler_{tag}"]
            for name, fn in (("cnr", cnr), ("snr", snr_image)):
                try:
                    val = fn(pd, ev["vessel_roi"], ev["noise_roi"])
                except UndefinedMetricError:
                    val = float("nan")
                metrics[f"{name}_{tag}_db"] = val
                row[f"{name}_{tag}_db"] = val
    if args.delays:
        a, b = (AberrationFunction.from_csv(Path(p)).delay for p in args.delays)
        if a.shape != b.shape:
            raise DimensionMismatchError(f"delay profiles have {a.size} and {b.size} elements")
        metrics["cosine"] = row["cosine"] = cosine_similarity(remove_piston(a), remove_piston(b))
        metrics["rms_delay_s"] = row["rms_delay_s"] = delay_error_rms(a, b)
    if args.points:
        pa, pb = (read_points_csv(p) for p in args.points)
        frc = frc_resolution(pa, pb, image_grid(cfg))
        metrics["frc"] = {"resolution_m": frc.resolution, "crossed": frc.crossed,
                          "render_pitch_m": frc.render_pitch, "frequencies": frc.frequencies,
                          "curve": frc.curve, "threshold": frc.threshold}
        row["frc_resolution_m"] = frc.resolution
        row["frc_crossed"] = frc.crossed
    write_metrics_json(out / "metrics.json", metrics)
    row.update(command="evaluate", config_hash=cfg.hash(), seed=cfg.seed)
    append_ledger(Path(args.ledger) if args.ledger else out / "ledger.csv", row)
    shown = {k: v for k, v in metrics.items() if k != "frc"}
    if "frc" in metrics:
        shown["frc_resolution_m"] = metrics["frc"]["resolution_m"]
    print(json.dumps({k: (v if not isinstance(v, float) or np.isfinite(v) else repr(v)) for k, v in shown.items()},
                     sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default l22)")
    common.add_argument("--seed", type=int, default=None, help="experiment seed")
    common.add_argument("--snr-db", type=float, default=None, help="channel SNR override (dB)")
    common.add_argument("--method", choices=("ipac", "coherence"), default="ipac")
    common.add_argument("--max-iter", type=int, default=None, help="outer iteration override")
    common.add_argument("--alpha", type=float, default=None, help="relative Tikhonov weight override")
    common.add_argument("--out-dir", default=".", help="experiment directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ipac", description="Phase aberration correction experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="synthesize channel data")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("invert", parents=[common], help="estimate the aberration from channel data")
    p.add_argument("channel", help="channel container (stem, .bin or .json)")
    p.set_defaults(func=cmd_invert)
    p = sub.add_parser("correct", parents=[common], help="render uncorrected and corrected images")
    p.add_argument("channel")
    p.add_argument("delays", help="delay CSV")
    p.set_defaults(func=cmd_correct)
    p = sub.add_parser("evaluate", parents=[common], help="compute metrics and append a ledger row")
    p.add_argument("--images", help="directory written by 'correct'")
    p.add_argument("--delays", nargs=2, metavar=("A", "B"), help="two delay CSVs to compare")
    p.add_argument("--points", nargs=2, metavar=("A", "B"), help="two point CSVs for FRC")
    p.add_argument("--ledger", help="ledger CSV (default <out-dir>/ledger.csv)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoScattererError as exc:
        print(f"error: no detection: {exc}", file=sys.stderr)
        return EXIT_NO_DETECTION
    except DimensionMismatchError as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
