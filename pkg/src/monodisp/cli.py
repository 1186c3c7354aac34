"""Command-line entry point: ``monodisp {train,eval,infer,synth,gradcheck}``.

Every command takes the same flat key/value configuration.  Values come from
built-in defaults, then ``--config FILE`` (``key = value`` lines, ``#``
comments), then ``--key value`` flags.  Keys use underscores in files and
either dashes or underscores on the command line.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import (CameraRig, load_manifest, parse_scene, random_scene, read_image,
                   write_raster16, write_synthetic_dataset)
from .errors import (CalibrationParseError, ConfigError, EmptyReportError, IngestionError,
                     InvalidInputError, InvalidSpecError, TrainingDivergedError)
from .evaluator import (PROTOCOLS, NetworkPredictor, PredictionDir, disparity_to_depth,
                        evaluate_dataset, write_report)
from .losses import LossWeights
from .network import ARCHITECTURES, build
from .trainer import LOG_NAME, TrainConfig, load_checkpoint, train_loop

log = logging.getLogger("monodisp")

COMMANDS = ("train", "eval", "infer", "synth", "gradcheck")

_TRAIN_HELP = {
    "base_lr": "learning rate for the first epoch",
    "peak_lr": "learning rate after the first epoch (halved and quartered near the end)",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "epochs": "training epochs",
    "batch_size": "pairs per step",
    "width": "network input width (multiple of 8)",
    "height": "network input height (multiple of 8)",
    "seed": "seed for weights, ordering and augmentation",
    "arch": "network architecture",
    "d_max_frac": "largest disparity as a fraction of the image width",
    "augment": "random flips and color changes",
    "checkpoint_every": "epochs between checkpoints",
    "log_every": "steps between log records",
}
_WEIGHT_HELP = {
    "w_ph": "photometric weight",
    "w_st": "structural weight",
    "w_sm": "smoothness weight",
    "w_bc": "bilateral cyclic weight",
    "c": "adaptive-weight scale",
    "pyramid_levels": "loss pyramid levels",
    "blur_sigma": "Gaussian sigma before the edge Laplacian",
}
_EXTRA = {
    "data_root": (None, str, "dataset root containing <split>.txt"),
    "split": ("synthetic", str, "manifest name under the data root"),
    "protocol": ("eigen-80", str, "evaluation protocol: " + ", ".join(PROTOCOLS)),
    "checkpoint": (None, str, "checkpoint directory"),
    "predictions": (None, str, "directory of precomputed disparity rasters (eval)"),
    "out": ("runs/out", str, "output directory"),
    "image": (None, str, "input image for infer"),
    "focal": (None, float, "focal length in pixels; with baseline, infer also writes depth"),
    "baseline": (None, float, "stereo baseline in meters"),
    "scenes": (None, str, "directory of scene description files (synth)"),
    "n_scenes": (4, int, "random scenes to generate when no scene files are given"),
    "scene_width": (64, int, "random scene width"),
    "scene_height": (32, int, "random scene height"),
    "max_steps": (None, int, "stop training after this many steps"),
    "resume": (None, str, "checkpoint directory to resume training from"),
    "instances": (20, int, "random instances per term (gradcheck)"),
    "grid": (8, int, "instance size (gradcheck)"),
    "tolerance": (1e-4, float, "max relative gradient error (gradcheck)"),
}


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def config_keys() -> dict:
    """``key -> (default, parser, help)`` for every configurable value."""
    keys = {}
    train_defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("weights", "checkpoint_dir"):
            continue
        default = getattr(train_defaults, f.name)
        kind = _parse_bool if isinstance(default, bool) else type(default)
        keys[f.name] = (default, kind, _TRAIN_HELP.get(f.name, f.name))
    for f in dataclasses.fields(LossWeights):
        default = f.default
        keys[f.name] = (default, type(default), _WEIGHT_HELP.get(f.name, f.name))
    keys.update(_EXTRA)
    return keys


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(file_values: dict, overrides: dict) -> dict:
    keys = config_keys()
    cfg = {k: v[0] for k, v in keys.items()}
    for source in (file_values, overrides):
        for k, v in source.items():
            if v is None:
                continue
            if k not in keys:
                raise ConfigError(f"unknown config key {k!r}")
            parser = keys[k][1]
            try:
                cfg[k] = parser(v)
            except ValueError as e:
                raise ConfigError(f"bad value for {k}: {v!r} ({e})") from None
    if cfg["arch"] not in ARCHITECTURES:
        raise ConfigError(f"arch must be one of {sorted(ARCHITECTURES)}, got {cfg['arch']!r}")
    if cfg["protocol"] not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {sorted(PROTOCOLS)}, got {cfg['protocol']!r}")
    return cfg


def to_train_config(cfg: dict) -> TrainConfig:
    weights = LossWeights(**{f.name: cfg[f.name] for f in dataclasses.fields(LossWeights)})
    kwargs = {f.name: cfg[f.name] for f in dataclasses.fields(TrainConfig)
              if f.name not in ("weights", "checkpoint_dir")}
    return TrainConfig(weights=weights, **kwargs)


def write_config(cfg: dict, path, config_hash: str):
    lines = [f"# config_hash = {config_hash}"]
    lines += [f"{k} = {v}" for k, v in cfg.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def _require(cfg: dict, key: str, command: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{command} needs --{key.replace('_', '-')}")
    return cfg[key]


# --- commands ---------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    """Train a network on a dataset split."""
    from .plotting import plot_alpha_trend, plot_loss_curves, read_log

    root = _require(cfg, "data_root", "train")
    manifest = load_manifest(root, cfg["split"])
    config = to_train_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "run_config.txt", config.hash())
    result = train_loop(config, manifest, out_dir=out, resume_from=cfg["resume"], max_steps=cfg["max_steps"])
    records = read_log(out / LOG_NAME)
    if records:
        plot_alpha_trend(records, out / "alpha_trend.png")
        plot_loss_curves(records, out / "loss_curves.png")
    last = records[-1] if records else {}
    print(f"config_hash,{config.hash()}")
    print("step,total,l_ph,l_st,l_sm,l_bc,l_init")
    if last:
        print(",".join(str(last[k]) for k in ("step", "total", "l_ph", "l_st", "l_sm", "l_bc", "l_init")))
    print(f"checkpoint,{result.checkpoint}")
    return 0


def cmd_eval(cfg: dict) -> int:
    """Score predictions or a checkpoint under a protocol."""
    from .plotting import plot_per_image

    root = _require(cfg, "data_root", "eval")
    manifest = load_manifest(root, cfg["split"])
    extra = {"split": cfg["split"]}
    if cfg["predictions"] is not None:
        predictor = PredictionDir(cfg["predictions"])
        extra["predictions"] = str(cfg["predictions"])
    elif cfg["checkpoint"] is not None:
        network, _, meta = load_checkpoint(cfg["checkpoint"])
        predictor = NetworkPredictor(network)
        extra["checkpoint"] = str(cfg["checkpoint"])
        extra["config_hash"] = meta["config_hash"]
    else:
        raise ConfigError("eval needs --checkpoint or --predictions")
    result = evaluate_dataset(predictor, manifest, cfg["protocol"])
    out = Path(cfg["out"])
    write_report(result, out, extra)
    plot_per_image(result.rows, out / "per_image_abs_rel.png")
    agg = result.aggregate.as_dict()
    names = [k for k, v in agg.items() if v is not None]
    print(",".join(["protocol"] + names))
    print(",".join([result.protocol] + [f"{agg[k]:.6g}" for k in names]))
    for name, err in result.errors:
        print(f"skipped {name}: {err}", file=sys.stderr)
    return 0 if result.rows else 1


def cmd_infer(cfg: dict) -> int:
    """Predict disparity (and optionally depth) for one image."""
    path = Path(_require(cfg, "image", "infer"))
    image = read_image(path)
    if image.shape[-1] == 1:
        image = np.repeat(image, 3, axis=-1)
    h, w = image.shape[:2]
    if cfg["checkpoint"] is not None:
        network, _, _ = load_checkpoint(cfg["checkpoint"])
    else:
        log.warning("no --checkpoint given; using an untrained network (seed %d)", cfg["seed"])
        config = to_train_config({**cfg, "width": w - w % 8, "height": h - h % 8})
        network = build(config.arch, config.network_config(), seed=config.seed)
    network.eval()
    ncfg = network.config
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()[None]
    if t.shape[-2:] != (ncfg.height, ncfg.width):
        t = F.interpolate(t, size=(ncfg.height, ncfg.width), mode="bilinear", align_corners=False)
    with torch.no_grad():
        d = network(t).final[0][0]
    if d.shape[-2:] != (h, w):
        d = F.interpolate(d[:, None], size=(h, w), mode="bilinear", align_corners=False)[:, 0] * (w / ncfg.width)
    disp = d[0].double().numpy()
    out = Path(cfg["out"])
    disp_path = out / f"{path.stem}_disp.png"
    write_raster16(disp_path, disp)
    print(f"disparity,{disp_path}")
    if cfg["focal"] is not None and cfg["baseline"] is not None:
        depth = disparity_to_depth(disp, CameraRig(cfg["focal"], cfg["baseline"]))
        depth_path = out / f"{path.stem}_depth.png"
        write_raster16(depth_path, depth)
        print(f"depth,{depth_path}")
    return 0


def cmd_synth(cfg: dict) -> int:
    """Write a synthetic stereo dataset."""
    if cfg["scenes"] is not None:
        scene_dir = Path(cfg["scenes"])
        if not scene_dir.is_dir():
            raise IngestionError(f"scene directory not found: {scene_dir}")
        files = sorted(scene_dir.glob("*.txt"))
        if not files:
            raise IngestionError(f"no scene files (*.txt) in {scene_dir}")
        scenes = [parse_scene(f.read_text()) for f in files]
    else:
        rng = np.random.default_rng(cfg["seed"])
        scenes = [random_scene(rng, cfg["scene_width"], cfg["scene_height"]) for _ in range(cfg["n_scenes"])]
    manifest = write_synthetic_dataset(cfg["out"], scenes)
    print(f"root,{manifest.root}")
    print(f"split,{manifest.split}")
    print(f"samples,{len(manifest)}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    """Compare loss gradients with finite differences."""
    from .gradcheck import run_suite

    results = run_suite(cfg["instances"], cfg["seed"], cfg["grid"])
    tol = cfg["tolerance"]
    print("term,max_rel_error,checked,excluded,pass")
    ok = True
    for term, r in results.items():
        passed = r.passed(tol)
        ok &= passed
        print(f"{term},{r.max_rel_error:.3e},{r.n_checked},{r.n_excluded},{'yes' if passed else 'no'}")
    return 0 if ok else 1


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monodisp", description="Unsupervised stereo-trained disparity toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    keys = config_keys()
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or f"{name} command",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", metavar="PATH", help="flat key = value file")
        for key, (default, _, text) in keys.items():
            flag = "--" + key.replace("_", "-")
            aliases = [flag] if "_" not in key else [flag, "--" + key]
            kw = {"dest": key, "help": f"{text} (default: {default})", "metavar": key.upper()}
            if key == "arch":
                kw["choices"] = sorted(ARCHITECTURES)
            elif key == "protocol":
                kw["choices"] = sorted(PROTOCOLS)
            p.add_argument(*aliases, **kw)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    try:
        file_values = read_config_file(args.pop("config")) if "config" in args else {}
        cfg = resolve_config(file_values, args)
        return HANDLERS[command](cfg)
    except (IngestionError, CalibrationParseError, ConfigError, InvalidInputError, InvalidSpecError,
            TrainingDivergedError, EmptyReportError, FileNotFoundError) as e:
        print(f"monodisp {command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
