"""Command line surface: gendata, train, eval, predict, render.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numerical abort.
Every command writes one manifest next to its outputs and is idempotent
given identical inputs and seed.
"""

from __future__ import annotations

import os

# Cap BLAS parallelism before numpy loads; harmless if numpy is already up.
_threads = os.environ.get("MSCA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import json
import sys
from dataclasses import asdict

import numpy as np

from . import data as mdata
from . import io as mio
from .errors import (
    CheckpointError,
    ConfigError,
    InputError,
    MscanetError,
    NumericalAbort,
    ParseError,
)
from .model import MSCANet
from .train import evaluate, load_checkpoint, predict_density, preset, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


def _config_hash(payload) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(target, command, config, seed, inputs, outputs):
    """One manifest per run, next to the outputs (no timestamps, so reruns
    are byte-identical)."""
    if os.path.isdir(target):
        path = os.path.join(target, "manifest.json")
    else:
        path = target + ".manifest.json"
    payload = {
        "command": command,
        "preset": config.get("preset") if isinstance(config, dict) else None,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "config_hash": _config_hash(config),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError(f"bad --size {text!r}; expected WxH like 64x64") from None


def _coerce(old, text):
    if isinstance(old, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(old, int):
        return int(text)
    if isinstance(old, float):
        return float(text)
    if isinstance(old, tuple):
        return tuple(type(old[0])(t) for t in text.split(","))
    return text


def apply_overrides(mcfg, tcfg, pairs):
    """Apply --set key=value overrides onto model/train/augment/loss configs."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set wants key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        for obj in (tcfg, tcfg.augment, tcfg.weights, mcfg):
            if hasattr(obj, key):
                setattr(obj, key, _coerce(getattr(obj, key), value))
                break
        else:
            raise ConfigError(f"unknown config key {key!r}")
    # re-run validation after overrides
    mcfg.__post_init__()
    tcfg.__post_init__()
    tcfg.augment.__post_init__()
    tcfg.weights.__post_init__()
    return mcfg, tcfg


# -- commands -----------------------------------------------------------------


def cmd_gendata(args):
    wh = _parse_size(args.size)
    sigma = None if args.gt == "adaptive" else args.sigma
    samples = mdata.synth_dataset(
        args.scenes,
        seed=args.seed,
        width=wh[0],
        height=wh[1],
        heads_min=args.heads_min,
        heads_max=args.heads_max,
        clutter=args.clutter,
        clusters=args.clusters,
        perspective=args.perspective,
        sigma=sigma,
        beta=args.beta,
    )
    os.makedirs(args.out, exist_ok=True)
    mdata.write_dataset(samples, args.out)
    config = {
        "scenes": args.scenes, "size": args.size, "heads_min": args.heads_min,
        "heads_max": args.heads_max, "clutter": args.clutter, "clusters": args.clusters,
        "perspective": args.perspective, "gt": args.gt, "sigma": args.sigma,
        "beta": args.beta, "seed": args.seed,
    }
    write_manifest(args.out, "gendata", config, args.seed,
                   inputs={}, outputs={"dir": args.out, "scenes": args.scenes})
    return EXIT_OK


def _resolve_train_config(args):
    mcfg, tcfg = preset(args.preset)
    mcfg.variant = args.ablation
    if args.seed is not None:
        tcfg.seed = args.seed
    apply_overrides(mcfg, tcfg, args.set)
    return mcfg, tcfg


def cmd_train(args):
    mcfg, tcfg = _resolve_train_config(args)
    samples = mdata.load_dataset(args.data)
    eval_samples = mdata.load_dataset(args.eval_data) if args.eval_data else samples
    model = MSCANet(mcfg, dtype=np.float32, seed=tcfg.seed)
    os.makedirs(args.out, exist_ok=True)
    train(model, samples, tcfg, out_dir=args.out, eval_samples=eval_samples)
    config = {"preset": args.preset, "ablation": args.ablation,
              "model": asdict(mcfg), "train": asdict(tcfg)}
    write_manifest(args.out, "train", config, tcfg.seed,
                   inputs={"data": args.data, "eval_data": args.eval_data},
                   outputs={"dir": args.out})
    return EXIT_OK


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    samples = mdata.load_dataset(args.data)
    report = evaluate(model, samples)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.txt")
    csv_path = os.path.join(args.out, "per_image.csv")
    report.write(report_path, csv_path)
    config = {"checkpoint": args.checkpoint, "model": asdict(model.config)}
    write_manifest(args.out, "eval", config, None,
                   inputs={"data": args.data, "checkpoint": args.checkpoint},
                   outputs={"report": report_path, "per_image": csv_path})
    return EXIT_OK


def cmd_predict(args):
    model, _ = load_checkpoint(args.checkpoint)
    image = mio.read_image(args.image)
    if image.shape[0] % 8 or image.shape[1] % 8:
        raise InputError(
            f"image dims {image.shape[1]}x{image.shape[0]} must be divisible by 8"
        )
    density, stride = predict_density(model, image)
    mio.write_dmap(args.out, density, stride=stride)
    count = float(density.sum())
    print(f"count={count!r}")
    config = {"checkpoint": args.checkpoint, "image": args.image}
    write_manifest(args.out, "predict", config, None,
                   inputs={"image": args.image, "checkpoint": args.checkpoint},
                   outputs={"dmap": args.out, "count": count})
    return EXIT_OK


# Fixed heat ramp, black -> red -> yellow -> white, so rendered goldens
# are stable.
def _heat_ramp(v):
    r = np.clip(3.0 * v, 0.0, 1.0)
    g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def cmd_render(args):
    values, stride = mio.read_dmap(args.map)
    peak = values.max()
    v = values / peak if peak > 0 else values
    overlay = mio.read_image(args.overlay) if args.overlay else None
    if overlay is not None:
        oh, ow = overlay.shape[:2]
        if (oh, ow) != v.shape:
            if v.shape[0] * stride == oh and v.shape[1] * stride == ow:
                v = np.repeat(np.repeat(v, stride, axis=0), stride, axis=1)
            else:
                raise InputError(
                    f"overlay {ow}x{oh} does not match map {v.shape[1]}x{v.shape[0]} "
                    f"at stride {stride}"
                )
    if args.out.endswith(".ppm"):
        img = _heat_ramp(v)
        if overlay is not None:
            base = overlay if overlay.ndim == 3 else np.repeat(overlay[:, :, None], 3, axis=2)
            img = 0.5 * base + 0.5 * img
        mio.write_ppm(args.out, img)
    else:
        img = v
        if overlay is not None:
            base = overlay if overlay.ndim == 2 else overlay.mean(axis=2)
            img = 0.5 * base + 0.5 * img
        mio.write_pgm(args.out, img)
    config = {"map": args.map, "overlay": args.overlay}
    write_manifest(args.out, "render", config, None,
                   inputs={"map": args.map, "overlay": args.overlay},
                   outputs={"image": args.out})
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mscanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", default="64x64")
    p.add_argument("--heads-min", type=int, default=5)
    p.add_argument("--heads-max", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clutter", type=float, default=0.3)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--perspective", type=float, default=0.3)
    p.add_argument("--gt", choices=("adaptive", "fixed"), default="adaptive")
    p.add_argument("--sigma", type=float, default=2.0, help="kernel width for --gt fixed")
    p.add_argument("--beta", type=float, default=0.3, help="adaptive kernel scale")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--ablation", choices=("full", "no-hag", "backbone"), default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field after the preset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a density map for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render", help="render a density map to an image")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", default=None)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, InputError, ParseError, CheckpointError, MscanetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
