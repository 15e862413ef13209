"""Batch command line: ``synth``, ``run``, ``eval`` and ``render``.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import export
from ._backend import BACKEND
from .cluster import evaluate
from .data import (CUBE_SUFFIX, LABEL_SUFFIX, LabelMap, SynthSpec, _pair_paths, load_cube, load_labels,
                   make_synthetic, save_cube, save_labels)
from .errors import ConfigError, NumericalError, ValidationError
from .pipeline import run_pipeline
from .train import TrainConfig

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
DATA_KEYS = ("cube", "labels", "classes", "output")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pair_hashes(path, suffix: str) -> dict[str, str]:
    return {str(p): _sha256(p) for p in _pair_paths(path, suffix)}


# --------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    h, w = args.size
    spec = SynthSpec(h, w, args.bands, args.classes, subspace_dim=args.subspace_dim,
                     noise_sigma=args.noise, region_layout=args.layout, seed=args.seed)
    cube, labels = make_synthetic(spec)
    cube_path = save_cube(cube, args.out)
    label_path = save_labels(labels, args.out)
    print(f"wrote {cube_path} and {label_path} (+ raw payloads)")
    return EXIT_OK


# ----------------------------------------------------------------------- run


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_run_config(args) -> tuple[dict, TrainConfig]:
    cfg_path = Path(args.config)
    try:
        raw = json.loads(cfg_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    data = {k: raw.pop(k, None) for k in DATA_KEYS}
    if data["cube"] is None:
        raise ConfigError("config needs a 'cube' path")
    base = cfg_path.parent
    data["cube"] = _resolve(base, data["cube"])
    data["labels"] = _resolve(base, data["labels"])
    data["output"] = _resolve(base, data["output"])
    if args.ablation is not None:
        raw["ablation_mode"] = args.ablation
    if args.superpixels is not None:
        raw["M"] = args.superpixels
    for key in ("epochs", "seed", "alpha"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    try:
        config = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return data, config


def _write_run(tmp: Path, cube, labels, config, data) -> dict:
    res = run_pipeline(cube, labels, config, classes=data["classes"],
                       loss_csv=tmp / "loss.csv", checkpoint=tmp / "checkpoint.bin")
    t0 = time.perf_counter()
    h, w = cube.height, cube.width
    metrics = res.metrics.as_dict() if res.metrics is not None else {"oa": None, "nmi": None,
                                                                     "kappa": None, "confusion": None}
    metrics.update(M=res.M, classes=res.classes, eigengap=res.clusters.eigengap,
                   final_loss=res.training.history[-1].as_dict())
    (tmp / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    clusters = LabelMap(h, w, res.clusters.pixel_labels.astype(np.uint16))
    save_labels(clusters, tmp / "clusters")
    export.write_ppm(clusters.labels, h, w, tmp / "clusters.ppm", seed=config.seed)
    spx = LabelMap(h, w, (res.superpixel_map + 1).astype(np.uint16))
    save_labels(spx, tmp / "superpixels")
    export.write_ppm(spx.labels, h, w, tmp / "superpixels.ppm", seed=config.seed)
    Z = res.training.trace.selfrep.Z
    export.write_dense_csv(Z, tmp / "coefficients.csv")
    export.write_triplets_csv(Z, tmp / "coefficients_sparse.csv")
    timings = dict(res.timings, export=time.perf_counter() - t0)
    return {"M": res.M, "timings": timings}


def cmd_run(args) -> int:
    data, config = _load_run_config(args)
    out = Path(args.out) if args.out else data["output"]
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'output' in the config")
    if out.exists() and not args.force:
        raise ConfigError(f"output directory {out} exists; use --force to replace it")
    t0 = time.perf_counter()
    try:
        cube = load_cube(data["cube"])
        labels = load_labels(data["labels"]) if data["labels"] is not None else None
    except (OSError, ValidationError) as exc:
        raise ConfigError(str(exc)) from exc
    load_time = time.perf_counter() - t0

    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        info = _write_run(tmp, cube, labels, config, data)
        inputs = _pair_hashes(data["cube"], CUBE_SUFFIX)
        if data["labels"] is not None:
            inputs.update(_pair_hashes(data["labels"], LABEL_SUFFIX))
        manifest = {
            "config": config.to_dict(),
            "data": {k: (str(v) if isinstance(v, Path) else v) for k, v in data.items()},
            "inputs": inputs,
            "outputs": sorted(p.name for p in tmp.iterdir()) + ["manifest.json"],
            "timings": {"load": load_time, **info["timings"]},
            "seed": config.seed,
            "M": info["M"],
            "backend": BACKEND,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {out} (M={info['M']})")
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    try:
        pred, gt = load_labels(args.pred), load_labels(args.gt)
    except (OSError, ValidationError) as exc:
        raise ConfigError(str(exc)) from exc
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ConfigError(f"dimension mismatch: prediction {pred.height}x{pred.width}, "
                          f"ground truth {gt.height}x{gt.width}")
    report = evaluate(pred.labels, gt.labels).as_dict()
    report["oa_percent"] = f"{100.0 * report['oa']:.2f}"
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    print(f"OA {report['oa_percent']}  NMI {report['nmi']:.4f}  kappa {report['kappa']:.4f}")
    return EXIT_OK


# -------------------------------------------------------------------- render


def cmd_render(args) -> int:
    try:
        labels = load_labels(args.labels)
    except (OSError, ValidationError) as exc:
        raise ConfigError(str(exc)) from exc
    out = export.write_ppm(labels.labels, labels.height, labels.width, args.out, seed=args.seed)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spixel-ssc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic union-of-subspaces cube and its labels")
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW (default 64x64)")
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--subspace-dim", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--layout", choices=("blocks", "voronoi"), default="blocks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth", help="output prefix (default: synth)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="train, cluster and evaluate from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=("M1", "M2", "M3", "M4", "full"))
    p.add_argument("--superpixels", type=int, metavar="M")
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides 'output' in the config)")
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a predicted label map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a label map as a PPM image")
    p.add_argument("labels")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"spixel-ssc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"spixel-ssc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValidationError) as exc:
        print(f"spixel-ssc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
