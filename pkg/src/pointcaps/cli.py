"""``pointcaps`` command line: dataset generation, training, analysis and self-checks.

Every subcommand writes a ``run.json`` provenance record into its output
directory, prints one ``key=value`` summary line on stdout and logs detail
on stderr. ``POINTCAPS_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ROUTING_MODES, ModelConfig
from .data import SHAPES, load_dataset, make_dataset, save_cloud, write_dataset
from .exceptions import InputError, PointCapsError
from .model import count_params_flops
from .training import evaluate, latent_perturb, noise_sweep, part_assign, train, write_history, write_sweep

log = logging.getLogger("pointcaps")

PAPER_PARAMS = 3.52e6
PAPER_FLOPS = 615e6
SIGMA_GRID = (0.0, 0.05, 0.1, 0.15, 0.2)
OUTLIER_GRID = (0, 100, 200, 400)
PRESETS = {"desk": ModelConfig.desk, "tiny": ModelConfig.tiny, "full": ModelConfig}


def build_id():
    """Version plus a digest of the package sources."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


def write_provenance(out, args, config=None, **extra):
    args_dict = {k: v for k, v in vars(args).items() if k != "func"}
    record = {
        "subcommand": args.command,
        "seed": getattr(args, "seed", None),
        "build": build_id(),
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in args_dict.items()},
        "config": config.to_text().splitlines() if config is not None else None,
    }
    record.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def summary(**fields):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()))


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shape_list(text):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in SHAPES]
    if unknown or not kinds:
        raise argparse.ArgumentTypeError(f"shapes must be a subset of {','.join(SHAPES)}")
    return kinds


# subcommands ---------------------------------------------------------------------------

def cmd_gen(args):
    kinds = args.shapes
    clouds = make_dataset(kinds, per_class=args.per_class, n=args.points, seed=args.seed)
    manifest = write_dataset(clouds, args.out, args.split, class_names=kinds)
    write_provenance(args.out, args, classes=list(kinds))
    log.info("wrote %d clouds under %s", len(clouds), args.out / args.split)
    summary(command="gen", clouds=len(clouds), classes=len(kinds), points=args.points,
            manifest=args.out / f"{manifest.split}.csv")
    return 0


def _train_config(args, clouds):
    labels = {c.label for c in clouds}
    n_points = len(clouds[0])
    base = PRESETS[args.preset](num_classes=max(labels) + 1, num_points=n_points)
    config = ModelConfig.load(args.config, base=base) if args.config is not None else base
    changes = {}
    if args.routing is not None:
        changes["routing_mode"] = args.routing
    if args.no_skip:
        changes["skip_connection"] = False
    if args.gamma is not None:
        changes["gamma"] = args.gamma
    config = replace(config, **changes) if changes else config
    config.validate()
    if config.num_points != n_points:
        raise InputError(f"config expects {config.num_points} points, data has {n_points}")
    if max(labels) >= config.num_classes:
        raise InputError(f"config has {config.num_classes} classes, data has label {max(labels)}")
    return config


def cmd_train(args):
    clouds = load_dataset(args.data, args.split)
    if not clouds:
        raise InputError(f"no clouds in {args.data}/{args.split}.csv")
    config = _train_config(args, clouds)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "model.ckpt"
    result = train(config, clouds, args.epochs, batch_size=args.batch_size, lr=args.lr,
                   seed=args.seed, checkpoint=ckpt)
    write_history(result.history, args.out / "history.csv")
    metrics = {"train_acc": result.history[-1].accuracy if result.history else float("nan")}
    test_manifest = args.data / f"{args.eval_split}.csv"
    if test_manifest.is_file():
        m = evaluate(result.model, load_dataset(args.data, args.eval_split))
        metrics.update(test_acc=m.accuracy, test_cd=m.cd_mean)
    write_provenance(args.out, args, config, metrics=metrics)
    summary(command="train", epochs=args.epochs, checkpoint=ckpt, **metrics)
    return 0


def _load_model(args):
    config = ModelConfig.load(args.config) if getattr(args, "config", None) else None
    return load_checkpoint(args.ckpt, config)


def cmd_eval(args):
    model = _load_model(args)
    m = evaluate(model, load_dataset(args.data, args.split))
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("split,accuracy,cd\n")
        fh.write(f"{args.split},{m.accuracy!r},{m.cd_mean!r}\n")
    write_provenance(args.out, args, model.config, metrics={"accuracy": m.accuracy, "cd": m.cd_mean})
    summary(command="eval", split=args.split, accuracy=m.accuracy, cd=m.cd_mean)
    return 0


def cmd_sweep(args):
    model = _load_model(args)
    levels = args.levels
    if levels is None:
        levels = list(SIGMA_GRID) if args.mode == "perturb" else list(OUTLIER_GRID)
    if args.mode == "outliers":
        if any(v != int(v) for v in levels):
            raise InputError("outlier levels must be integers")
        levels = [int(v) for v in levels]
    rows = noise_sweep(model, load_dataset(args.data, args.split), args.mode, levels, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"sweep_{args.mode}.csv"
    write_sweep(rows, path, args.mode)
    for level, acc, cd in rows:
        log.info("%s %s: accuracy %.4f cd %.4f", args.mode, level, acc, cd)
    write_provenance(args.out, args, model.config)
    summary(command="sweep", mode=args.mode, rows=len(rows), csv=path)
    return 0


def _pick_cloud(args):
    clouds = load_dataset(args.data, args.split)
    if not 0 <= args.index < len(clouds):
        raise InputError(f"index must be in [0, {len(clouds)}), got {args.index}")
    return clouds[args.index]


def cmd_perturb(args):
    model = _load_model(args)
    cloud = _pick_cloud(args)
    lo, hi = args.range
    if args.steps < 1:
        raise InputError("steps must be positive")
    values = np.linspace(lo, hi, args.steps)
    decoded = latent_perturb(model, cloud, args.dim, values)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "perturb.csv", "w", encoding="utf-8") as fh:
        fh.write("step,value,file\n")
        for i, (value, pts) in enumerate(zip(values, decoded)):
            name = f"perturb_{i:03d}.xyz"
            save_cloud(replace(cloud, points=pts, normals=None, part_labels=None), args.out / name)
            fh.write(f"{i},{float(value)!r},{name}\n")
    write_provenance(args.out, args, model.config)
    summary(command="perturb", dim=args.dim, clouds=len(decoded), out=args.out)
    return 0


def cmd_parts(args):
    model = _load_model(args)
    clouds = load_dataset(args.data, args.split)
    if args.index is not None:
        if not 0 <= args.index < len(clouds):
            raise InputError(f"index must be in [0, {len(clouds)}), got {args.index}")
        clouds = [clouds[args.index]]
    args.out.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(clouds):
        caps = np.asarray(part_assign(model, cloud)).astype(int)
        save_cloud(replace(cloud, part_labels=caps), args.out / f"parts_{i:05d}.xyz")
    write_provenance(args.out, args, model.config)
    summary(command="parts", clouds=len(clouds), out=args.out)
    return 0


def cmd_verify(args):
    from .verify import CHECKS, run_checks

    names = args.only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise InputError(f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
    results = run_checks(names, seeds=args.seeds)
    for r in results:
        log.info("%s %-24s %7.2fs  %s", "PASS" if r.passed else "FAIL", r.name, r.seconds, r.detail)
    failed = [r.name for r in results if not r.passed]
    if args.out is not None:
        write_provenance(args.out, args, results=[
            {"name": r.name, "passed": r.passed, "detail": r.detail} for r in results])
    summary(command="verify", checks=len(results), failed=len(failed),
            failing=",".join(failed) or "none")
    return 1 if failed else 0


def cmd_count(args):
    config = ModelConfig.load(args.config) if args.config else PRESETS[args.preset]()
    params, flops = count_params_flops(config)
    log.info("reference network: %.2fM parameters, %.0fM FLOPs", PAPER_PARAMS / 1e6, PAPER_FLOPS / 1e6)
    if args.out is not None:
        write_provenance(args.out, args, config, params=params, macs=flops)
    summary(command="count", params=params, macs=flops,
            params_ref=int(PAPER_PARAMS), flops_ref=int(PAPER_FLOPS))
    return 0


# parser ---------------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="pointcaps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--shapes", type=_shape_list, default=list(SHAPES))
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--eval-split", default="test", help="evaluated after training if present")
    p.add_argument("--config", type=Path, help="key = value file layered over the preset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-2)
    p.add_argument("--gamma", type=float)
    p.add_argument("--routing", choices=ROUTING_MODES)
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    def with_ckpt(p, needs_data=True):
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--config", type=Path, help="must match the checkpoint")
        if needs_data:
            p.add_argument("--data", type=Path, required=True)
            p.add_argument("--split", default="test")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="accuracy and Chamfer distance on a split")
    with_ckpt(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate under Gaussian noise or outliers")
    with_ckpt(p)
    p.add_argument("--mode", choices=("perturb", "outliers"), required=True)
    p.add_argument("--levels", type=_float_list,
                   help="comma-separated sigmas or outlier counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("perturb", help="decode one latent entry swept over a range")
    with_ckpt(p)
    p.add_argument("--index", type=int, default=0, help="cloud index in the split")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), default=(-5.0, 5.0))
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("parts", help="write clouds with the capsule assignment as part column")
    with_ckpt(p)
    p.add_argument("--index", type=int, help="only this cloud")
    p.set_defaults(func=cmd_parts)

    p = sub.add_parser("verify", help="gradient checks, routing oracles and invariants")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--only", nargs="+", metavar="CHECK")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count", help="parameter and multiply-add counts")
    p.add_argument("--preset", choices=sorted(PRESETS), default="full")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_count)
    return parser


def _thread_limit():
    raw = os.environ.get("POINTCAPS_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"POINTCAPS_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InputError("POINTCAPS_THREADS must be positive")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        limit = _thread_limit()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except (PointCapsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
