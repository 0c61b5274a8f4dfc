"""Command-line interface.

Subcommands: synth, preprocess, train, register, apply, evaluate, invert.
Every command is deterministic given its --seed flags; report-writing
commands render a PNG figure next to each delimited output file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from . import metrics, pipeline
from .geometry import preprocess_volume
from .model import init_params
from .prealign import centroids_of_volume, prealign_to_template
from .synth import SyntheticSpec, synth_subject, template_volume
from .training import Dataset, TrainConfig, train, write_history

logger = logging.getLogger(__name__)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--lambda-reg", type=float, default=defaults.lambda_reg)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--sigma", type=float, default=defaults.sigma)
    p.add_argument("--epsilon", type=float, default=defaults.epsilon)
    p.add_argument("--target-points", type=int, default=defaults.target_points)
    p.add_argument("--target-simplices", type=int, default=defaults.target_simplices)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--config", type=Path, default=None,
                   help="flat key=value config file; CLI flags override")


def _config_from_args(args) -> TrainConfig:
    if args.config is not None:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = TrainConfig()
    overrides = {
        "lr": args.lr, "lambda_reg": args.lambda_reg,
        "batch_size": args.batch_size, "epochs": args.epochs,
        "steps": args.steps, "sigma": args.sigma, "epsilon": args.epsilon,
        "target_points": args.target_points,
        "target_simplices": args.target_simplices, "seed": args.seed,
    }
    defaults = TrainConfig()
    for key, val in overrides.items():
        if args.config is None or val != getattr(defaults, key):
            setattr(cfg, key, val)
    return cfg


def cmd_synth(args) -> int:
    spec = SyntheticSpec(grid=args.grid, regions=args.regions,
                         magnitude=args.magnitude, bandwidth=args.bandwidth,
                         affine_jitter=args.affine_jitter,
                         template_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.save_volume(out / "template.nvol", template_volume(spec))
    for i in range(args.subjects):
        vol, chain = synth_subject(spec, seed=i)
        sio.save_volume(out / f"subject_{i:03d}.nvol", vol)
        sio.save_chain(out / f"subject_{i:03d}.chain.json", chain, tag="ground-truth")
    print(f"wrote template + {args.subjects} subjects to {out}")
    return 0


def cmd_preprocess(args) -> int:
    vol = sio.load_volume(args.volume)
    template = sio.load_volume(args.template)
    lo, hi = template.world_box()
    surfaces = preprocess_volume(
        vol, args.target_points, args.target_simplices, lo, hi,
        seed=args.seed, smooth_iterations=args.smooth_iters,
        skip_labels=tuple(args.skip_label))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in surfaces:
        sio.save_surface(out / f"region_{s.region:03d}.surf", s)
    print(f"wrote {len(surfaces)} region surfaces to {out}")
    return 0


def _load_subject_surfaces(root: Path) -> dict:
    subjects = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        surfs = [sio.load_surface(f) for f in sorted(sub.glob("region_*.surf"))]
        if surfs:
            subjects[sub.name] = surfs
    if not subjects:
        raise ValueError(f"no subject directories with surfaces under {root}")
    return subjects


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    subjects = _load_subject_surfaces(Path(args.data))
    names = sorted(subjects)
    n_val = args.val_subjects
    if n_val >= len(names):
        raise ValueError("validation split leaves no training subjects")
    val_names = set(names[-n_val:]) if n_val else set()
    dataset = Dataset(
        {n: subjects[n] for n in names if n not in val_names},
        {n: subjects[n] for n in val_names})
    params = init_params(cfg.seed)
    best, history = train(cfg, dataset, params,
                          pairs_per_epoch=args.pairs_per_epoch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.save_params(out / "model.params", best)
    write_history(out / "history.csv", history)
    cfg.save(out / "config.txt")
    from .plots import plot_history
    plot_history(history, out / "history.png")
    print(f"wrote model.params, history.csv, history.png to {out}")
    return 0


def cmd_register(args) -> int:
    cfg = _config_from_args(args)
    moving = sio.load_volume(args.moving)
    reference = sio.load_volume(args.reference)
    template = sio.load_volume(args.template)
    params = sio.load_params(args.params)
    chain = pipeline.register(moving, reference, params, cfg, template,
                              skip_labels=tuple(args.skip_label),
                              smooth_iterations=args.smooth_iters)
    sio.save_chain(args.out, chain, tag="register")
    print(f"wrote transform chain to {args.out}")
    return 0


def cmd_apply(args) -> int:
    chain = sio.load_chain(args.chain)
    template = sio.load_volume(args.template)
    lo, hi = template.world_box()
    if args.volume:
        moving = sio.load_volume(args.volume)
        grid = sio.load_volume(args.reference_grid) if args.reference_grid else moving
        warped = pipeline.warp_labels(moving, chain, grid, lo, hi)
        sio.save_volume(args.out, warped)
    elif args.surface:
        surf = sio.load_surface(args.surface)
        moved = pipeline.transform_surface(surf, chain, cutoff_radius="auto")
        sio.save_surface(args.out, moved)
    else:
        raise ValueError("apply needs --volume or --surface")
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    moving = sio.load_volume(args.moving)
    reference = sio.load_volume(args.reference)
    template = sio.load_volume(args.template)
    chain = sio.load_chain(args.chain)
    lo, hi = template.world_box()
    skip = tuple(args.skip_label)

    warped = pipeline.warp_labels(moving, chain, reference, lo, hi)
    labels = sorted(set(reference.labels()) - set(skip))
    jaccards = {l: metrics.jaccard(warped, reference, l) for l in labels}

    surf_m = preprocess_volume(moving, cfg.target_points, cfg.target_simplices,
                               lo, hi, seed=cfg.seed,
                               smooth_iterations=args.smooth_iters,
                               skip_labels=skip)
    surf_r = preprocess_volume(reference, cfg.target_points,
                               cfg.target_simplices, lo, hi, seed=cfg.seed + 1,
                               smooth_iterations=args.smooth_iters,
                               skip_labels=skip)
    moved = [pipeline.transform_surface(s, chain, cutoff_radius="auto")
             for s in surf_m]
    report = metrics.interface_chamfer_report(moved, surf_r, lo, hi)
    agg = metrics.aggregate(report)
    mem = metrics.memory_report("evaluate")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "key", "value"])
        for l in labels:
            w.writerow(["jaccard", l, jaccards[l]])
        for (a, b), d in sorted(report.items()):
            w.writerow(["interface_chamfer_mm", f"{a}-{b}", d])
        w.writerow(["interface_chamfer_mm_mean", "", agg["mean"]])
        w.writerow(["interface_chamfer_mm_median", "", agg["median"]])
        w.writerow(["peak_memory_bytes", mem["phase"], mem["peak_bytes"]])
    from .plots import plot_evaluation
    plot_evaluation(jaccards, report, out.with_suffix(".png"))
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return 0


def cmd_invert(args) -> int:
    chain = sio.load_chain(args.chain)
    sio.save_chain(args.out, chain.inverted(), tag="inverse")
    print(f"wrote inverted chain to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfreg",
        description="Diffeomorphic registration of segmented regions via "
                    "boundary-surface point clouds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--regions", type=int, default=6)
    p.add_argument("--magnitude", type=float, default=0.04)
    p.add_argument("--bandwidth", type=float, default=0.08)
    p.add_argument("--affine-jitter", type=float, default=0.06)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="volume to fixed-size region surfaces")
    p.add_argument("--volume", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-points", type=int, default=1100)
    p.add_argument("--target-simplices", type=int, default=2000)
    p.add_argument("--smooth-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-label", type=int, action="append", default=[])
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the velocity estimator")
    p.add_argument("--data", required=True,
                   help="directory of per-subject surface directories")
    p.add_argument("--out", required=True)
    p.add_argument("--val-subjects", type=int, default=2)
    p.add_argument("--pairs-per-epoch", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="two volumes to a transform chain")
    p.add_argument("--moving", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--smooth-iters", type=int, default=30)
    p.add_argument("--skip-label", type=int, action="append", default=[])
    _add_train_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("apply", help="apply a chain to a volume or surface")
    p.add_argument("--chain", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--volume")
    p.add_argument("--surface")
    p.add_argument("--reference-grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("evaluate", help="Jaccard + interface distances + memory")
    p.add_argument("--moving", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--out", required=True, help="CSV path; a PNG goes next to it")
    p.add_argument("--smooth-iters", type=int, default=30)
    p.add_argument("--skip-label", type=int, action="append", default=[])
    _add_train_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("invert", help="invert a transform chain")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
