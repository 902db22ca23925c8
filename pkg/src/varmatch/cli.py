"""Experiment runner: dataset generation, training, evaluation, gradient
surfaces and ablation sweeps, all seeded and config-driven.

    varmatch gen     --out data --seed 0
    varmatch train   --dataset data/train.jsonl --eval-dataset data/eval.jsonl --out run
    varmatch eval    --checkpoint run/checkpoint.json --dataset data/eval.jsonl --out run
    varmatch gradmap --sigmas 0 0.05 0.1 0.2 --out surfaces
    varmatch sweep   --param alpha --values 0 1e-3 1e-2 --out sweeps

Every command is a pure function of (config file, flags, seed): re-running
writes byte-identical files, except the wall-time column of sweep.csv, which
measures real elapsed time.  Exit codes: 0 success, 1 usage or config error,
2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .config import (
    ConfigError,
    anchor_grid,
    apply_overrides,
    config_hash,
    load_config,
    scene_config,
    train_config,
)
from .distributions import TAG_GENERIC, philox_generator
from .estimators import expected_iou_surface, kink_derivative_jump
from .evaluation import curve_to_csv, infer, log_average_miss_rate, occlusion_sliced_mr
from .geometry import FA, FCOS
from .model import LINEAR, TABLE, ProposalModel
from .scenes import BANDS, OcclusionInfeasibleError, generate_scene, load_dataset, save_dataset
from .training import (
    NonFiniteLossError,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

SURFACE_AXES = {
    FA: (("x", -1.0, 1.0, 41), ("w", 0.2, 2.2, 41)),
    FCOS: (("r", 0.1, 1.3, 25), ("l", 0.1, 1.3, 25)),
}

BAND_ORDER = ("bare", "partial", "heavy")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with flat dotted keys")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (env VARMATCH_THREADS)")

    parser = _Parser(prog="varmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--band", choices=["mixed", "bare", "partial", "heavy"])
    gen.add_argument("--canvas", nargs=2, type=float, metavar=("W", "H"))
    gen.add_argument("--train-count", type=int)
    gen.add_argument("--eval-count", type=int)

    tr = sub.add_parser("train", parents=[common], help="train a proposal model")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--eval-dataset")
    tr.add_argument("--backend", choices=[TABLE, LINEAR])
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--samples", type=int)
    tr.add_argument("--bag-size", type=int)
    tr.add_argument("--sigma-clamp-min", type=float)
    tr.add_argument("--sigma-clamp-max", type=float)
    tr.add_argument("--resume", help="checkpoint to continue from")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)

    gm = sub.add_parser("gradmap", parents=[common], help="export expected-IoU surfaces")
    gm.add_argument("--kind", choices=[FA, FCOS], default=FA)
    gm.add_argument("--sigmas", nargs="+", type=float, default=[0.0, 0.05, 0.1, 0.2])
    gm.add_argument("--samples", type=int)

    sw = sub.add_parser("sweep", parents=[common], help="train+eval over a parameter range")
    sw.add_argument("--param", choices=["alpha", "samples", "bagsize"], required=True)
    sw.add_argument("--values", nargs="+", type=float, required=True)
    sw.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    sw.add_argument("--dataset")
    sw.add_argument("--eval-dataset")
    return parser


_FLAG_KEYS = {
    "seed": "seed",
    "threads": "threads",
    "out": "out",
    "band": "scene.band",
    "train_count": "scene.train_count",
    "eval_count": "scene.eval_count",
    "backend": "train.backend",
    "alpha": "train.alpha",
    "lr": "train.lr",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "samples": "train.samples",
    "bag_size": "train.bag_size",
    "sigma_clamp_min": "train.log_sigma_min",
    "sigma_clamp_max": "train.log_sigma_max",
}


def _resolve_config(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "canvas", None) is not None:
        overrides["scene.canvas_w"] = args.canvas[0]
        overrides["scene.canvas_h"] = args.canvas[1]
    if args.command == "gradmap" and args.samples is not None:
        overrides["gradmap.samples"] = args.samples
        overrides.pop("train.samples", None)
    apply_overrides(cfg, overrides)
    if getattr(args, "threads", None) is None and "VARMATCH_THREADS" in os.environ:
        try:
            cfg["threads"] = int(os.environ["VARMATCH_THREADS"])
        except ValueError as exc:
            raise ConfigError(f"bad VARMATCH_THREADS: {os.environ['VARMATCH_THREADS']!r}") from exc
    return cfg


def _outdir(cfg) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _record_config(out, cfg):
    _write_json(os.path.join(out, "config.json"), {"config": cfg, "config_hash": config_hash(cfg)})


# ---------------------------------------------------------------------------
# gen


def _band_counts(cfg, n) -> dict:
    if cfg["scene.band"] != "mixed":
        return {cfg["scene.band"]: n}
    fracs = np.array([cfg[f"scene.frac_{name}"] for name in BAND_ORDER], dtype=float)
    if fracs.sum() <= 0:
        raise ConfigError("band fractions must sum to a positive value")
    fracs = fracs / fracs.sum()
    counts = np.floor(fracs * n).astype(int)
    remainders = fracs * n - counts
    while counts.sum() < n:
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    return {name: int(c) for name, c in zip(BAND_ORDER, counts) if c > 0}


def generate_split(cfg, count: int, split_index: int):
    """Deterministic list of scenes for one dataset split."""
    rng = philox_generator(cfg["seed"], TAG_GENERIC, (split_index,))
    names = [name for name, c in _band_counts(cfg, count).items() for _ in range(c)]
    rng.shuffle(names)
    seeds = rng.integers(0, 2**63, size=count)
    scenes = []
    for i, (name, sd) in enumerate(zip(names, seeds)):
        scene = generate_scene(scene_config(cfg, BANDS[name]), int(sd))
        scene.scene_id = i
        scenes.append(scene)
    return scenes, names


def cmd_gen(args, cfg) -> int:
    out = _outdir(cfg)
    train_scenes, train_bands = generate_split(cfg, cfg["scene.train_count"], 0)
    eval_scenes, eval_bands = generate_split(cfg, cfg["scene.eval_count"], 1)
    save_dataset(train_scenes, os.path.join(out, "train.jsonl"))
    save_dataset(eval_scenes, os.path.join(out, "eval.jsonl"))
    _record_config(out, cfg)
    histogram = {name: train_bands.count(name) + eval_bands.count(name) for name in BAND_ORDER}
    total = len(train_scenes) + len(eval_scenes)
    print(f"wrote {total} scenes ({len(train_scenes)} train + {len(eval_scenes)} eval) to {out}")
    print("band histogram: " + ", ".join(f"{k}={v}" for k, v in histogram.items() if v))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _run_training(cfg, dataset_path, eval_dataset_path, resume=None, quiet=False):
    tc = train_config(cfg)
    grid = anchor_grid(cfg)
    scenes = load_dataset(dataset_path)
    if not scenes:
        raise ConfigError(f"empty dataset {dataset_path}")
    eval_scenes = load_dataset(eval_dataset_path) if eval_dataset_path else None

    if cfg["train.backend"] == TABLE:
        model = ProposalModel.table(len(scenes), len(grid))
        if eval_scenes and not quiet:
            print("note: table backend cannot score held-out scenes; evaluating on train split", file=sys.stderr)
        eval_set = scenes
    else:
        model = ProposalModel.linear(cfg["scene.patch"], len(grid))
        eval_set = eval_scenes

    velocity = np.zeros_like(model.params)
    start_epoch = 0
    if resume:
        model, velocity, start_epoch, ck_hash = load_checkpoint(resume)
        if ck_hash and ck_hash != config_hash(cfg):
            print(f"warning: checkpoint config hash {ck_hash} != current {config_hash(cfg)}", file=sys.stderr)
    log = train(model, scenes, grid, tc, eval_scenes=eval_set, start_epoch=start_epoch, velocity=velocity)
    return model, velocity, log, tc


def _write_metrics_csv(path, log):
    with open(path, "w") as fh:
        fh.write("epoch,loss,log_pos,log_neg,kl,mean_sigma,fg_sigma,bg_sigma,eval_mr\n")
        for e in log.epochs:
            fh.write(
                f"{e.epoch},{e.loss!r},{e.log_pos!r},{e.log_neg!r},{e.kl!r},"
                f"{e.mean_sigma!r},{e.fg_sigma!r},{e.bg_sigma!r},{e.eval_mr!r}\n"
            )


def cmd_train(args, cfg) -> int:
    out = _outdir(cfg)
    try:
        model, velocity, log, tc = _run_training(cfg, args.dataset, args.eval_dataset, resume=args.resume)
    except NonFiniteLossError as exc:
        _write_json(os.path.join(out, "diagnostic.json"), exc.diagnostics)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    h = config_hash(cfg)
    save_checkpoint(os.path.join(out, "checkpoint.json"), model, velocity, tc.epochs, config_hash=h)
    with open(os.path.join(out, "trainlog.json"), "w") as fh:
        fh.write(json.dumps({"config_hash": h, "log": log.to_dict()}, sort_keys=True))
        fh.write("\n")
    _write_metrics_csv(os.path.join(out, "metrics.csv"), log)
    _record_config(out, cfg)
    if log.epochs:
        last = log.epochs[-1]
        mr = f"{last.eval_mr:.4f}" if last.eval_mr >= 0 else "n/a"
        print(f"trained {tc.epochs} epochs: loss={last.loss:.5f} mean_sigma={last.mean_sigma:.4f} eval_mr={mr}")
    else:
        print("trained 0 epochs (nothing to do)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _evaluate_checkpoint(cfg, checkpoint_path, dataset_path):
    model, _, _, ck_hash = load_checkpoint(checkpoint_path)
    if ck_hash and ck_hash != config_hash(cfg):
        print(f"warning: checkpoint config hash {ck_hash} != current {config_hash(cfg)}", file=sys.stderr)
    scenes = load_dataset(dataset_path)
    grid = anchor_grid(cfg)
    clamp = (cfg["train.log_sigma_min"], cfg["train.log_sigma_max"])
    dets, gts, labels = [], [], []
    for scene in scenes:
        dets.append(
            infer(
                model,
                scene,
                grid,
                score_thresh=cfg["eval.score_thresh"],
                nms_iou=cfg["eval.nms_iou"],
                log_sigma_clamp=clamp,
            )
        )
        gts.append(scene.gt_boxes)
        labels.append(scene.occlusion_labels)
    report = log_average_miss_rate(dets, gts, match_iou=cfg["eval.match_iou"])
    bands = occlusion_sliced_mr(dets, gts, labels, match_iou=cfg["eval.match_iou"])
    return report, bands


def cmd_eval(args, cfg) -> int:
    out = _outdir(cfg)
    report, bands = _evaluate_checkpoint(cfg, args.checkpoint, args.dataset)
    payload = {
        "mr": report.mr,
        "ap": report.ap,
        "n_gts": report.n_gts,
        "n_detections": report.n_detections,
        "per_band": {
            name: {"mr": rep.mr, "ap": rep.ap, "n_gts": rep.n_gts} for name, rep in bands.items()
        },
        "config_hash": config_hash(cfg),
    }
    _write_json(os.path.join(out, "metrics.json"), payload)
    with open(os.path.join(out, "bands.csv"), "w") as fh:
        fh.write("band,mr,ap,n_gts\n")
        for name in BAND_ORDER:
            if name in bands:
                rep = bands[name]
                fh.write(f"{name},{rep.mr!r},{rep.ap!r},{rep.n_gts}\n")
    curve_to_csv(report, os.path.join(out, "curve.csv"))
    _record_config(out, cfg)
    band_text = ", ".join(f"{name}={bands[name].mr:.4f}" for name in BAND_ORDER if name in bands)
    print(f"mr={report.mr:.4f} ap={report.ap:.4f} ({band_text})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradmap


def cmd_gradmap(args, cfg) -> int:
    out = _outdir(cfg)
    axis1, axis2 = SURFACE_AXES[args.kind]
    jumps = []
    for sigma in args.sigmas:
        surface = expected_iou_surface(
            args.kind, axis1, axis2, sigma, n_samples=cfg["gradmap.samples"], seed=cfg["seed"]
        )
        path = os.path.join(out, f"surface_{args.kind}_sigma{sigma:g}.csv")
        surface.to_csv(path)
        jump = kink_derivative_jump(
            args.kind, sigma, n_samples=cfg["gradmap.jump_samples"], seed=cfg["seed"]
        )
        jumps.append(jump)
        print(f"sigma={sigma:g}: kink_jump={jump:.6f} surface={path}")
    if len(jumps) > 1:
        trend = "decreasing" if all(b < a for a, b in zip(jumps, jumps[1:])) else "NOT monotone"
        print(f"kink-jump trend across sigmas: {trend}")
    _record_config(out, cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


_SWEEP_KEYS = {"alpha": "train.alpha", "samples": "train.samples", "bagsize": "train.bag_size"}


def cmd_sweep(args, cfg) -> int:
    out = _outdir(cfg)
    key = _SWEEP_KEYS[args.param]
    rows = []
    for value in args.values:
        for seed in args.seeds:
            rcfg = dict(cfg)
            rcfg[key] = int(value) if args.param in ("samples", "bagsize") else value
            rcfg["seed"] = seed
            if args.param == "alpha" and value == 0.0:
                # alpha = 0 row doubles as the deterministic baseline: no KL
                # pull and point-mass sigma
                rcfg["train.log_sigma_min"] = -30.0
                rcfg["train.log_sigma_max"] = -30.0
            run_dir = os.path.join(out, f"{args.param}_{value:g}_seed{seed}")
            rcfg["out"] = run_dir
            os.makedirs(run_dir, exist_ok=True)
            if args.dataset:
                train_path, eval_path = args.dataset, args.eval_dataset
            else:
                train_scenes, _ = generate_split(rcfg, rcfg["scene.train_count"], 0)
                eval_scenes, _ = generate_split(rcfg, rcfg["scene.eval_count"], 1)
                train_path = os.path.join(run_dir, "train.jsonl")
                eval_path = os.path.join(run_dir, "eval.jsonl")
                save_dataset(train_scenes, train_path)
                save_dataset(eval_scenes, eval_path)
            t0 = time.perf_counter()
            model, velocity, log, tc = _run_training(rcfg, train_path, eval_path, quiet=True)
            wall = time.perf_counter() - t0
            save_checkpoint(
                os.path.join(run_dir, "checkpoint.json"),
                model,
                velocity,
                tc.epochs,
                config_hash=config_hash(rcfg),
            )
            _write_metrics_csv(os.path.join(run_dir, "metrics.csv"), log)
            mr = log.epochs[-1].eval_mr if log.epochs else 1.0
            rows.append((args.param, value, seed, mr, wall))
            print(f"{args.param}={value:g} seed={seed}: mr={mr:.4f} ({wall:.1f}s)")
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write("param,value,seed,mr,wall_time_s\n")
        for param, value, seed, mr, wall in rows:
            fh.write(f"{param},{value:g},{seed},{mr!r},{wall:.3f}\n")
    _record_config(out, cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
        handler = {
            "gen": cmd_gen,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradmap": cmd_gradmap,
            "sweep": cmd_sweep,
        }[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OcclusionInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
