"""``unsupmeta`` command line.

Subcommands: meta-train, rollout, baseline, filters, pca, info.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from .config import ConfigError, build_config, get_profile, load_config

logger = logging.getLogger("unsupmeta")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (may name a base profile)")
    p.add_argument("--profile", choices=("desk", "paper"), help="base profile (overrides the file's)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--deterministic", action="store_true", help="seeded scheduler for multi-worker runs")


def resolve_config(args):
    try:
        if args.config is not None:
            cfg = load_config(args.config, args.profile)
        else:
            cfg = build_config({}, args.profile or "desk")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except ConfigError as err:
        raise UsageError(f"invalid config: {err}") from None
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg


# ------------------------------------------------------------- meta-train


def cmd_meta_train(args) -> int:
    from .trainer import SequentialTrainer

    cfg = resolve_config(args)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, meta_steps=args.steps))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    every = args.checkpoint_every if args.checkpoint_every is not None else cfg.trainer.checkpoint_every

    if cfg.workers > 1:
        from .cluster import run_cluster

        mode = "deterministic" if cfg.deterministic else "free"
        result = run_cluster(cfg.workers, cfg, mode, n_applies=cfg.trainer.meta_steps, metrics_path=metrics)
        ckpt_io.save(out / "theta.smup", ckpt_io.theta_checkpoint(result.theta, cfg, {"applies": result.version}))
        print(json.dumps({"applies": result.version, "ledger": result.ledger}))
        return 0

    if args.resume is not None:
        trainer = ckpt_io.restore_trainer(args.resume)
        if trainer.cfg != cfg and args.config is not None:
            logger.warning("resuming with the checkpoint's own config")
        cfg = trainer.cfg
        if args.steps is not None:
            cfg = dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, meta_steps=args.steps))
            trainer.cfg = cfg
    else:
        trainer = SequentialTrainer(cfg)
        if metrics.exists():
            metrics.unlink()
    remaining = cfg.trainer.meta_steps - trainer.step
    save_ckpt = lambda t: ckpt_io.save(out / "checkpoint.smup", ckpt_io.trainer_checkpoint(t))
    trainer.run(max(0, remaining), metrics, save_ckpt, every)
    save_ckpt(trainer)
    ckpt_io.save(out / "theta.smup", ckpt_io.theta_checkpoint(trainer.theta, cfg, {"step": trainer.step}))
    print(json.dumps({"steps": trainer.step, "rejected": trainer.rejected, "skipped": trainer.adam.skipped}))
    return 0


# ---------------------------------------------------------------- rollout


def _task_from_args(args, cfg):
    from .tasks import TaskSpec, glyph_task, make_task, two_moons_task, idx_task

    if getattr(args, "task_spec", None):
        return make_task(TaskSpec.from_dict(json.loads(Path(args.task_spec).read_text())))
    seed = args.task_seed
    if args.task == "two_moons":
        return two_moons_task(cfg.tasks.moons_noise, seed)
    if args.task == "glyphs":
        return glyph_task(args.classes, cfg.tasks.glyph_grid, seed, noise_std=cfg.tasks.glyph_noise,
                          permute=args.permute)
    if args.task == "idx":
        if not (args.images and args.labels):
            raise UsageError("--task idx needs --images and --labels")
        return idx_task(args.images, args.labels, args.classes, seed, permute=args.permute)
    raise UsageError(f"unknown task {args.task!r}")


def _theta_for(args, cfg):
    from .update_rule import init_theta
    from .trainer import theta_seed

    if args.theta is not None:
        theta, tcfg, _ = ckpt_io.load_theta(args.theta)
        return theta, dataclasses.replace(cfg, rule=tcfg.rule, objective=tcfg.objective)
    return init_theta(cfg.rule, theta_seed(cfg.seed)), cfg


def _arch_for(args, task, cfg):
    from .base_model import ArchSpec

    hidden = tuple(int(v) for v in args.hidden.split(",")) if args.hidden else (32, 32)
    return ArchSpec((task.spec.input_dim,) + hidden + (cfg.arch.embed_dim,), args.activation)


def _task_args(p) -> None:
    p.add_argument("--task", default="two_moons", choices=("two_moons", "glyphs", "idx"))
    p.add_argument("--task-spec", help="JSON task spec (overrides --task)")
    p.add_argument("--task-seed", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--permute", action="store_true")
    p.add_argument("--images", type=Path, help="IDX image file for --task idx")
    p.add_argument("--labels", type=Path, help="IDX label file for --task idx")
    p.add_argument("--hidden", help="comma-separated hidden widths (default 32,32)")
    p.add_argument("--activation", default="relu")


def cmd_rollout(args) -> int:
    from .analysis import rollout, write_series_csv
    from .base_model import init_params

    cfg = resolve_config(args)
    theta, cfg = _theta_for(args, cfg)
    task = _task_from_args(args, cfg)
    params = init_params(_arch_for(args, task, cfg), [cfg.seed, 11])
    series, final = rollout(theta, params, task, args.steps, args.eval_every, cfg, seed=cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_series_csv(series, args.out / "rollout.csv")
    ckpt_io.save(args.out / "phi.smup", ckpt_io.Checkpoint(
        cfg.profile, {f"phi/{k}": v for k, v in final.arrays().items()}, cfg.to_dict(),
        {"arch": final.arch.to_dict(), "task": task.spec.to_dict(), "steps": args.steps}))
    last = series.rows[-1]
    print(json.dumps({"rows": len(series.rows), "final_accuracy": last["few_shot_accuracy"],
                      "final_meta_objective": last["meta_objective"]}))
    return 0


def cmd_baseline(args) -> int:
    from .analysis import supervised_baseline
    from .base_model import init_params

    cfg = resolve_config(args)
    task = _task_from_args(args, cfg)
    params = init_params(_arch_for(args, task, cfg), [cfg.seed, 11])
    res = supervised_baseline(task, params, args.labeled_per_class, args.train_steps, lr=args.lr,
                              seed=cfg.seed, n_test=args.n_test, shuffle_labels=args.shuffle_labels)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "baseline.json").write_text(json.dumps(res, indent=2))
    print(json.dumps({"accuracy": res["accuracy"], "final_loss": res["losses"][-1]}))
    return 0


def cmd_filters(args) -> int:
    from .analysis import extract_filters
    from .base_model import ArchSpec, BaseParams

    ck = ckpt_io.load(args.phi)
    arch = ArchSpec(tuple(ck.meta["arch"]["layer_sizes"]), ck.meta["arch"]["activation"])
    params = BaseParams.from_arrays(arch, {k[4:]: v for k, v in ck.arrays.items() if k.startswith("phi/")})
    perm = ck.meta.get("task", {}).get("permutation")
    grid = args.grid or ck.meta.get("task", {}).get("grid")
    files = extract_filters(params, args.out, layer=args.layer, permutation=perm, grid=grid)
    print(json.dumps({"filters": len(files) - 1, "dir": str(args.out)}))
    return 0


def cmd_pca(args) -> int:
    from .analysis import pca_variance, write_pca_csv

    data = np.loadtxt(args.embeddings, delimiter=",", ndmin=2) if args.embeddings.suffix == ".csv" \
        else np.load(args.embeddings)
    res = pca_variance(data)
    args.out.mkdir(parents=True, exist_ok=True)
    write_pca_csv(res, args.out / "pca.csv")
    print(json.dumps({"components": len(res["eigenvalues"]), "first": float(res["cumulative"][0])}))
    return 0


def cmd_info(args) -> int:
    from .update_rule import init_theta

    if args.checkpoint is not None:
        ck = ckpt_io.load(args.checkpoint)
        print(json.dumps({
            "profile": ck.profile,
            "arrays": {k: list(v.shape) for k, v in ck.arrays.items()},
            "meta_keys": sorted(ck.meta),
        }, indent=2))
        return 0
    cfg = resolve_config(args)
    theta = init_theta(cfg.rule, 0)
    print(json.dumps({"version": __version__, "config": cfg.to_dict(), "theta_size": theta.size()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unsupmeta", description="Meta-learned unsupervised update rules.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train the update rule")
    _common(p)
    p.add_argument("--steps", type=int, help="override the number of meta-steps")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", type=Path, help="trainer checkpoint to resume from")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("rollout", help="apply a rule to a fresh base model and track probe metrics")
    _common(p)
    _task_args(p)
    p.add_argument("--theta", type=Path, help="checkpoint with update-rule parameters (default: fresh init)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=100)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("baseline", help="supervised few-shot baseline")
    _common(p)
    _task_args(p)
    p.add_argument("--labeled-per-class", type=int, default=10)
    p.add_argument("--train-steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--shuffle-labels", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("filters", help="write first-layer receptive fields as PGM + CSV")
    p.add_argument("phi", type=Path, help="checkpoint written by rollout")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--grid", type=int)
    p.add_argument("--out", type=Path, default=Path("filters"))
    p.set_defaults(func=cmd_filters)

    p = sub.add_parser("pca", help="cumulative explained variance of embeddings")
    p.add_argument("embeddings", type=Path, help=".npy or comma-separated .csv matrix [n, dim]")
    p.add_argument("--out", type=Path, default=Path("out"))
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("info", help="show a config or checkpoint summary")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"unsupmeta {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
