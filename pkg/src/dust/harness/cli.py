"""Command-line entry point: ``dust <subcommand> [--config c.json] [--set a.b=v ...]``.

Exit codes: 0 success, 1 validation / usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..rng import SeededRng
from ..sampler import sample_joint
from ..world import Dataset, World
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .experiments import (GRADCHECK_MODEL, ablation_matrix, evaluate, make_dataset,
                          pretrain_then_finetune, scaling_sweep, summarize_ablation, gradcheck)
from .train import MetricsRecord, MetricsWriter, TrainingDiverged, train

log = logging.getLogger("dust")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config with sections world/model/train/sampler/loss")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for this command's randomness")


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _config(args, seed_key: str | None = None) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None and seed_key:
        overrides.append(f"{seed_key}={args.seed}")
    return load_config(args.config, overrides)


def _checkpoint_config(args, ckpt: Checkpoint, seed_key: str | None = None) -> ExperimentConfig:
    """Checkpoint config with file / --set overrides; model and world must not change."""
    d = ckpt.config.to_dict()
    if args.config:
        for sec, vals in load_config(args.config).to_dict().items():
            if sec in ("sampler", "train", "loss"):
                d[sec] = vals
    overrides = list(args.overrides)
    if args.seed is not None and seed_key:
        overrides.append(f"{seed_key}={args.seed}")
    cfg = ExperimentConfig.from_dict(apply_overrides(d, overrides))
    for sec in ("model", "world"):
        if getattr(cfg, sec).to_dict() != getattr(ckpt.config, sec).to_dict():
            raise ConfigError(f"{sec} config cannot differ from the checkpoint's")
    return cfg


def _dataset(path, cfg: ExperimentConfig, variant: str = "full") -> Dataset:
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"dataset file not found: {p}")
        return Dataset.load(p)
    return make_dataset(cfg, variant)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    cfg = _config(args, "train.data_seed")
    ds = make_dataset(cfg, args.variant, args.episodes)
    ds.save(args.out)
    _print({"path": str(args.out), "variant": ds.variant, "episodes": len(ds.episodes),
            "tuples": int(ds.tuples()["state"].shape[0])})


def cmd_train(args):
    cfg = _config(args, "train.seed")
    data = _dataset(args.data, cfg, "action_free" if cfg.loss.loss_mode == "wm_only" else "full")
    metrics = MetricsWriter(args.metrics)
    init = Checkpoint.load(args.init, expect_model=cfg.model).params if args.init else None
    try:
        res = train(cfg, data, metrics, init_params=init)
    except TrainingDiverged as e:
        if args.out:
            e.last_good.save(args.out + ".last_good")
        raise
    finally:
        metrics.close()
    res.checkpoint.save(args.out)
    last = res.metrics[-1]
    _print({"checkpoint": args.out, "steps": cfg.train.steps, "final_L_joint": last.L_joint,
            "final_L_A": last.L_A, "final_L_WM": last.L_WM})


def cmd_pretrain_finetune(args):
    fine = _config(args, "train.seed")
    pre_steps = args.pretrain_steps or fine.train.steps
    pre = fine.replace(loss={"loss_mode": "wm_only"}, train={"steps": pre_steps})
    fine = fine.replace(loss={"loss_mode": "full"})
    pre_data = _dataset(args.pretrain_data, pre, "action_free")
    fine_data = _dataset(args.finetune_data, fine, "full")
    metrics = MetricsWriter(args.metrics)
    try:
        pre_res, fine_res = pretrain_then_finetune(pre, fine, pre_data, fine_data, metrics)
    finally:
        metrics.close()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pre_res.checkpoint.save(out / "pretrain.ckpt")
    fine_res.checkpoint.save(out / "finetune.ckpt")
    _print({"pretrain": str(out / "pretrain.ckpt"), "finetune": str(out / "finetune.ckpt"),
            "pretrain_steps": pre_steps, "finetune_steps": fine.train.steps})


def cmd_sample(args):
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    world = World(cfg.world)
    pos = np.asarray(args.position, dtype=np.float64).reshape(1, 2)
    ctx = world.make_context(pos, np.asarray([args.instruction]))
    seed = 0 if args.seed is None else args.seed
    A, O, trace = sample_joint(ckpt.model(), ctx, pos, [SeededRng(seed, (0x534D,))], cfg.sampler)
    _print({"actions": A[0].tolist(), "predicted_future": O[0].tolist(),
            "action_updates_at": trace.action_steps(), "n_model_calls": len(trace.records)})


def cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt, "train.eval_seed")
    n = args.episodes or cfg.train.eval_episodes
    res = evaluate(ckpt.model(), cfg.world, cfg.sampler, n, cfg.train.eval_seed)
    out = {"success_rate": res.success_rate, "wm_embedding_mse": res.wm_embedding_mse,
           "episodes": n, "N_A": cfg.sampler.n_a, "N_o": cfg.sampler.n_o,
           "mode": cfg.sampler.mode, "nonfinite_episodes": int(res.failed_nonfinite.sum())}
    if args.metrics:
        w = MetricsWriter(args.metrics)
        w.write(MetricsRecord(step=ckpt.step, L_joint=None, L_A=None, L_WM=None,
                              learning_rate=None, grad_norm=None, tau_a_mean=None,
                              tau_o_mean=None, tau_equal=None, wall_ms=None,
                              stage="eval", success_rate=res.success_rate,
                              wm_embedding_mse=res.wm_embedding_mse, N_o=cfg.sampler.n_o))
        w.close()
    _print(out)


def cmd_sweep(args):
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt, "train.eval_seed")
    n_o = [int(x) for x in args.n_o.split(",")]
    n = args.episodes or cfg.train.eval_episodes
    modes = ["async", "sync"] if args.mode == "both" else [args.mode]
    rows = []
    for mode in modes:
        rows += scaling_sweep(ckpt.model(), cfg.world, n_o, mode, n, cfg.train.eval_seed,
                              n_a=args.n_a, tau_conditioning=cfg.sampler.tau_conditioning)
    _print([r.as_dict() for r in rows])


def cmd_ablate(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    data = _dataset(args.data, cfg)
    rows = ablation_matrix(cfg, data, seeds)
    summary = summarize_ablation(rows)
    _print({"cells": [r.as_dict() for r in rows],
            "mean_success": {f"{a}/{n}": v for (a, n), v in summary.items()}})


def cmd_gradcheck(args):
    if args.config or args.overrides:
        cfg = load_config(args.config, args.overrides)
        model_cfg, loss_cfg = cfg.model, cfg.loss
    else:
        from ..flow import LossConfig
        from ..model import ModelConfig
        model_cfg, loss_cfg = ModelConfig(**GRADCHECK_MODEL), LossConfig()
    seed = 0 if args.seed is None else args.seed
    err = gradcheck(seed, model_cfg=model_cfg, loss_cfg=loss_cfg)
    print(f"max relative error {err:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return 0 if err <= GRADCHECK_TOL else 2


def cmd_export_json(args):
    p = Path(args.data)
    if not p.is_file():
        raise ConfigError(f"dataset file not found: {p}")
    text = json.dumps(Dataset.load(p).to_json(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dust", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate an expert dataset")
    _common(p)
    p.add_argument("--variant", choices=["full", "action_free"], default="full")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", help="dataset file (generated from the config if omitted)")
    p.add_argument("--init", help="initialize parameters from a checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="JSON-lines metrics path (appended)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain-finetune", help="world-model-only pretraining, then finetuning")
    _common(p)
    p.add_argument("--pretrain-data", help="action-free dataset")
    p.add_argument("--finetune-data", help="full dataset")
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_pretrain_finetune)

    p = sub.add_parser("sample", help="draw one joint sample from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instruction", type=int, default=0)
    p.add_argument("--position", type=float, nargs=2, default=[0.0, 0.0])
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="closed-loop success rate")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="test-time scaling over N_o")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-o", default="4,16,32,64")
    p.add_argument("--n-a", type=int, default=4)
    p.add_argument("--mode", choices=["async", "sync", "both"], default="both")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="architecture x noise-coupling matrix")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="reverse mode vs central differences")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", parser_class=_Parser)
    q = dsub.add_parser("export-json", help="human-readable JSON mirror of a dataset file")
    q.add_argument("--data", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_export_json)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("no subcommand given; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args) or 0
    except (UsageError, ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, T.NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
