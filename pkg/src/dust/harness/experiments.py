"""Evaluation, transfer pipeline, test-time scaling sweep, ablation matrix, gradient check."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..flow import LossConfig, TimestepSampler, joint_loss, make_noised_batch, velocity_targets
from ..model import DustModel, ModelConfig, ParamStore, forward
from ..rng import SeededRng
from ..sampler import SamplerConfig, model_policy, sample_joint, update_schedule
from ..world import (Dataset, RolloutResult, WorldConfig, eval_starts, generate_dataset,
                     rollout)
from .config import ConfigError, ExperimentConfig
from .train import MetricsWriter, train


def make_dataset(cfg: ExperimentConfig, variant: str = "full", n_episodes=None,
                 seed=None) -> Dataset:
    n = cfg.train.data_episodes if n_episodes is None else n_episodes
    s = cfg.train.data_seed if seed is None else seed
    return generate_dataset(SeededRng(s, (0x4441,)), cfg.world, n, variant)


EVAL_BLOCK = 50


def eval_threads() -> int:
    """``DUST_THREADS`` (0 or unset = serial)."""
    raw = os.environ.get("DUST_THREADS", "0") or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DUST_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"DUST_THREADS must be >= 0, got {n}")
    return n


def evaluate(model: DustModel, world: WorldConfig, sampler: SamplerConfig, n_episodes: int,
             seed: int, threads: int | None = None) -> RolloutResult:
    """Closed-loop success over ``n_episodes`` seeded starts (identical for equal ``seed``).

    Episodes run in fixed blocks of :data:`EVAL_BLOCK`; ``threads`` (default
    ``DUST_THREADS``) only decides how many blocks run concurrently, so the
    result does not depend on it.
    """
    rng = SeededRng(seed, (0x4556,))
    ins, starts = eval_starts(rng, world, n_episodes)
    policy = model_policy(model, sampler)
    blocks = [np.arange(lo, min(lo + EVAL_BLOCK, n_episodes))
              for lo in range(0, n_episodes, EVAL_BLOCK)]

    def run(ids):
        return rollout(policy, world, rng, len(ids), (ins[ids], starts[ids]), episode_ids=ids)

    threads = eval_threads() if threads is None else threads
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(ids) for ids in blocks]
    return merge_rollouts(parts)


def merge_rollouts(parts: list[RolloutResult]) -> RolloutResult:
    if len(parts) == 1:
        return parts[0]
    succ = np.concatenate([p.successes for p in parts])
    n_replans = {len(p.wm_sq_err) for p in parts}
    wm = ([np.concatenate([p.wm_sq_err[r] for p in parts]) for r in range(n_replans.pop())]
          if len(n_replans) == 1 else [e for p in parts for e in p.wm_sq_err])
    logs, off = [], 0
    for p in parts:
        logs += [{**e, "episode": e["episode"] + off} for e in p.logs]
        off += len(p.successes)
    return RolloutResult(success_rate=float(succ.mean()), successes=succ,
                         final_distance=np.concatenate([p.final_distance for p in parts]),
                         instructions=np.concatenate([p.instructions for p in parts]),
                         wm_sq_err=wm,
                         failed_nonfinite=np.concatenate([p.failed_nonfinite for p in parts]),
                         logs=logs)


# ---------------------------------------------------------------- transfer

def pretrain_then_finetune(pre_cfg: ExperimentConfig, fine_cfg: ExperimentConfig,
                           pre_data: Dataset, fine_data: Dataset, metrics: MetricsWriter | None = None,
                           grad_hook=None):
    """World-model-only pretraining, then full finetuning from its parameters.

    Returns ``(pre_result, fine_result)``; metrics are tagged ``pretrain``
    and ``finetune`` and the finetune step counter restarts at 0.  AdamW
    moments are reset unless ``train.reset_optimizer_on_finetune`` is false.
    """
    if pre_cfg.loss.loss_mode != "wm_only":
        raise ConfigError("pretraining stage needs loss.loss_mode = 'wm_only'")
    if fine_cfg.loss.loss_mode != "full":
        raise ConfigError("finetuning stage needs loss.loss_mode = 'full'")
    if pre_cfg.model.to_dict() != fine_cfg.model.to_dict():
        raise ConfigError("pretrain and finetune model configs differ")
    metrics = metrics or MetricsWriter()
    pre = train(pre_cfg, pre_data, metrics, stage="pretrain", grad_hook=grad_hook)
    keep = None if fine_cfg.train.reset_optimizer_on_finetune else pre.checkpoint
    fine = train(fine_cfg, fine_data, metrics, init_params=pre.checkpoint.params,
                 stage="finetune", init_opt=keep)
    return pre, fine


# ---------------------------------------------------------------- one-point oracle

@dataclass
class FixedPointResult:
    action_l2: list          # one entry per sampling seed
    future_l2: list
    final_loss: float
    target_action: np.ndarray
    target_future: np.ndarray
    sampled_action: np.ndarray   # (n_seeds, k, d_A)
    sampled_future: np.ndarray


def fixed_point_experiment(cfg: ExperimentConfig, n_steps: int = 64,
                           sample_seeds=(0,)) -> FixedPointResult:
    """Train on a single (context, state, A*, o*) tuple and sample it back.

    For a one-point data distribution the optimal velocity field transports
    every noise draw to the point, so Euler sampling with ``n_steps`` on a
    well-fit model must return ``(A*, o*)`` from each seed's noise.
    ``cfg.world.horizon`` must be 1 so the generated episode holds exactly
    one tuple.
    """
    if cfg.world.horizon != 1:
        raise ConfigError("the one-point experiment needs world.horizon = 1")
    data = make_dataset(cfg, "full", n_episodes=1)
    tup = data.tuples()
    res = train(cfg, data)
    model = res.checkpoint.model()
    seeds = list(sample_seeds)
    n = len(seeds)
    sc = SamplerConfig(n_a=n_steps, n_o=n_steps, mode="sync")
    A, O, _ = sample_joint(model, np.repeat(tup["context"], n, 0), np.repeat(tup["state"], n, 0),
                           [SeededRng(s, (0x4650,)) for s in seeds], sc)
    return FixedPointResult(
        action_l2=[float(x) for x in np.linalg.norm((A - tup["action"]).reshape(n, -1), axis=1)],
        future_l2=[float(x) for x in np.linalg.norm((O - tup["future"]).reshape(n, -1), axis=1)],
        final_loss=res.metrics[-1].L_joint, target_action=tup["action"][0],
        target_future=tup["future"][0], sampled_action=A, sampled_future=O)


# ---------------------------------------------------------------- test-time scaling

@dataclass
class SweepRow:
    mode: str
    n_a: int
    n_o: int
    success_rate: float
    wm_embedding_mse: float
    schedule: list
    final_distance: np.ndarray

    def as_dict(self):
        return {"mode": self.mode, "N_A": self.n_a, "N_o": self.n_o,
                "success_rate": self.success_rate, "wm_embedding_mse": self.wm_embedding_mse}


def scaling_sweep(model: DustModel, world: WorldConfig, n_o_list, mode: str = "async",
                  n_episodes: int = 200, seed: int = 10_000, n_a: int = 4,
                  tau_conditioning: str = "actual") -> list[SweepRow]:
    """One closed-loop evaluation per N_o with identical episode seeds.

    async: N_A fixed at ``n_a`` and N_o swept; sync: N_A = N_o.
    """
    cfgs = []
    for n_o in n_o_list:
        try:
            cfgs.append(SamplerConfig(n_a=n_a if mode == "async" else n_o, n_o=n_o, mode=mode,
                                      tau_conditioning=tau_conditioning))
        except ValueError as e:
            raise ConfigError(f"sweep entry N_o={n_o}: {e}") from None
    rows = []
    for sc in cfgs:
        res = evaluate(model, world, sc, n_episodes, seed)
        rows.append(SweepRow(mode, sc.n_a, sc.n_o, res.success_rate, res.wm_embedding_mse,
                             update_schedule(sc), res.final_distance))
    return rows


# ---------------------------------------------------------------- ablation

ABLATION_CELLS = [("single_stream_dit", "joint"), ("single_stream_dit", "decoupled"),
                  ("mmdit", "joint"), ("mmdit", "decoupled")]


@dataclass
class AblationRow:
    arch_mode: str
    noise_mode: str
    seed: int
    success_rate: float
    final_L_A: float
    final_L_WM: float
    all_tau_equal: bool

    def as_dict(self):
        return dict(self.__dict__)


def ablation_cell_config(base: ExperimentConfig, arch: str, noise: str, seed: int):
    return base.replace(model={"arch_mode": arch}, loss={"noise_mode": noise},
                        train={"seed": seed})


def run_ablation_cell(base: ExperimentConfig, dataset: Dataset, arch: str, noise: str,
                      seed: int, tail: int = 100) -> AblationRow:
    cfg = ablation_cell_config(base, arch, noise, seed)
    res = train(cfg, dataset)
    model = res.checkpoint.model()
    ev = evaluate(model, cfg.world, cfg.sampler, cfg.train.eval_episodes, cfg.train.eval_seed)
    recs = res.metrics[-tail:]
    return AblationRow(arch, noise, seed, ev.success_rate,
                       float(np.mean([r.L_A for r in recs])), float(np.mean([r.L_WM for r in recs])),
                       all(r.tau_equal for r in res.metrics) if noise == "joint" else False)


def ablation_matrix(base: ExperimentConfig, dataset: Dataset, seeds=(0,)) -> list[AblationRow]:
    """The four {arch} x {noise} cells at matched seeds and budgets."""
    return [run_ablation_cell(base, dataset, arch, noise, s)
            for arch, noise in ABLATION_CELLS for s in seeds]


def summarize_ablation(rows: list[AblationRow]) -> dict:
    out = {}
    for arch, noise in ABLATION_CELLS:
        cell = [r.success_rate for r in rows if r.arch_mode == arch and r.noise_mode == noise]
        if cell:
            out[(arch, noise)] = float(np.mean(cell))
    return out


# ---------------------------------------------------------------- gradient oracle

# desk widths, two shared blocks and one tail block per stream
GRADCHECK_MODEL = dict(n_mmdit=2, n_dit=1)


def random_params(cfg: ModelConfig, rng: SeededRng) -> ParamStore:
    """Every tensor drawn at unit-gain scale: ``N(0, 1/fan_in)`` weights, ``N(0, 0.1^2)`` biases.

    Unlike the training init nothing is zero, so every path carries gradient.
    """
    params = ParamStore(cfg)
    for name, shape in params.layout:
        std = 0.1 if name.endswith(".b") else 1.0 / np.sqrt(shape[0])
        params[name][...] = std * rng.normal(shape)
    return params


def gradcheck(seed: int, coords_per_param: int = 3, batch: int = 2, h: float = 1e-5,
              model_cfg: ModelConfig | None = None, loss_cfg: LossConfig | None = None) -> float:
    """Max relative error between reverse-mode and central differences.

    Parameters come from :func:`random_params` (zero-initialized
    modulation/decoder layers would otherwise hide most paths);
    ``coords_per_param`` coordinates of
    every parameter tensor are checked.
    """
    cfg = model_cfg or ModelConfig(**GRADCHECK_MODEL)
    loss_cfg = loss_cfg or LossConfig()
    rng = SeededRng(seed, (0x4743,))
    params = random_params(cfg, rng)
    nb = make_noised_batch(rng, TimestepSampler(), rng.normal((batch, cfg.n_ctx, cfg.d_model)),
                           rng.normal((batch, cfg.d_s)), rng.normal((batch, cfg.k, cfg.d_A)),
                           rng.normal((batch, cfg.m, cfg.d_o)))
    targets = velocity_targets(nb)

    def f(views):
        P = {n: T.Tensor(v) for n, v in views.items()}
        va, vo = forward(P, cfg, nb.context, nb.state, nb.noisy_action, nb.noisy_future,
                         nb.tau_a, nb.tau_o)
        return joint_loss(va, vo, targets, loss_cfg)[0].item()

    with T.recording() as tape:
        P = params.watch(tape)
        va, vo = forward(P, cfg, nb.context, nb.state, nb.noisy_action, nb.noisy_future,
                         nb.tau_a, nb.tau_o)
        loss = joint_loss(va, vo, targets, loss_cfg)[0]
    auto = T.gradients(loss, P)
    coords = {n: rng.choice(v.size, min(coords_per_param, v.size), replace=False)
              for n, v in params.views.items()}
    fd = T.finite_diff(f, params.views, h=h, coords=coords)
    worst = 0.0
    for n, idx in coords.items():
        worst = max(worst, T.relative_error(auto[n].reshape(-1)[idx], fd[n].reshape(-1)[idx]))
    return worst
