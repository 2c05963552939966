"""The training loop: minibatch, per-modality noising, forward, joint loss, clip, AdamW."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as T
from ..flow import TimestepSampler, joint_loss, make_noised_batch, velocity_targets
from ..model import DustModel, ParamStore, forward
from ..rng import SeededRng
from ..world import Dataset
from .checkpoint import Checkpoint
from .config import ConfigError, ExperimentConfig
from .optim import AdamW, clip_grad_norm, lr_at

log = logging.getLogger(__name__)

TRAIN_STREAM = 0x5452


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: Checkpoint):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class MetricsRecord:
    step: int
    L_joint: float
    L_A: float
    L_WM: float
    learning_rate: float
    grad_norm: float
    tau_a_mean: float
    tau_o_mean: float
    tau_equal: bool
    wall_ms: float
    stage: str | None = None
    success_rate: float | None = None
    wm_embedding_mse: float | None = None
    N_o: int | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None},
                          sort_keys=True)


class MetricsWriter:
    """Append-only JSON-lines sink; ``path=None`` keeps records in memory only."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[MetricsRecord] = []
        self._fh = open(path, "a") if path is not None else None

    def write(self, rec: MetricsRecord):
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(rec.to_json() + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def check_compatible(dataset: Dataset, cfg: ExperimentConfig) -> None:
    if dataset.variant == "action_free" and cfg.loss.loss_mode != "wm_only":
        raise ConfigError("action-free datasets can only train with loss.loss_mode = 'wm_only'")
    if dataset.world.to_dict() != cfg.world.to_dict():
        raise ConfigError("dataset was generated under a different world config")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)


def batch_arrays(data: dict, idx: np.ndarray, cfg: ExperimentConfig):
    """Select rows; action-free data gets zero placeholder actions (pure noise in wm_only)."""
    ctx, st, fut = data["context"][idx], data["state"][idx], data["future"][idx]
    if "action" in data:
        act = data["action"][idx]
    else:
        act = np.zeros((len(idx), cfg.model.k, cfg.model.d_A))
    return ctx, st, act, fut


def loss_and_grads(params: ParamStore, cfg: ExperimentConfig, batch):
    """Tracked forward + backward; returns (L_joint, L_A, L_WM, name->grad)."""
    with T.recording() as tape, np.errstate(over="ignore", invalid="ignore"):
        P = params.watch(tape)
        v_a, v_o = forward(P, cfg.model, batch.context, batch.state, batch.noisy_action,
                           batch.noisy_future, batch.tau_a, batch.tau_o)
        total, l_a, l_wm = joint_loss(v_a, v_o, velocity_targets(batch), cfg.loss)
    with np.errstate(over="ignore", invalid="ignore"):
        grads = T.gradients(total, P)
    return total.item(), l_a.item(), l_wm.item(), grads


def train(cfg: ExperimentConfig, dataset: Dataset, metrics: MetricsWriter | None = None,
          init_params: np.ndarray | None = None, stage: str | None = None,
          grad_hook=None, sampler: TimestepSampler | None = None,
          init_opt: Checkpoint | None = None) -> TrainResult:
    """Run ``cfg.train.steps`` updates and return the final checkpoint.

    ``init_params`` replaces the seeded initialization; ``init_opt`` carries
    AdamW moments over from an earlier checkpoint.
    ``grad_hook(step, grads_by_name)`` sees the raw gradients each step.
    A non-finite loss raises :class:`TrainingDiverged` carrying the
    checkpoint from before the failing step.
    """
    check_compatible(dataset, cfg)
    tc = cfg.train
    data = dataset.tuples()
    n = data["state"].shape[0]
    model = DustModel.create(cfg.model, tc.seed)
    params = model.params
    if init_params is not None:
        params.flat[...] = init_params
    opt = AdamW(params.size, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay, params.decay_mask)
    if init_opt is not None:
        opt.m[...], opt.v[...], opt.t = init_opt.opt_m, init_opt.opt_v, init_opt.opt_t
    rng = SeededRng(tc.seed, (TRAIN_STREAM,))
    sampler = sampler or cfg.loss.timestep_sampler()
    metrics = metrics or MetricsWriter()

    def snapshot(step):
        return Checkpoint(config=cfg, params=params.flat.copy(), opt_m=opt.m.copy(),
                          opt_v=opt.v.copy(), opt_t=opt.t, step=step, rng_state=rng.get_state(),
                          extra={"stage": stage} if stage else {})

    for step in range(tc.steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, n, tc.batch_size)
        ctx, st, act, fut = batch_arrays(data, idx, cfg)
        batch = make_noised_batch(rng, sampler, ctx, st, act, fut, cfg.loss.noise_mode,
                                  cfg.loss.loss_mode)
        try:
            l_joint, l_a, l_wm, grads = loss_and_grads(params, cfg, batch)
        except T.NonFiniteError as e:
            raise TrainingDiverged(f"non-finite value at step {step}: {e}", snapshot(step)) from e
        if not np.isfinite(l_joint):
            raise TrainingDiverged(f"non-finite loss at step {step}", snapshot(step))
        if grad_hook is not None:
            grad_hook(step, grads)
        g, gnorm = clip_grad_norm(params.flatten_grads(grads), tc.grad_clip_norm)
        if not np.isfinite(gnorm):
            raise TrainingDiverged(f"non-finite gradient at step {step}", snapshot(step))
        lr = lr_at(step, tc.lr, tc.steps, tc.warmup_steps)
        opt.step(params.flat, g, lr)
        metrics.write(MetricsRecord(
            step=step, L_joint=l_joint, L_A=l_a, L_WM=l_wm, learning_rate=lr, grad_norm=gnorm,
            tau_a_mean=float(batch.tau_a.mean()), tau_o_mean=float(batch.tau_o.mean()),
            tau_equal=bool(np.array_equal(batch.tau_a, batch.tau_o)),
            wall_ms=1000.0 * (time.perf_counter() - t0), stage=stage))
        if step % 500 == 0:
            log.info("step %d L_joint=%.4f L_A=%.4f L_WM=%.4f lr=%.2e", step, l_joint, l_a,
                     l_wm, lr)
    return TrainResult(snapshot(tc.steps), metrics.records)
