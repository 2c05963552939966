"""Forward-Euler joint sampling of action chunks and future embeddings.

Asynchronous mode runs ``n_o`` global steps of size ``1/n_o``.  The vision
tokens move every step; the action tokens move once per block of
``q = n_o / n_a`` steps, at the block's last step, with stride ``1/n_a``.
Each global step makes one network call, evaluated at the current state
and noise levels, and both updates reuse that call's velocities.

Noise levels are integer step counts divided by the step total, so both
modalities end at exactly ``tau = 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .rng import SeededRng


@dataclass
class SamplerConfig:
    n_a: int = 4
    n_o: int = 4
    mode: str = "async"                 # async | sync
    tau_conditioning: str = "actual"    # actual | pseudocode

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_a < 1 or self.n_o < 1:
            raise ValueError(f"step counts must be >= 1, got n_a={self.n_a}, n_o={self.n_o}")
        if self.mode == "async":
            if self.n_o % self.n_a:
                raise ValueError(f"async sampling needs n_o divisible by n_a "
                                 f"(got n_o={self.n_o}, n_a={self.n_a})")
        elif self.mode == "sync":
            if self.n_o != self.n_a:
                raise ValueError(f"sync sampling needs n_o == n_a (got {self.n_o}, {self.n_a})")
        else:
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.tau_conditioning not in ("actual", "pseudocode"):
            raise ValueError(f"unknown tau_conditioning {self.tau_conditioning!r}")

    @property
    def q(self) -> int:
        return self.n_o // self.n_a

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int              # 1-indexed global step
    tau_a: float           # action noise level fed to the network
    tau_o: float
    updates_action: bool
    updates_vision: bool


@dataclass
class SampleTrace:
    records: list = field(default_factory=list)
    snapshots: list | None = None

    @property
    def n_action_updates(self) -> int:
        return sum(r.updates_action for r in self.records)

    @property
    def n_vision_updates(self) -> int:
        return sum(r.updates_vision for r in self.records)

    def action_steps(self) -> list[int]:
        return [r.step for r in self.records if r.updates_action]


def update_schedule(cfg: SamplerConfig) -> list[tuple[int, bool]]:
    """``[(global_step, updates_action)]`` for steps ``1..n_o``."""
    cfg.validate()
    q = cfg.q
    return [(j, j % q == 0) for j in range(1, cfg.n_o + 1)]


def _initial_noise(rngs, batch, shape_a, shape_o):
    """A^0 then o^0, drawn per batch row from per-row streams (or one stream)."""
    if isinstance(rngs, SeededRng):
        return rngs.normal((batch,) + shape_a), rngs.normal((batch,) + shape_o)
    if len(rngs) != batch:
        raise ValueError(f"got {len(rngs)} rng streams for batch {batch}")
    a, o = [], []
    for r in rngs:
        a.append(r.normal(shape_a))
        o.append(r.normal(shape_o))
    return np.stack(a), np.stack(o)


def sample_joint(model: Callable, ctx, state, rng, cfg: SamplerConfig, record_states=False,
                 init=None):
    """Integrate both velocity heads from noise to data.

    ``model(ctx, state, A, o, tau_a, tau_o) -> (V_A, V_o)`` on batched
    numpy arrays.  ``rng`` is one :class:`SeededRng` or a sequence with
    one stream per batch row.  ``init=(A0, o0)`` skips the noise draw.
    Returns ``(A, o, trace)``.
    """
    cfg.validate()
    ctx = np.asarray(ctx, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    B = state.shape[0]
    k, d_A, m, d_o = model.cfg.k, model.cfg.d_A, model.cfg.m, model.cfg.d_o
    if init is None:
        A, O = _initial_noise(rng, B, (k, d_A), (m, d_o))
    else:
        A, O = (np.array(x, dtype=np.float64) for x in init)
    trace = SampleTrace(snapshots=[] if record_states else None)
    n_a, n_o, q = cfg.n_a, cfg.n_o, cfg.q
    dt_a, dt_o = 1.0 / n_a, 1.0 / n_o
    a_count = 0
    for j in range(1, n_o + 1):
        tau_o = (j - 1) / n_o
        if cfg.tau_conditioning == "pseudocode":
            tau_a = (j - 1) / n_o
        else:
            tau_a = a_count / n_a
        v_a, v_o = model(ctx, state, A, O, np.full(B, tau_a), np.full(B, tau_o))
        O = O + v_o * dt_o
        act = j % q == 0
        if act:
            A = A + v_a * dt_a
            a_count += 1
        trace.records.append(StepRecord(j, tau_a, tau_o, act, True))
        if record_states:
            trace.snapshots.append((A.copy(), O.copy()))
    assert a_count == n_a
    return A, O, trace


def sample_action_only(model: Callable, ctx, state, rng, n_steps: int, init=None):
    """Plain Euler loop with ``1/n_steps`` strides; vision tokens co-evolve."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    ctx = np.asarray(ctx, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    B = state.shape[0]
    c = model.cfg
    if init is None:
        A, O = _initial_noise(rng, B, (c.k, c.d_A), (c.m, c.d_o))
    else:
        A, O = (np.array(x, dtype=np.float64) for x in init)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        tau = np.full(B, i / n_steps)
        v_a, v_o = model(ctx, state, A, O, tau, tau)
        A = A + v_a * dt
        O = O + v_o * dt
    return A


def model_policy(model, cfg: SamplerConfig):
    """Adapter for :func:`dust.world.rollout` returning (actions, predicted future)."""

    def policy(ctx, state, rngs):
        A, O, _ = sample_joint(model, ctx, state, rngs, cfg)
        return A, O

    return policy
