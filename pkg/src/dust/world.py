"""Closed-form 2-D point-mass world.

A point moves in the clamped workspace ``[-1, 1]^2`` by per-step
displacements.  Each episode carries an instruction id naming one of ``G``
goal points; the expert heads straight for it at capped speed.  Future
observations are represented by a frozen feature map of the state ``k``
steps ahead, and the policy context is two frozen tokens (state summary,
instruction code).

Dataset file layout (all little-endian)::

    b"DSTD" | u32 version | u32 variant (0 full, 1 action_free)
    | u32 header_len | header JSON (canonical, utf-8)
    | u32 n_episodes | n_episodes x (u32 record_len | record)

    record = u32 instruction | u32 L
             | f64[(L+1) * 2] states | f64[L * 2] actions   (actions: full only)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .rng import SeededRng

DATASET_MAGIC = b"DSTD"
DATASET_VERSION = 1
VARIANTS = ("full", "action_free")


def _default_goals():
    return [[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]


@dataclass
class WorldConfig:
    goals: list = field(default_factory=_default_goals)
    k: int = 4
    horizon: int = 32
    expert_noise: float = 0.01
    v_max: float = 0.25
    success_radius: float = 0.1
    feature_map_kind: str = "random_fourier"
    feature_seed: int = 1234
    freq_cap: float = 3.0
    d_o: int = 8
    m: int = 4
    d_ctx: int = 32
    start_low: float = -1.0
    start_high: float = 1.0

    def __post_init__(self):
        self.goals = [[float(x) for x in g] for g in self.goals]
        if not self.goals:
            raise ValueError("world.goals must be non-empty")
        for g in self.goals:
            if len(g) != 2 or not all(-1.0 <= x <= 1.0 for x in g):
                raise ValueError(f"goal {g} is outside the workspace [-1, 1]^2")
        if self.success_radius <= 0:
            raise ValueError("world.success_radius must be positive")
        if self.k < 1 or self.horizon < 1:
            raise ValueError("world.k and world.horizon must be >= 1")
        if self.feature_map_kind not in ("identity_pad", "random_fourier"):
            raise ValueError(f"unknown feature_map_kind {self.feature_map_kind!r}")
        if self.feature_map_kind == "identity_pad" and self.d_o < 2:
            raise ValueError("identity_pad needs d_o >= 2")

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    def to_dict(self) -> dict:
        return asdict(self)


def clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, -1.0, 1.0)


def step(position: np.ndarray, action: np.ndarray) -> np.ndarray:
    return clamp(position + action)


class FeatureMap:
    """Frozen surrogate image encoder: ``position -> (m, d_o)`` embedding.

    ``random_fourier``: token j, coordinate c is ``cos(<w_jc, p> + phi_jc)``
    with ``|w_jc| <= freq_cap``, so the map is ``freq_cap``-Lipschitz in the
    max norm.
    """

    def __init__(self, world: WorldConfig):
        self.kind = world.feature_map_kind
        self.m, self.d_o = world.m, world.d_o
        rng = SeededRng(world.feature_seed, (0x464D,))
        n = self.m * self.d_o
        ang = 2.0 * math.pi * rng.uniform(n)
        rad = world.freq_cap * rng.uniform(n)
        self.omega = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)  # (n, 2)
        self.phase = 2.0 * math.pi * rng.uniform(n)
        self.freq_cap = world.freq_cap
        self.omega.setflags(write=False)
        self.phase.setflags(write=False)

    def __call__(self, position) -> np.ndarray:
        """Embeds a (2,) position or a (..., 2) batch into (..., m, d_o)."""
        p = np.asarray(position, dtype=np.float64)
        lead = p.shape[:-1]
        if self.kind == "identity_pad":
            out = np.zeros(lead + (self.m * self.d_o,))
            out[..., :2] = p
        else:
            # explicit 2-term products: bit-identical for any batch shape
            w = self.omega
            out = np.cos(p[..., :1] * w[:, 0] + p[..., 1:2] * w[:, 1] + self.phase)
        return out.reshape(lead + (self.m, self.d_o))


class World:
    """Bundles config, frozen feature map and frozen context projections."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.fm = FeatureMap(cfg)
        self.goals = np.asarray(cfg.goals, dtype=np.float64)
        rng = SeededRng(cfg.feature_seed, (0x435458,))
        n_in = cfg.m * cfg.d_o
        self.ctx_proj = rng.normal((n_in, cfg.d_ctx)) / math.sqrt(n_in)
        self.instr_codes = rng.normal((cfg.n_goals, cfg.d_ctx))
        self.ctx_proj.setflags(write=False)
        self.instr_codes.setflags(write=False)

    def embed(self, position) -> np.ndarray:
        return self.fm(position)

    def make_context(self, position, instruction) -> np.ndarray:
        """(n_ctx=2, d_ctx) tokens, or (B, 2, d_ctx) for batched inputs."""
        p = np.asarray(position, dtype=np.float64)
        ins = np.asarray(instruction)
        if np.any(ins < 0) or np.any(ins >= self.cfg.n_goals):
            raise ValueError(f"unknown instruction id {instruction!r} "
                             f"(world has {self.cfg.n_goals} goals)")
        summary = self.embed(p).reshape(p.shape[:-1] + (-1,)) @ self.ctx_proj
        code = self.instr_codes[ins]
        return np.stack([summary, code], axis=-2)

    def expert_action(self, position, instruction, rng: SeededRng | None = None) -> np.ndarray:
        delta = self.goals[np.asarray(instruction)] - position
        norm = np.linalg.norm(delta, axis=-1, keepdims=True)
        a = delta * np.minimum(1.0, self.cfg.v_max / np.maximum(norm, 1e-12))
        if rng is not None and self.cfg.expert_noise > 0:
            a = a + self.cfg.expert_noise * rng.normal(a.shape)
        return a


@dataclass
class Episode:
    instruction: int
    states: np.ndarray            # (L+1, 2)
    actions: np.ndarray | None    # (L, 2); None for action-free data

    @property
    def length(self) -> int:
        return self.states.shape[0] - 1

    def action_chunk(self, t: int, k: int) -> np.ndarray:
        """(a_t .. a_{t+k-1}), zero-padded past the horizon (zero action = stay)."""
        out = np.zeros((k, 2))
        seg = self.actions[t:t + k]
        out[:len(seg)] = seg
        return out

    def future_index(self, t: int, k: int) -> int:
        return min(t + k, self.length)


@dataclass
class Dataset:
    world: WorldConfig
    variant: str
    episodes: list[Episode]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown dataset variant {self.variant!r}")

    def tuples(self):
        """Flat training arrays over every (episode, t) with t in [0, L).

        Returns dict with ``context (N, 2, d_ctx)``, ``state (N, 2)``,
        ``future (N, m, d_o)`` and, for the full variant, ``action (N, k, 2)``.
        """
        world = World(self.world)
        k = self.world.k
        pos, ins, fut_pos, chunks = [], [], [], []
        for ep in self.episodes:
            for t in range(ep.length):
                pos.append(ep.states[t])
                ins.append(ep.instruction)
                fut_pos.append(ep.states[ep.future_index(t, k)])
                if self.variant == "full":
                    chunks.append(ep.action_chunk(t, k))
        pos = np.asarray(pos)
        ins = np.asarray(ins)
        out = {"context": world.make_context(pos, ins), "state": pos,
               "future": world.embed(np.asarray(fut_pos))}
        if self.variant == "full":
            out["action"] = np.asarray(chunks)
        return out

    # ------------------------------------------------------------ file format

    def to_bytes(self) -> bytes:
        header = canonical_json(self.world.to_dict()).encode()
        parts = [DATASET_MAGIC, struct.pack("<III", DATASET_VERSION, VARIANTS.index(self.variant),
                                            len(header)), header,
                 struct.pack("<I", len(self.episodes))]
        for ep in self.episodes:
            rec = [struct.pack("<II", ep.instruction, ep.length),
                   np.ascontiguousarray(ep.states, dtype="<f8").tobytes()]
            if self.variant == "full":
                rec.append(np.ascontiguousarray(ep.actions, dtype="<f8").tobytes())
            rec = b"".join(rec)
            parts += [struct.pack("<I", len(rec)), rec]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        if buf[:4] != DATASET_MAGIC:
            raise ValueError("not a dataset file (bad magic)")
        version, variant_id, hlen = struct.unpack_from("<III", buf, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        off = 16
        world = WorldConfig(**json.loads(buf[off:off + hlen].decode()))
        off += hlen
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        variant = VARIANTS[variant_id]
        episodes = []
        for _ in range(n):
            (rlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            ins, L = struct.unpack_from("<II", buf, off)
            p = off + 8
            states = np.frombuffer(buf, "<f8", (L + 1) * 2, p).reshape(L + 1, 2).astype(np.float64)
            p += (L + 1) * 16
            actions = None
            if variant == "full":
                actions = np.frombuffer(buf, "<f8", L * 2, p).reshape(L, 2).astype(np.float64)
            episodes.append(Episode(ins, states, actions))
            off += rlen
        return cls(world, variant, episodes)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def to_json(self) -> dict:
        eps = []
        for ep in self.episodes:
            rec = {"instruction": ep.instruction, "states": ep.states.tolist()}
            if self.variant == "full":
                rec["actions"] = ep.actions.tolist()
            eps.append(rec)
        return {"format": "DSTD", "version": DATASET_VERSION, "variant": self.variant,
                "world": self.world.to_dict(), "episodes": eps}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def generate_dataset(rng: SeededRng, world_cfg: WorldConfig, n_episodes: int,
                     variant: str = "full") -> Dataset:
    """Expert demonstrations; episode ``i`` uses stream ``rng.child(i)``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    world = World(world_cfg)
    eps = []
    for i in range(n_episodes):
        r = rng.child(i)
        ins = int(r.integers(0, world_cfg.n_goals))
        pos = world_cfg.start_low + (world_cfg.start_high - world_cfg.start_low) * r.uniform(2)
        states, actions = [pos], []
        for _ in range(world_cfg.horizon):
            a = world.expert_action(pos, ins, r)
            pos = step(pos, a)
            actions.append(a)
            states.append(pos)
        eps.append(Episode(ins, np.asarray(states),
                           np.asarray(actions) if variant == "full" else None))
    return Dataset(world_cfg, variant, eps)


def replay(states0: np.ndarray, actions: np.ndarray) -> np.ndarray:
    pos = states0
    out = [pos]
    for a in actions:
        pos = step(pos, a)
        out.append(pos)
    return np.asarray(out)


# ---------------------------------------------------------------- closed-loop evaluation

@dataclass
class RolloutResult:
    success_rate: float
    successes: np.ndarray
    final_distance: np.ndarray
    instructions: np.ndarray
    wm_sq_err: list          # per replan: (B,) mean sq. error of predicted future embedding
    failed_nonfinite: np.ndarray
    logs: list = field(default_factory=list)

    @property
    def wm_embedding_mse(self) -> float:
        if not self.wm_sq_err:
            return float("nan")
        return float(np.mean(np.concatenate(self.wm_sq_err)))


def eval_starts(rng: SeededRng, world_cfg: WorldConfig, n_episodes: int):
    ins, starts = [], []
    for i in range(n_episodes):
        r = rng.child(i)
        ins.append(int(r.integers(0, world_cfg.n_goals)))
        starts.append(world_cfg.start_low
                      + (world_cfg.start_high - world_cfg.start_low) * r.uniform(2))
    return np.asarray(ins), np.asarray(starts)


def rollout(policy: Callable, world_cfg: WorldConfig, rng: SeededRng, n_episodes: int,
            starts=None, episode_ids=None) -> RolloutResult:
    """Closed-loop evaluation of a chunked policy, all episodes in lockstep.

    ``policy(context (B,2,d), state (B,2), rngs) -> actions (B,k,2)`` or
    ``(actions, predicted_future (B,m,d_o))``.  ``rngs[i]`` is episode i's
    stream for sampling noise.  Each chunk is executed in full before
    re-planning; a non-finite chunk fails its episode.  ``episode_ids``
    (default ``0..B-1``) selects the per-episode streams, so a shard of a
    larger evaluation reproduces that shard's episodes exactly.
    """
    world = World(world_cfg)
    if starts is None:
        ins, pos = eval_starts(rng, world_cfg, n_episodes)
    else:
        ins, pos = starts
        ins, pos = np.asarray(ins), np.asarray(pos, dtype=np.float64).copy()
    B = len(ins)
    ids = range(B) if episode_ids is None else episode_ids
    ep_rngs = [rng.child(int(i)).child(1) for i in ids]
    failed = np.zeros(B, dtype=bool)
    k = world_cfg.k
    wm_err = []
    logs = []
    t = 0
    while t < world_cfg.horizon:
        ctx = world.make_context(pos, ins)
        out = policy(ctx, pos, ep_rngs)
        pred_future = None
        if isinstance(out, tuple):
            acts, pred_future = out
        else:
            acts = out
        acts = np.asarray(acts, dtype=np.float64)
        bad = ~np.isfinite(acts).all(axis=(1, 2))
        if bad.any():
            for i in np.flatnonzero(bad & ~failed):
                logs.append({"episode": int(i), "t": t, "event": "non-finite action"})
            failed |= bad
            acts = np.where(bad[:, None, None], 0.0, acts)
        n_exec = min(k, world_cfg.horizon - t)
        for j in range(n_exec):
            pos = np.where(failed[:, None], pos, step(pos, acts[:, j]))
        t += n_exec
        if pred_future is not None and n_exec == k:
            err = (np.asarray(pred_future) - world.embed(pos)) ** 2
            wm_err.append(err.reshape(B, -1).mean(axis=1))
    dist = np.linalg.norm(pos - world.goals[ins], axis=1)
    succ = (dist <= world_cfg.success_radius) & ~failed
    return RolloutResult(success_rate=float(succ.mean()), successes=succ, final_distance=dist,
                         instructions=ins, wm_sq_err=wm_err, failed_nonfinite=failed, logs=logs)


def expert_policy(world_cfg: WorldConfig):
    """Noise-free chunked expert (plans k steps through the true dynamics)."""
    world = World(world_cfg)

    def policy(ctx, pos, rngs):
        # instruction is recovered from the context code token
        codes = ctx[:, 1, :]
        d = ((codes[:, None, :] - world.instr_codes[None]) ** 2).sum(-1)
        ins = d.argmin(axis=1)
        p = np.asarray(pos, dtype=np.float64)
        chunk = []
        for _ in range(world_cfg.k):
            a = world.expert_action(p, ins)
            chunk.append(a)
            p = step(p, a)
        return np.stack(chunk, axis=1)

    return policy
