"""Dual-stream velocity network.

Layout (all tensors batched, leading axis B)::

    state, noisy action ──► action encoder (linear + 1-D sincos) ──┐
    noisy future embedding ─► vision encoder (3-layer SiLU MLP      │ n_mmdit shared blocks
                              + 2-D sincos over a sqrt(m) grid) ──┘  (per-stream AdaLN,
                                                                     joint attention or
                                                                     per-stream cross-attn)
                                      ├─► action tail (n_dit DiT blocks) ─► linear decoder
                                      └─► vision tail (n_dit DiT blocks) ─► 2-layer ReLU MLP

Parameters live in one flat float64 buffer (:class:`ParamStore`); the
forward functions take a ``name -> Tensor`` mapping so the same code runs
tracked (training) and untracked (sampling).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import Tensor

STREAMS = ("a", "o")


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_mmdit: int = 4
    n_dit: int = 2
    k: int = 4
    m: int = 4
    d_A: int = 2
    d_o: int = 8
    d_s: int = 2
    n_ctx: int = 2
    d_temb: int | None = None
    mlp_ratio: int = 4
    arch_mode: str = "mmdit"            # mmdit | single_stream_dit
    adaln_mode: str = "per_modality"    # per_modality | global
    attn_pattern: str = "interleaved"   # interleaved | all_self

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d_model", "n_heads", "n_mmdit", "k", "m", "d_A", "d_o", "d_s",
                     "n_ctx", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_dit < 0:
            raise ValueError(f"model.n_dit must be >= 0, got {self.n_dit}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 4:
            raise ValueError(f"d_model={self.d_model} must be divisible by 4 for 2-D sincos codes")
        side = math.isqrt(self.m)
        if side * side != self.m:
            raise ValueError(f"m={self.m} is not a perfect square; 2-D position grid undefined")
        if self.arch_mode not in ("mmdit", "single_stream_dit"):
            raise ValueError(f"unknown arch_mode {self.arch_mode!r}")
        if self.adaln_mode not in ("per_modality", "global"):
            raise ValueError(f"unknown adaln_mode {self.adaln_mode!r}")
        if self.attn_pattern not in ("interleaved", "all_self"):
            raise ValueError(f"unknown attn_pattern {self.attn_pattern!r}")

    @property
    def temb_width(self) -> int:
        return self.d_temb or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- parameter layout

def _block_shapes(prefix: str, d: int, hidden: int, cross: bool) -> list[tuple[str, tuple[int, ...]]]:
    out = [(f"{prefix}.mod.w", (d, 6 * d)), (f"{prefix}.mod.b", (6 * d,))]
    if cross:
        out += [(f"{prefix}.q.w", (d, d)), (f"{prefix}.q.b", (d,)),
                (f"{prefix}.kv.w", (d, 2 * d)), (f"{prefix}.kv.b", (2 * d,))]
    else:
        out += [(f"{prefix}.qkv.w", (d, 3 * d)), (f"{prefix}.qkv.b", (3 * d,))]
    out += [(f"{prefix}.proj.w", (d, d)), (f"{prefix}.proj.b", (d,))]
    out += [(f"{prefix}.mlp1.w", (d, hidden)), (f"{prefix}.mlp1.b", (hidden,)),
            (f"{prefix}.mlp2.w", (hidden, d)), (f"{prefix}.mlp2.b", (d,))]
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, hid, te = cfg.d_model, cfg.mlp_ratio * cfg.d_model, cfg.temb_width
    shapes = [
        ("temb.fc1.w", (d, te)), ("temb.fc1.b", (te,)),
        ("temb.fc2.w", (te, d)), ("temb.fc2.b", (d,)),
        ("enc_a.state.w", (cfg.d_s, d)), ("enc_a.state.b", (d,)),
        ("enc_a.act.w", (cfg.d_A, d)), ("enc_a.act.b", (d,)),
        ("enc_o.fc1.w", (cfg.d_o, d)), ("enc_o.fc1.b", (d,)),
        ("enc_o.fc2.w", (d, d)), ("enc_o.fc2.b", (d,)),
        ("enc_o.fc3.w", (d, d)), ("enc_o.fc3.b", (d,)),
    ]
    if cfg.arch_mode == "mmdit":
        for i in range(cfg.n_mmdit):
            for s in STREAMS:
                shapes += _block_shapes(f"mmdit{i}.{s}", d, hid, is_cross_layer(cfg, i))
        for j in range(cfg.n_dit):
            for s in STREAMS:
                shapes += _block_shapes(f"dit{j}.{s}", d, hid,
                                        is_cross_layer(cfg, cfg.n_mmdit + j))
    else:
        for i in range(cfg.n_mmdit + cfg.n_dit):
            shapes += _block_shapes(f"block{i}", d, hid, is_cross_layer(cfg, i))
    shapes += [
        ("dec_a.w", (d, cfg.d_A)), ("dec_a.b", (cfg.d_A,)),
        ("dec_o.fc1.w", (d, d)), ("dec_o.fc1.b", (d,)),
        ("dec_o.fc2.w", (d, cfg.d_o)), ("dec_o.fc2.b", (cfg.d_o,)),
    ]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed form of ``sum(prod(shape))`` over :func:`param_shapes`."""
    d, h, te = cfg.d_model, cfg.mlp_ratio * cfg.d_model, cfg.temb_width
    block = (d * 6 * d + 6 * d) + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    n_blocks = (2 * (cfg.n_mmdit + cfg.n_dit) if cfg.arch_mode == "mmdit"
                else cfg.n_mmdit + cfg.n_dit)
    temb = d * te + te + te * d + d
    enc = (cfg.d_s + 1) * d + (cfg.d_A + 1) * d + (cfg.d_o + 1) * d + 2 * (d * d + d)
    dec = (d + 1) * cfg.d_A + (d * d + d) + (d + 1) * cfg.d_o
    return temb + enc + n_blocks * block + dec


def is_zero_init(name: str) -> bool:
    return ".mod." in name or name.startswith("dec_a.") or name.startswith("dec_o.fc2.")


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (never biases)."""
    return not name.endswith(".b")


class ParamStore:
    """Named views into one contiguous float64 vector."""

    def __init__(self, cfg: ModelConfig, flat: np.ndarray | None = None):
        self.cfg = cfg
        self.layout = param_shapes(cfg)
        self.size = sum(int(np.prod(s)) for _, s in self.layout)
        assert self.size == param_count(cfg)
        if flat is None:
            flat = np.zeros(self.size)
        if flat.shape != (self.size,):
            raise ValueError(f"flat parameter vector has {flat.size} entries, expected {self.size}")
        self.flat = flat
        self.slices: dict[str, slice] = {}
        self.views: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self.slices[name] = slice(off, off + n)
            self.views[name] = flat[off:off + n].reshape(shape)
            off += n
        self.decay_mask = np.zeros(self.size, dtype=bool)
        for name, sl in self.slices.items():
            self.decay_mask[sl] = decays(name)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: SeededRng) -> "ParamStore":
        ps = cls(cfg)
        for name, shape in ps.layout:
            if name.endswith(".b") or is_zero_init(name):
                continue
            fan_in, fan_out = shape
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            ps.views[name][...] = (2.0 * rng.uniform(shape) - 1.0) * lim
        return ps

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def __getitem__(self, name) -> np.ndarray:
        return self.views[name]

    def tensors(self) -> dict[str, Tensor]:
        return {n: Tensor(v) for n, v in self.views.items()}

    def watch(self, tape: T.Tape) -> dict[str, Tensor]:
        return {n: tape.watch(Tensor(v), n) for n, v in self.views.items()}

    def flatten_grads(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        g = np.empty(self.size)
        for name, sl in self.slices.items():
            g[sl] = grads[name].reshape(-1)
        return g

    def copy(self) -> "ParamStore":
        return ParamStore(self.cfg, self.flat.copy())


# ---------------------------------------------------------------- position / time codes

def sincos_1d(n_pos: int, dim: int) -> np.ndarray:
    pos = np.arange(n_pos, dtype=np.float64)
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    ang = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_2d(side: int, dim: int) -> np.ndarray:
    """Grid codes: first half encodes the row, second half the column."""
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    half = dim // 2
    r = sincos_1d(side, half)[rows.reshape(-1)]
    c = sincos_1d(side, half)[cols.reshape(-1)]
    return np.concatenate([r, c], axis=1)


def timestep_features(tau: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = 1000.0 * np.asarray(tau, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


# ---------------------------------------------------------------- layers

def linear(x: Tensor, P, name: str) -> Tensor:
    return T.linear(x, P[name + ".w"], P[name + ".b"])


def timestep_embedding(tau, P, cfg: ModelConfig) -> Tensor:
    """(B,) noise levels -> (B, d_model) embedding."""
    feats = Tensor(timestep_features(tau, cfg.d_model))
    return linear(T.silu(linear(feats, P, "temb.fc1")), P, "temb.fc2")


def encode_inputs(state, noisy_action, noisy_future, P, cfg: ModelConfig):
    """Token streams ``(X_a: (B, 1+k, d), X_o: (B, m, d))`` with position codes added."""
    B = state.shape[0]
    d = cfg.d_model
    s_tok = T.reshape(linear(state, P, "enc_a.state"), (B, 1, d))
    a_tok = linear(noisy_action, P, "enc_a.act")
    x_a = T.add(T.concat([s_tok, a_tok], axis=1), Tensor(sincos_1d(1 + cfg.k, d)))
    h = T.silu(linear(noisy_future, P, "enc_o.fc1"))
    h = T.silu(linear(h, P, "enc_o.fc2"))
    h = linear(h, P, "enc_o.fc3")
    x_o = T.add(h, Tensor(sincos_2d(math.isqrt(cfg.m), d)))
    return x_a, x_o


def modulation(cond: Tensor, P, prefix: str) -> Tensor:
    """``cond = silu(emb)`` -> packed (shift1, scale1, gate1, shift2, scale2, gate2).

    ``(B, d) -> (B, 6d)``, or per token ``(B, T, d) -> (B, T, 6d)``.
    """
    return linear(cond, P, prefix + ".mod")


def _mlp(x, P, prefix):
    return linear(T.silu(linear(x, P, prefix + ".mlp1")), P, prefix + ".mlp2")


def is_cross_layer(cfg: ModelConfig, layer_index: int) -> bool:
    return cfg.attn_pattern == "interleaved" and layer_index % 2 == 1


def _cross_mask(sizes):
    n = sum(sizes)
    ids = np.repeat(np.arange(len(sizes)), sizes)
    return (ids[:, None] == ids[None, :]).reshape(1, 1, n, n)


def multi_stream_block(xs: list[Tensor], ctx: Tensor, mods: list[Tensor], P,
                       prefixes: list[str], cfg: ModelConfig, layer_index: int,
                       mask_cross: bool = False) -> list[Tensor]:
    """One AdaLN-Zero block over one or more token streams.

    Each stream ``i`` uses its own parameters ``prefixes[i]`` and packed
    modulation ``mods[i]``.  Self-attention layers attend jointly over the
    concatenation of all streams; cross layers attend from each stream to
    ``ctx`` alone.
    """
    H, d = cfg.n_heads, cfg.d_model
    hs = [T.adaln(x, m, 0) for x, m in zip(xs, mods)]
    if is_cross_layer(cfg, layer_index):
        # queries from the stream, keys/values from the context tokens
        outs = []
        for h, p in zip(hs, prefixes):
            k, v = T.split(linear(ctx, P, p + ".kv"), [d, d], axis=-1)
            outs.append(T.attention(linear(h, P, p + ".q"), k, v, H))
    else:
        qkv = [T.split(linear(h, P, p + ".qkv"), [d, d, d], axis=-1)
               for h, p in zip(hs, prefixes)]
        if len(xs) == 1:
            outs = [T.attention(*qkv[0], H)]
        else:
            qs, ks, vs = ([t[i] for t in qkv] for i in range(3))
            sizes = [x.shape[1] for x in xs]
            mask = _cross_mask(sizes) if mask_cross else None
            joint = T.attention(T.concat(qs, axis=1), T.concat(ks, axis=1),
                                T.concat(vs, axis=1), H, mask=mask)
            outs = T.split(joint, sizes, axis=1)
    res = []
    for x, o, m, p in zip(xs, outs, mods, prefixes):
        x = T.gated_residual(x, linear(o, P, p + ".proj"), m, 0)
        res.append(T.gated_residual(x, _mlp(T.adaln(x, m, 1), P, p), m, 1))
    return res


def mmdit_block(x_a, x_o, ctx, cond_a, cond_o, P, cfg: ModelConfig, layer_index: int,
                mask_cross: bool = False):
    """Shared block: per-stream AdaLN and weights, joint attention on self layers.

    ``cond_*`` are ``silu`` of the timestep embeddings; in ``global`` AdaLN
    mode the action embedding conditions both streams.
    """
    if cfg.adaln_mode == "global":
        cond_o = cond_a
    pre = [f"mmdit{layer_index}.a", f"mmdit{layer_index}.o"]
    mods = [modulation(cond_a, P, pre[0]), modulation(cond_o, P, pre[1])]
    x_a, x_o = multi_stream_block([x_a, x_o], ctx, mods, P, pre, cfg, layer_index, mask_cross)
    return x_a, x_o


def dit_tail_block(x, ctx, cond, P, cfg: ModelConfig, stream: str, tail_index: int):
    """Single-stream DiT block; alternation continues the global layer count."""
    prefix = f"dit{tail_index}.{stream}"
    return multi_stream_block([x], ctx, [modulation(cond, P, prefix)], P, [prefix], cfg,
                              cfg.n_mmdit + tail_index)[0]


def _single_stream(x_a, x_o, ctx, cond_a, cond_o, P, cfg, mask_cross):
    """Ablation baseline: one pathway over [action; vision] tokens.

    Modulation weights are shared; each token is modulated by its own
    modality's embedding (per_modality) or by the action embedding (global).
    """
    ta, to = x_a.shape[1], x_o.shape[1]
    if cfg.adaln_mode == "global":
        cond_o = cond_a
    B, d = cond_a.shape
    # per-token conditioning, built once and reused by every block
    cond = T.concat([T.add(T.reshape(cond_a, (B, 1, d)), Tensor(np.zeros((B, ta, d)))),
                     T.add(T.reshape(cond_o, (B, 1, d)), Tensor(np.zeros((B, to, d))))], axis=1)
    x = T.concat([x_a, x_o], axis=1)
    for i in range(cfg.n_mmdit + cfg.n_dit):
        p = f"block{i}"
        mod = modulation(cond, P, p)
        if mask_cross and not is_cross_layer(cfg, i):
            streams = T.split(x, [ta, to], axis=1)
            ys = multi_stream_block(streams, ctx, T.split(mod, [ta, to], axis=1), P, [p, p],
                                    cfg, i, mask_cross=True)
            x = T.concat(ys, axis=1)
        else:
            x = multi_stream_block([x], ctx, [mod], P, [p], cfg, i)[0]
    return T.split(x, [ta, to], axis=1)


def forward(P: Mapping[str, Tensor], cfg: ModelConfig, ctx, state, noisy_action, noisy_future,
            tau_a, tau_o, mask_cross: bool = False):
    """Velocity predictions ``(V_A: (B, k, d_A), V_o: (B, m, d_o))``.

    ``mask_cross`` blocks attention between the two streams (diagnostic only).
    Unbatched inputs (no leading B axis) are accepted and returned unbatched.
    """
    ctx, state = T.as_tensor(ctx), T.as_tensor(state)
    noisy_action, noisy_future = T.as_tensor(noisy_action), T.as_tensor(noisy_future)
    unbatched = state.data.ndim == 1
    if unbatched:
        ctx = Tensor(ctx.data[None])
        state = Tensor(state.data[None])
        noisy_action = Tensor(noisy_action.data[None])
        noisy_future = Tensor(noisy_future.data[None])
    B = state.shape[0]
    tau_a = np.broadcast_to(np.asarray(tau_a, dtype=np.float64), (B,))
    tau_o = np.broadcast_to(np.asarray(tau_o, dtype=np.float64), (B,))
    _check_inputs(cfg, ctx, state, noisy_action, noisy_future)

    cond_a = T.silu(timestep_embedding(tau_a, P, cfg))
    cond_o = T.silu(timestep_embedding(tau_o, P, cfg))
    x_a, x_o = encode_inputs(state, noisy_action, noisy_future, P, cfg)
    if cfg.arch_mode == "mmdit":
        for i in range(cfg.n_mmdit):
            x_a, x_o = mmdit_block(x_a, x_o, ctx, cond_a, cond_o, P, cfg, i, mask_cross)
        tail_cond_o = cond_a if cfg.adaln_mode == "global" else cond_o
        for j in range(cfg.n_dit):
            x_a = dit_tail_block(x_a, ctx, cond_a, P, cfg, "a", j)
            x_o = dit_tail_block(x_o, ctx, tail_cond_o, P, cfg, "o", j)
    else:
        x_a, x_o = _single_stream(x_a, x_o, ctx, cond_a, cond_o, P, cfg, mask_cross)

    _, act_tokens = T.split(x_a, [1, cfg.k], axis=1)
    v_a = linear(T.layer_norm(act_tokens), P, "dec_a")
    h = T.relu(linear(T.layer_norm(x_o), P, "dec_o.fc1"))
    v_o = linear(h, P, "dec_o.fc2")
    if unbatched:
        return Tensor(v_a.data[0]), Tensor(v_o.data[0])
    return v_a, v_o


def _check_inputs(cfg, ctx, state, act, fut):
    B = state.shape[0]
    want = {
        "ctx": ((B, cfg.n_ctx, cfg.d_model), ctx.shape),
        "state": ((B, cfg.d_s), state.shape),
        "noisy_action": ((B, cfg.k, cfg.d_A), act.shape),
        "noisy_future": ((B, cfg.m, cfg.d_o), fut.shape),
    }
    for name, (exp, got) in want.items():
        if tuple(exp) != tuple(got):
            raise T.ShapeError(f"forward: {name} has shape {got}, expected {exp}")


class DustModel:
    """Config plus parameters; callable as the velocity field."""

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "DustModel":
        return cls(cfg, ParamStore.init(cfg, SeededRng(seed, (0x6D6F64,))))

    def __call__(self, ctx, state, noisy_action, noisy_future, tau_a, tau_o, mask_cross=False):
        v_a, v_o = forward(self.params.tensors(), self.cfg, ctx, state, noisy_action,
                           noisy_future, tau_a, tau_o, mask_cross)
        return v_a.data, v_o.data
