"""Binary checkpoints.

Layout, little-endian::

    b"DUST" | u32 version | u32 meta_len | meta (canonical JSON)
    | u32 n_tensors | n_tensors x tensor

    tensor = u16 name_len | name (utf-8) | u32 ndim | u32[ndim] shape | f64[prod(shape)]

``meta`` holds every config section, the step counter, the training RNG
state, the optimizer step count and free-form extras.  Tensors are the
model parameters in layout order followed by the optimizer moments
``opt.m`` and ``opt.v`` (flat).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..model import DustModel, ModelConfig, ParamStore
from .config import ExperimentConfig

MAGIC = b"DUST"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    params: np.ndarray
    opt_m: np.ndarray
    opt_v: np.ndarray
    opt_t: int = 0
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> DustModel:
        return DustModel(self.config.model, ParamStore(self.config.model, self.params.copy()))

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "step": self.step, "opt_t": self.opt_t,
                "rng_state": self.rng_state, "extra": self.extra}

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta(), sort_keys=True, separators=(",", ":")).encode()
        store = ParamStore(self.config.model, self.params)
        tensors = [(n, store[n]) for n in store.names()]
        tensors += [("opt.m", self.opt_m), ("opt.v", self.opt_v)]
        out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
               struct.pack("<I", len(tensors))]
        for name, arr in tensors:
            nb = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<I", arr.ndim)
                       + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, expect_model: ModelConfig | None = None) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, mlen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(buf[off:off + mlen].decode())
        off += mlen
        config = ExperimentConfig.from_dict(meta["config"])
        if expect_model is not None and expect_model.to_dict() != config.model.to_dict():
            diff = {k: (v, config.model.to_dict()[k]) for k, v in expect_model.to_dict().items()
                    if config.model.to_dict()[k] != v}
            raise CheckpointError(f"checkpoint model config differs (expected, found): {diff}")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode()
            off += nl
            (nd,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{nd}I", buf, off)
            off += 4 * nd
            cnt = int(np.prod(shape)) if nd else 1
            tensors[name] = np.frombuffer(buf, "<f8", cnt, off).reshape(shape).astype(np.float64)
            off += 8 * cnt
        store = ParamStore(config.model)
        for name in store.names():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != store[name].shape:
                raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, "
                                      f"model expects {store[name].shape}")
            store[name][...] = tensors[name]
        return cls(config=config, params=store.flat, opt_m=tensors["opt.m"],
                   opt_v=tensors["opt.v"], opt_t=meta["opt_t"], step=meta["step"],
                   rng_state=meta["rng_state"], extra=meta.get("extra", {}))

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path, expect_model: ModelConfig | None = None) -> "Checkpoint":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), expect_model)
