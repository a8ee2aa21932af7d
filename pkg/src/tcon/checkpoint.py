"""Checkpoint files.

``<name>.tcon`` holds raw parameters (little-endian)::

    b"TCON" | version u16
    per parameter: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | values f64

``<name>.tcon.json`` holds the network specs, the training config and its hash,
which the loader needs to rebuild the networks.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from pathlib import Path

import numpy as np

from .networks import MlpSpec, build_networks
from .numerics import Optimizer

MAGIC = b"TCON"
VERSION = 1


class CheckpointError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_params(path, named: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in named.items():
        value = np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 6:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6
    out = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"truncated values for parameter {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save_checkpoint(path, state) -> None:
    nets = state.nets
    write_params(path, {name: p.data for name, p in nets.named_params().items()})
    meta = {
        "format_version": VERSION,
        "specs": {role: spec.to_dict() for role, spec in nets.specs.items()},
        "in_dim": nets.projector.dim,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "target_attention": state.target_attention_mode,
        "gate_open": state.gate_open,
        "step": state.step,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Rebuild a :class:`~tcon.trainer.TrainState` (fresh optimizers) from disk."""
    from .trainer import TrainConfig, TrainState, batch_rng

    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise CheckpointError(f"missing sidecar {meta_file}")
    meta = json.loads(meta_file.read_text())
    config = TrainConfig.from_dict(meta["config"])
    if config.config_hash() != meta.get("config_hash"):
        raise CheckpointError("config hash in sidecar does not match its config")
    specs = {role: MlpSpec.from_dict(s) for role, s in meta["specs"].items()}
    nets = build_networks(specs, config.seed, meta["in_dim"])
    params = read_params(path)
    named = nets.named_params()
    missing = set(named) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, p in named.items():
        if params[name].shape != p.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != expected {p.shape}")
        p.data[...] = params[name]
    state = TrainState(config, nets,
                       Optimizer(nets.generator_params(), kind=config.optimizer, lr=config.lr_generator),
                       Optimizer(nets.discriminator_params(), kind=config.optimizer,
                                 lr=config.lr_discriminator),
                       batch_rng(config.seed), step=meta.get("step", 0),
                       gate_open=meta.get("gate_open", False),
                       ca_history=deque(maxlen=config.warmup_window))
    return state
