"""Versioned binary checkpoints: config + parameters + optimizer state.

Layout: magic, uint32 header length, JSON header (version, model config,
step, seed, parameter name/shape table, optimizer slot table), then the
payload of float32 little-endian arrays in table order. Save -> load ->
save round trips are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .models import ModelConfig, Seq2SeqModel
from .optim import OptimizerConfig

MAGIC = b"SVCCKPT1"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    step: int
    seed: int
    params: dict            # path -> float32 ndarray
    optimizer: dict | None  # {"name", "hyper", "step", "m", "v"}
    version: int = VERSION


def checkpoint_of(model: Seq2SeqModel, optimizer=None, opt_cfg: OptimizerConfig | None = None,
                  step: int = 0) -> Checkpoint:
    params = {p: t.data.astype("<f4") for p, t in model.params.items()}
    opt = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt = {
            "name": state["name"],
            "hyper": dataclasses.asdict(opt_cfg) if opt_cfg else None,
            "step": state["step"],
            "m": {k: a.astype("<f4") for k, a in state["m"].items()},
            "v": {k: a.astype("<f4") for k, a in state["v"].items()},
        }
    return Checkpoint(model.config, step, model.seed, params, opt)


def load_into_model(model: Seq2SeqModel, ckpt: Checkpoint):
    model.params.load_values(ckpt.params)


def save_checkpoint(ckpt: Checkpoint, path: str):
    header = {
        "version": ckpt.version,
        "config": dataclasses.asdict(ckpt.config),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "params": [[name, list(arr.shape)] for name, arr in ckpt.params.items()],
    }
    chunks = [np.ascontiguousarray(arr, dtype="<f4").tobytes()
              for arr in ckpt.params.values()]
    if ckpt.optimizer is None:
        header["optimizer"] = None
    else:
        opt = ckpt.optimizer
        header["optimizer"] = {
            "name": opt["name"], "hyper": opt["hyper"], "step": int(opt["step"]),
            "slots": [[name, list(np.asarray(a).shape)] for name, a in opt["m"].items()],
        }
        for key in ("m", "v"):
            chunks.extend(np.ascontiguousarray(a, dtype="<f4").tobytes()
                          for a in opt[key].values())
    blob = json.dumps(header, sort_keys=True).encode()
    payload = MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks)
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    if len(blob) < 12:
        raise ContractError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    if header["version"] != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header['version']}")
    tables = [(name, tuple(shape)) for name, shape in header["params"]]
    opt_header = header["optimizer"]
    slots = [(name, tuple(shape)) for name, shape in opt_header["slots"]] if opt_header else []
    expected = sum(int(np.prod(s)) for _, s in tables) + 2 * sum(int(np.prod(s)) for _, s in slots)
    payload = blob[12 + hlen:]
    if len(payload) != expected * 4:
        raise ContractError(f"{path}: payload length mismatch")
    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        return arr.copy()

    params = {name: take(shape) for name, shape in tables}
    optimizer = None
    if opt_header:
        m = {name: take(shape) for name, shape in slots}
        v = {name: take(shape) for name, shape in slots}
        optimizer = {"name": opt_header["name"], "hyper": opt_header["hyper"],
                     "step": opt_header["step"], "m": m, "v": v}
    config = ModelConfig(**header["config"])
    return Checkpoint(config, header["step"], header["seed"], params, optimizer)
