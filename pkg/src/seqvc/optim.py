"""LAMB and plain Adam optimizers over a ParamTree.

Both use decoupled weight decay; LAMB additionally rescales each parameter
block's update by the trust ratio |p| / |update|, clamped to a fixed range,
falling back to 1 when either norm is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError


@dataclass
class OptimizerConfig:
    name: str = "lamb"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    trust_min: float = 0.0
    trust_max: float = 10.0

    def validate(self):
        if self.name not in ("lamb", "adam"):
            raise ContractError(f"unknown optimizer: {self.name!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("optimizer betas must be in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ContractError("optimizer lr and eps must be positive")
        if self.trust_min < 0 or self.trust_max < self.trust_min:
            raise ContractError("invalid trust-ratio clamp range")
        return self


def lamb_step(p, g, m, v, step, cfg: OptimizerConfig, lr_scale=1.0,
              force_trust_one=False):
    """One LAMB update for a single parameter block.

    Returns (new_p, new_m, new_v); ``step`` is the 1-based update count.
    """
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** step)
    v_hat = v / (1.0 - cfg.beta2 ** step)
    r = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p
    if force_trust_one:
        trust = 1.0
    else:
        p_norm = float(np.linalg.norm(p))
        r_norm = float(np.linalg.norm(r))
        if p_norm > 0.0 and r_norm > 0.0:
            trust = min(max(p_norm / r_norm, cfg.trust_min), cfg.trust_max)
        else:
            trust = 1.0
    return p - cfg.lr * lr_scale * trust * r, m, v


class LambOptimizer:
    def __init__(self, cfg: OptimizerConfig, force_trust_one=False):
        self.cfg = cfg.validate()
        self.force_trust_one = force_trust_one
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, tree, frozen_prefixes=(), lr_scale=1.0):
        self.step_count += 1
        for path, t in tree.items():
            if any(path.startswith(p) for p in frozen_prefixes):
                continue
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at parameter {path}")
            if path not in self.m:
                self.m[path] = np.zeros_like(t.data)
                self.v[path] = np.zeros_like(t.data)
            t.data, self.m[path], self.v[path] = lamb_step(
                t.data, g, self.m[path], self.v[path], self.step_count,
                self.cfg, lr_scale, self.force_trust_one)

    def state_dict(self):
        return {"name": "lamb", "step": self.step_count,
                "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        self.m = {k: np.asarray(a, dtype=np.float64) for k, a in state["m"].items()}
        self.v = {k: np.asarray(a, dtype=np.float64) for k, a in state["v"].items()}


class AdamOptimizer:
    """Adam with decoupled weight decay (no trust-ratio scaling)."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg.validate()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, tree, frozen_prefixes=(), lr_scale=1.0):
        cfg = self.cfg
        self.step_count += 1
        t_ = self.step_count
        for path, t in tree.items():
            if any(path.startswith(p) for p in frozen_prefixes):
                continue
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at parameter {path}")
            if path not in self.m:
                self.m[path] = np.zeros_like(t.data)
                self.v[path] = np.zeros_like(t.data)
            self.m[path] = cfg.beta1 * self.m[path] + (1.0 - cfg.beta1) * g
            self.v[path] = cfg.beta2 * self.v[path] + (1.0 - cfg.beta2) * (g * g)
            m_hat = self.m[path] / (1.0 - cfg.beta1 ** t_)
            v_hat = self.v[path] / (1.0 - cfg.beta2 ** t_)
            update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * t.data
            t.data = t.data - cfg.lr * lr_scale * update

    def state_dict(self):
        return {"name": "adam", "step": self.step_count,
                "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        self.m = {k: np.asarray(a, dtype=np.float64) for k, a in state["m"].items()}
        self.v = {k: np.asarray(a, dtype=np.float64) for k, a in state["v"].items()}


def make_optimizer(cfg: OptimizerConfig):
    cfg.validate()
    return LambOptimizer(cfg) if cfg.name == "lamb" else AdamOptimizer(cfg)
