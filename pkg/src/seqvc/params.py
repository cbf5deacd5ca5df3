"""Named, path-addressable collections of trainable tensors.

A ParamTree is the unit of freezing, transfer, and checkpointing: every
model parameter lives under a dotted path whose first segment is either
``encoder`` or ``decoder``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


def uniform_param(rng, shape, fan_in=None) -> Tensor:
    """Fan-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if fan_in is None:
        fan_in = shape[0] if shape else 1
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape, fill=0.0) -> Tensor:
    return Tensor(np.full(shape, float(fill)), requires_grad=True)


class ParamTree:
    """Ordered mapping from dotted paths to parameter tensors."""

    def __init__(self, items=()):
        self._params: dict[str, Tensor] = {}
        for path, t in items:
            self.add(path, t)

    def add(self, path: str, tensor: Tensor):
        if path in self._params:
            raise ContractError(f"duplicate parameter path: {path}")
        self._params[path] = tensor

    def __contains__(self, path):
        return path in self._params

    def __getitem__(self, path) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise ContractError(f"unknown parameter path: {path}") from None

    def __len__(self):
        return len(self._params)

    def paths(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def subtree_paths(self, prefix: str):
        return [p for p in self._params if p.startswith(prefix)]

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Copies of current values, for freeze audits and transfer."""
        return {p: t.data.copy() for p, t in self._params.items() if p.startswith(prefix)}

    def drift_from(self, snapshot: dict[str, np.ndarray]):
        """Paths whose values are not bit-identical to the snapshot."""
        return [p for p, a in snapshot.items() if not np.array_equal(self._params[p].data, a)]

    def load_values(self, values: dict[str, np.ndarray], prefix: str = ""):
        """Copy values into all parameters under ``prefix``.

        Every parameter path under the prefix must appear in ``values`` with
        a matching shape; there is no silent random fill.
        """
        for path in self.subtree_paths(prefix):
            if path not in values:
                raise ContractError(f"transfer: source is missing parameter {path}")
            src = np.asarray(values[path])
            dst = self._params[path]
            if tuple(src.shape) != tuple(dst.shape):
                raise ContractError(
                    f"transfer: shape mismatch at {path}: "
                    f"source {tuple(src.shape)} vs model {tuple(dst.shape)}")
            dst.data = src.astype(dst.data.dtype)
