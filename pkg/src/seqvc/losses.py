"""Training objectives: masked L1+L2 reconstruction over both prediction
streams, weighted stop-token cross-entropy, guided attention, text
cross-entropy, and their weighted composition."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_l2: float = 1.0
    w_stop: float = 1.0
    stop_pos_weight: float = 5.0
    w_ga: float = 10.0
    ga_sharpness: float = 0.2
    # (layer, head) pairs under guidance; None means heads 0 and 1 of every
    # decoder cross-attention layer
    guided: tuple | None = None

    def validate(self):
        for name in ("w_l1", "w_l2", "w_stop", "stop_pos_weight", "w_ga"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")
        if self.ga_sharpness <= 0:
            raise ContractError("guided-attention sharpness must be > 0")
        return self

    def resolve_guided(self, n_layers: int, n_heads: int):
        if self.guided is None:
            return tuple((layer, head) for layer in range(n_layers)
                         for head in range(min(2, n_heads)))
        pairs = tuple((int(l), int(h)) for l, h in self.guided)
        for l, h in pairs:
            if not (0 <= l < n_layers and 0 <= h < n_heads):
                raise ContractError(f"guided pair ({l},{h}) outside model "
                                    f"of {n_layers} layers x {n_heads} heads")
        return pairs


def _masked_mean(values: Tensor, mask_col: Tensor | None, count: float) -> Tensor:
    if mask_col is not None:
        values = values * mask_col
    return ad.sum_(values) * (1.0 / count)


def _stream_parts(pred: Tensor, target: np.ndarray, mask_col, count):
    diff = pred - Tensor(target)
    l1 = _masked_mean(ad.absolute(diff), mask_col, count)
    l2 = _masked_mean(diff * diff, mask_col, count)
    return l1, l2


def recon_parts(pred_pre: Tensor, pred_post: Tensor, target: np.ndarray,
                frame_mask: np.ndarray | None = None):
    """Mean-over-valid-elements L1 and L2 parts, summed over the pre- and
    post-postnet streams. Padded frames (mask False) do not contribute."""
    target = np.asarray(target, dtype=np.float64)
    for name, p in (("pre", pred_pre), ("post", pred_post)):
        if tuple(p.shape) != target.shape:
            raise ContractError(
                f"recon_loss: {name} prediction {p.shape} vs target {target.shape}")
    if frame_mask is None:
        count = float(target.size)
        mask_col = None
    else:
        frame_mask = np.asarray(frame_mask, dtype=bool)
        if frame_mask.shape[0] != target.shape[0]:
            raise ContractError("recon_loss: mask length does not match target frames")
        count = float(frame_mask.sum() * target.shape[1])
        if count == 0:
            raise ContractError("recon_loss: mask excludes every frame")
        mask_col = Tensor(frame_mask.astype(np.float64)[:, None])
    l1_pre, l2_pre = _stream_parts(pred_pre, target, mask_col, count)
    l1_post, l2_post = _stream_parts(pred_post, target, mask_col, count)
    return l1_pre + l1_post, l2_pre + l2_post


def recon_loss(pred_pre, pred_post, target, frame_mask=None) -> Tensor:
    l1, l2 = recon_parts(pred_pre, pred_post, target, frame_mask)
    return l1 + l2


def stop_loss(stop_logits: Tensor, stop_targets: np.ndarray, pos_weight: float,
              step_mask: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy per decoder step; the stop=1 term is
    multiplied by pos_weight."""
    targets = np.asarray(stop_targets, dtype=np.float64)
    if tuple(stop_logits.shape) != targets.shape:
        raise ContractError(
            f"stop_loss: logits {stop_logits.shape} vs targets {targets.shape}")
    if step_mask is None:
        valid = np.ones_like(targets, dtype=bool)
    else:
        valid = np.asarray(step_mask, dtype=bool)
    if not (targets[valid] == 1).any():
        raise ContractError("stop_loss: no positive stop target")
    y = Tensor(targets)
    per_step = (y * pos_weight * ad.softplus(-stop_logits)
                + (1.0 - y) * ad.softplus(stop_logits))
    mask_t = None if step_mask is None else Tensor(valid.astype(np.float64))
    return _masked_mean(per_step, mask_t, float(valid.sum()))


@functools.lru_cache(maxsize=512)
def ga_weight_matrix(t_out: int, t_in: int, g: float) -> np.ndarray:
    """Penalty weights 1 - exp(-(n/T_in - t/T_out)^2 / (2 g^2))."""
    t = np.arange(t_out)[:, None] / t_out
    n = np.arange(t_in)[None, :] / t_in
    return 1.0 - np.exp(-((n - t) ** 2) / (2.0 * g * g))


def guided_attention_loss(attn, g: float) -> Tensor:
    """Mean over all cells of attention mass times off-diagonal penalty."""
    if not isinstance(attn, Tensor):
        attn = Tensor(np.asarray(attn, dtype=np.float64))
    t_out, t_in = attn.shape
    return ad.mean(attn * Tensor(ga_weight_matrix(t_out, t_in, float(g))))


def guided_part(cross_weights, weights: LossWeights, n_heads: int) -> Tensor | None:
    """Average guided-attention loss over the configured (layer, head) maps.

    ``cross_weights`` is a per-layer list of per-head weight tensors for the
    transformer model, or a single [T x n] tensor for the recurrent model.
    Returns None when nothing is under guidance.
    """
    g = weights.ga_sharpness
    if isinstance(cross_weights, Tensor):
        return guided_attention_loss(cross_weights, g)
    pairs = weights.resolve_guided(len(cross_weights), n_heads)
    if not pairs:
        return None
    parts = [guided_attention_loss(cross_weights[l][h], g) for l, h in pairs]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))


def text_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of symbol logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.shape
    if targets.shape != (t,):
        raise ContractError(f"text_loss: logits {logits.shape} vs targets {targets.shape}")
    onehot = np.zeros((t, v))
    onehot[np.arange(t), targets] = 1.0
    picked = ad.sum_(logits * Tensor(onehot), axis=-1)
    return ad.mean(ad.logsumexp(logits) - picked)


_REQUIRED = {"vc": ("l1", "l2", "stop"), "tts": ("l1", "l2", "stop"), "asr": ("text",)}
_PART_ORDER = ("l1", "l2", "stop", "text", "ga")


def compose_total(parts: dict, weights: LossWeights, kind: str):
    """Weighted sum of loss parts; returns (total, per-part unweighted report)."""
    if kind not in _REQUIRED:
        raise ContractError(f"unknown model kind: {kind!r}")
    for name in _REQUIRED[kind]:
        if name not in parts:
            raise ContractError(f"missing required loss part: {name}")
    factor = {"l1": weights.w_l1, "l2": weights.w_l2, "stop": weights.w_stop,
              "text": 1.0, "ga": weights.w_ga}
    total = None
    report = {}
    for name in _PART_ORDER:
        if name not in parts or parts[name] is None:
            continue
        part = parts[name]
        report[name] = part.item()
        term = part * factor[name]
        total = term if total is None else total + term
    return total, report
