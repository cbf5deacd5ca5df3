"""The training loop: batching with length bucketing, masked losses,
freeze auditing, validation, and loss traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import backward
from .data import Corpus
from .errors import ContractError, NumericError
from .layers import EVAL, RunMode
from .losses import (LossWeights, compose_total, guided_part, recon_parts,
                     stop_loss, text_loss)
from .metrics import diagonality
from .models import (Seq2SeqModel, asr_teacher_forced, decode_teacher_forced,
                     encode)
from .optim import OptimizerConfig, make_optimizer


@dataclass
class TrainSettings:
    batch_size: int = 8
    val_every: int = 200
    log_every: int = 25
    grad_clip: float | None = None
    warmup_steps: int = 0


@dataclass
class Example:
    id: str
    src: np.ndarray   # feature matrix, or symbol ids for text input
    tgt: np.ndarray   # feature matrix, or symbol ids for recognition


def pairs_for_task(corpus: Corpus, kind: str, split: str = "train",
                   source: str | None = None, target: str | None = None):
    """Assemble (input, output) examples from a corpus.

    kind: "tts" text->speech, "asr" speech->text, "ae" speech->same speech,
    "vc" parallel source-speaker speech -> target-speaker speech.
    """
    if kind == "vc":
        pairs = corpus.parallel_pairs(split, source, target)
        return [Example(s.id, s.features, t.features) for s, t in pairs]
    if kind == "tts":
        speaker = source or corpus.speaker_ids()[0]
        utts = corpus.split(split, speaker)
        examples = [Example(u.id, u.symbols, u.features) for u in utts]
    elif kind == "ae":
        speaker = source or corpus.speaker_ids()[0]
        utts = corpus.split(split, speaker)
        examples = [Example(u.id, u.features, u.features) for u in utts]
    elif kind == "asr":
        utts = [u for u in corpus.utterances if u.split == split]
        examples = [Example(f"{u.id}:{u.speaker}", u.features, u.symbols) for u in utts]
    else:
        raise ContractError(f"unknown pairing kind: {kind!r}")
    if not examples:
        raise ContractError(f"no {split} examples for kind {kind!r}")
    return examples


def pad_target(tgt: np.ndarray, r: int, pad_to: int | None = None):
    """Pad frames to a multiple of r (or to pad_to frames) and build masks.

    Returns (padded target, frame mask, stop targets, step mask). The stop
    target marks the step holding the final valid frame."""
    m = tgt.shape[0]
    total = math.ceil(max(m, pad_to or m) / r) * r
    padded = np.zeros((total, tgt.shape[1]))
    padded[:m] = tgt
    frame_mask = np.zeros(total, dtype=bool)
    frame_mask[:m] = True
    steps = total // r
    stop_targets = np.zeros(steps)
    last_step = (m - 1) // r
    stop_targets[last_step] = 1.0
    step_mask = np.arange(steps) <= last_step
    return padded, frame_mask, stop_targets, step_mask


def _valid_steps(cross_weights, n_steps: int):
    """Restrict attention maps to decode steps holding real frames, so the
    guided-attention part ignores padding steps."""
    if isinstance(cross_weights, ad.Tensor):
        return cross_weights[:n_steps, :]
    return [w3[:, :n_steps, :] for w3 in cross_weights]


def example_parts(model: Seq2SeqModel, ex: Example, weights: LossWeights,
                  mode: RunMode = EVAL, pad_to: int | None = None,
                  want_output: bool = False):
    """Loss parts for one example; optionally also the decoder output."""
    cfg = model.config
    memory = encode(model, ex.src, mode)
    if cfg.task == "asr":
        logits, ids_out, cross = asr_teacher_forced(model, memory, ex.tgt, mode)
        parts = {"text": text_loss(logits, ids_out)}
        out = None
        cross_weights = cross
    else:
        y, frame_mask, stop_targets, step_mask = pad_target(ex.tgt, cfg.r, pad_to)
        out = decode_teacher_forced(model, memory, y, mode, frame_mask)
        l1, l2 = recon_parts(out.pre, out.post, y, frame_mask)
        parts = {
            "l1": l1,
            "l2": l2,
            "stop": stop_loss(out.stop_logits, stop_targets,
                              weights.stop_pos_weight, step_mask),
        }
        cross_weights = _valid_steps(out.cross_weights, int(step_mask.sum()))
    if weights.w_ga > 0:
        ga = guided_part(cross_weights, weights, cfg.heads)
        if ga is not None:
            parts["ga"] = ga
    return (parts, out) if want_output else (parts, None)


def batch_parts(model, batch, weights, mode, pad_to=None):
    """Mean loss parts over a batch (every part present in any example)."""
    sums: dict = {}
    for ex in batch:
        parts, _ = example_parts(model, ex, weights, mode, pad_to)
        for k, v in parts.items():
            sums[k] = v if k not in sums else sums[k] + v
    inv = 1.0 / len(batch)
    return {k: v * inv for k, v in sums.items()}


def make_batches(examples, batch_size):
    """Length-bucketed batches: sort by target length, chunk, keep order."""
    ordered = sorted(examples, key=lambda e: (len(e.tgt), e.id))
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


def clip_gradients(tree, max_norm: float):
    total = 0.0
    for t in tree.tensors():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in tree.tensors():
            if t.grad is not None:
                t.grad *= scale
    return norm


@dataclass
class FitResult:
    steps: int
    trace: list = field(default_factory=list)   # (step, part, value)
    aborted: bool = False

    def series(self, part: str):
        return [(s, v) for s, p, v in self.trace if p == part]

    def last(self, part: str):
        values = self.series(part)
        return values[-1][1] if values else None


def validate_model(model, examples, weights: LossWeights):
    """Teacher-forced loss parts plus mean attention diagonality."""
    sums: dict = {}
    diags = []
    with ad.no_grad():
        for ex in examples:
            parts, out = example_parts(model, ex, weights, EVAL, want_output=True)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            if out is not None:
                padded, mask, _, _ = pad_target(ex.tgt, model.config.r)
                diffs = np.abs(out.post.numpy() - padded)
                sums["l1_post"] = sums.get("l1_post", 0.0) + float(diffs[mask].mean())
                diags.append(mean_cross_diagonality(out.cross_weights))
    n = len(examples)
    report = {k: v / n for k, v in sums.items()}
    if diags:
        report["diag"] = float(np.mean(diags))
    return report


def mean_cross_diagonality(cross_weights) -> float:
    if isinstance(cross_weights, ad.Tensor):
        return diagonality(cross_weights.numpy())
    scores = [diagonality(head_map) for w3 in cross_weights for head_map in w3.numpy()]
    return float(np.mean(scores))


def fit(model: Seq2SeqModel, train_examples, val_examples, *, steps: int,
        weights: LossWeights, opt_cfg: OptimizerConfig, settings: TrainSettings,
        seed: int, frozen_prefixes=(), enforce_freeze=True) -> FitResult:
    """Mini-batch training with teacher forcing.

    Frozen prefixes are excluded from the optimizer AND audited for
    bit-identity after every step; any drift raises. On a non-finite loss
    or gradient the last validated parameters are restored and the run is
    marked aborted.
    """
    weights.validate()
    tree = model.params
    for prefix in frozen_prefixes:
        if not tree.subtree_paths(prefix):
            raise ContractError(f"frozen prefix {prefix!r} matches no parameters")
    if not train_examples:
        raise ContractError("fit: empty training set")
    optimizer = make_optimizer(opt_cfg)
    rng = np.random.default_rng(seed)
    mode = RunMode(training=True, rng=rng)
    kind = model.config.task
    batches = make_batches(train_examples, settings.batch_size)
    frozen_snapshot = {}
    for prefix in frozen_prefixes:
        frozen_snapshot.update(tree.snapshot(prefix))
    last_good = tree.snapshot()
    result = FitResult(steps=0)
    step = 0
    while step < steps:
        for bi in rng.permutation(len(batches)):
            if step >= steps:
                break
            step += 1
            tree.zero_grads()
            try:
                parts = batch_parts(model, batches[bi], weights, mode)
                total, report = compose_total(parts, weights, kind)
                backward(total, params=tree.tensors())
                if settings.grad_clip:
                    clip_gradients(tree, settings.grad_clip)
                scale = 1.0
                if settings.warmup_steps:
                    scale = min(1.0, step / settings.warmup_steps)
                optimizer.step(tree, frozen_prefixes if enforce_freeze else (),
                               lr_scale=scale)
            except NumericError:
                for path, arr in last_good.items():
                    tree[path].data = arr.copy()
                result.steps = step
                result.aborted = True
                return result
            if frozen_snapshot:
                drift = tree.drift_from(frozen_snapshot)
                if drift:
                    raise RuntimeError(f"frozen parameter drifted: {drift[0]}")
            if step == 1 or step == steps or step % settings.log_every == 0:
                for name, value in report.items():
                    result.trace.append((step, name, value))
                result.trace.append((step, "total", total.item()))
            if val_examples and (step % settings.val_every == 0 or step == steps):
                for name, value in validate_model(model, val_examples, weights).items():
                    result.trace.append((step, f"val_{name}", value))
                last_good = tree.snapshot()
    result.steps = step
    return result


def write_trace(path: str, trace):
    lines = ["step,part,value"]
    lines += [f"{s},{p},{v!r}" for s, p, v in trace]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
