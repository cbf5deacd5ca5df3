"""Sequence-to-sequence models: (transformer | recurrent) encoders and
decoders assembled for the voice-conversion, text-to-speech, and
recognition tasks under one interface.

Every model is an encoder/decoder pair whose parameter paths start with
``encoder.`` or ``decoder.``; that prefix partition is the unit of
parameter transfer and freezing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .autodiff import Tensor
from .errors import ContractError
from .layers import EVAL, Layer, RunMode

ARCHITECTURES = ("vtn", "rnn")
TASKS = ("vc", "tts", "asr")


@dataclass
class ModelConfig:
    architecture: str = "vtn"
    task: str = "vc"
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    d_ff: int = 64
    r: int = 2
    feat_dim: int = 80
    vocab_size: int | None = None
    prenet_dim: int = 256
    postnet_dim: int = 256
    dropout: float = 0.1
    stop_threshold: float = 0.5
    max_length_ratio: float = 10.0

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture: {self.architecture!r}")
        if self.task not in TASKS:
            raise ContractError(f"unknown task: {self.task!r}")
        if self.r < 1:
            raise ContractError(f"reduction factor must be >= 1, got {self.r}")
        if self.feat_dim < 1 or self.d_model < 1:
            raise ContractError("feat_dim and d_model must be positive")
        if self.architecture == "vtn":
            if self.d_model % 2 != 0:
                raise ContractError(f"vtn requires even d_model, got {self.d_model}")
            if self.d_model % self.heads != 0:
                raise ContractError(
                    f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.task == "vc" and self.vocab_size is not None:
            raise ContractError("vc task takes no vocabulary")
        if self.task in ("tts", "asr"):
            if self.vocab_size is None or self.vocab_size < 3:
                raise ContractError(f"{self.task} task requires vocab_size >= 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_length_ratio <= 0:
            raise ContractError("max_length_ratio must be positive")
        return self


def toy_config(**overrides) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    base = dict(architecture="vtn", task="vc", d_model=32, heads=4, layers=2,
                d_ff=64, r=2, feat_dim=20, prenet_dim=32, postnet_dim=32,
                dropout=0.1, stop_threshold=0.5, max_length_ratio=10.0)
    base.update(overrides)
    return ModelConfig(**base).validate()


def bos_id(vocab_size: int) -> int:
    return vocab_size - 2


def eos_id(vocab_size: int) -> int:
    return vocab_size - 1


# ---------------------------------------------------------------------------
# encoders

class TransformerSpeechEncoder(Layer):
    def __init__(self, rng, cfg: ModelConfig):
        self.down = nn.Downsampler(rng, cfg.feat_dim, cfg.d_model)
        self.pos = nn.ScaledPositionalEncoding(cfg.d_model)
        self.layer = [nn.EncoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                      for _ in range(cfg.layers)]
        self.rate = cfg.dropout
        # fan-scaled conv init leaves the content an order of magnitude below
        # the positional signal; sqrt(d) restores parity, as on the text side
        self.scale = math.sqrt(cfg.d_model)

    def __call__(self, x: Tensor, mode: RunMode = EVAL):
        h = self.down(x) * self.scale
        h = ad.dropout(self.pos(h), self.rate, mode.rng, mode.training)
        weights = []
        for layer in self.layer:
            h, w = layer(h, mode, self.rate)
            weights.append(w)
        return h, weights


class TransformerTextEncoder(Layer):
    def __init__(self, rng, cfg: ModelConfig):
        self.embed = nn.Embedding(rng, cfg.vocab_size, cfg.d_model)
        self.pos = nn.ScaledPositionalEncoding(cfg.d_model)
        self.layer = [nn.EncoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                      for _ in range(cfg.layers)]
        self.rate = cfg.dropout
        # sqrt(d) keeps symbol identity on par with the positional signal
        self.scale = math.sqrt(cfg.d_model)

    def __call__(self, ids: np.ndarray, mode: RunMode = EVAL):
        h = ad.dropout(self.pos(self.embed(ids) * self.scale),
                       self.rate, mode.rng, mode.training)
        weights = []
        for layer in self.layer:
            h, w = layer(h, mode, self.rate)
            weights.append(w)
        return h, weights


class RnnSpeechEncoder(Layer):
    """Linear projection, conv stack with per-utterance normalization and
    ReLU, then a bidirectional LSTM."""

    CONV_DEPTH = 2

    def __init__(self, rng, cfg: ModelConfig):
        self.proj = nn.Linear(rng, cfg.feat_dim, cfg.d_model)
        self.conv = [nn.Conv1dLayer(rng, cfg.d_model, cfg.d_model, kernel=5)
                     for _ in range(self.CONV_DEPTH)]
        self.norm = [nn.InstanceNorm(cfg.d_model) for _ in range(self.CONV_DEPTH)]
        self.bilstm = nn.BiLSTM(rng, cfg.d_model, cfg.d_model)

    def __call__(self, x: Tensor, mode: RunMode = EVAL):
        h = self.proj(x)
        for conv, norm in zip(self.conv, self.norm):
            h = ad.relu(norm(conv(h)))
        return self.bilstm(h), []


class RnnTextEncoder(Layer):
    CONV_DEPTH = 2

    def __init__(self, rng, cfg: ModelConfig):
        self.embed = nn.Embedding(rng, cfg.vocab_size, cfg.d_model)
        self.conv = [nn.Conv1dLayer(rng, cfg.d_model, cfg.d_model, kernel=5)
                     for _ in range(self.CONV_DEPTH)]
        self.norm = [nn.InstanceNorm(cfg.d_model) for _ in range(self.CONV_DEPTH)]
        self.bilstm = nn.BiLSTM(rng, cfg.d_model, cfg.d_model)

    def __call__(self, ids: np.ndarray, mode: RunMode = EVAL):
        h = self.embed(ids)
        for conv, norm in zip(self.conv, self.norm):
            h = ad.relu(norm(conv(h)))
        return self.bilstm(h), []


# ---------------------------------------------------------------------------
# decoder outputs

@dataclass
class TeacherForcedOut:
    """Training-time decode: tensors stay on the tape."""

    pre: Tensor                 # [m x feat] before the postnet residual
    post: Tensor                # [m x feat]
    stop_logits: Tensor         # [m / r]
    cross_weights: object       # [layer][head] tensors (vtn) or one [T x n] tensor (rnn)
    self_weights: object = None


@dataclass
class DecodeResult:
    """Inference-time decode: plain arrays."""

    features: np.ndarray        # post-postnet [m x feat], m a multiple of r
    pre_features: np.ndarray
    stop_probs: np.ndarray      # [m / r]
    attention: dict             # {"cross": ..., "self": ...} numpy maps
    stopped_by: str             # "threshold" | "max_length"


# ---------------------------------------------------------------------------
# speech decoders

def _teacher_inputs(y: np.ndarray, r: int) -> np.ndarray:
    """Shifted decoder inputs: an all-zero go frame, then the last frame of
    each preceding group of r target frames."""
    steps = y.shape[0] // r
    go = np.zeros((1, y.shape[1]))
    if steps == 1:
        return go
    return np.vstack([go, y[r - 1::r][:steps - 1]])


class TransformerSpeechDecoder(Layer):
    def __init__(self, rng, cfg: ModelConfig):
        self.prenet = nn.PreNet(rng, cfg.feat_dim, cfg.prenet_dim)
        self.inproj = nn.Linear(rng, cfg.prenet_dim, cfg.d_model)
        self.pos = nn.ScaledPositionalEncoding(cfg.d_model)
        self.layer = [nn.DecoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                      for _ in range(cfg.layers)]
        self.outproj = nn.Linear(rng, cfg.d_model, cfg.r * cfg.feat_dim)
        self.stop = nn.Linear(rng, cfg.d_model, 1, bias_init=-5.0)
        self.postnet = nn.PostNet(rng, cfg.feat_dim, cfg.postnet_dim)
        self.r = cfg.r
        self.feat_dim = cfg.feat_dim
        self.rate = cfg.dropout

    def _core(self, memory: Tensor, dec_in: np.ndarray, mode: RunMode):
        t = dec_in.shape[0]
        x = self.prenet(Tensor(dec_in), mode)
        x = ad.dropout(self.pos(self.inproj(x)), self.rate, mode.rng, mode.training)
        mask = nn.causal_mask(t)
        self_w, cross_w = [], []
        for layer in self.layer:
            x, sw, cw = layer(x, memory, mask, mode, self.rate)
            self_w.append(sw)
            cross_w.append(cw)
        return x, self_w, cross_w

    def _project(self, core: Tensor):
        steps = core.shape[0]
        pre = ad.reshape(self.outproj(core), (steps * self.r, self.feat_dim))
        stop_logits = ad.reshape(self.stop(core), (steps,))
        return pre, stop_logits

    def teacher_forced(self, memory: Tensor, y: np.ndarray, mode: RunMode = EVAL,
                       frame_mask: np.ndarray | None = None):
        if y.shape[0] % self.r != 0:
            raise ContractError(
                f"target of {y.shape[0]} frames is not a multiple of r={self.r}")
        core, self_w, cross_w = self._core(memory, _teacher_inputs(y, self.r), mode)
        pre, stop_logits = self._project(core)
        post = pre + self.postnet(pre, frame_mask)
        return TeacherForcedOut(pre, post, stop_logits, cross_w, self_w)

    def autoregressive(self, memory: Tensor, threshold: float, max_steps: int):
        rows = [np.zeros(self.feat_dim)]
        pre_groups, stop_probs = [], []
        stopped_by = "max_length"
        self_w = cross_w = None
        with ad.no_grad():
            for step in range(1, max_steps + 1):
                core, self_w, cross_w = self._core(memory, np.vstack(rows), EVAL)
                last = core[step - 1:step, :]
                group = ad.reshape(self.outproj(last), (self.r, self.feat_dim))
                prob = ad.sigmoid(self.stop(last)).item()
                pre_groups.append(group.numpy())
                stop_probs.append(prob)
                if prob >= threshold:
                    stopped_by = "threshold"
                    break
                if step == max_steps:
                    break
                rows.append(pre_groups[-1][-1])
            pre = np.vstack(pre_groups)
            post = (Tensor(pre) + self.postnet(Tensor(pre))).numpy()
        attention = {
            "self": [list(w3.numpy()) for w3 in self_w],
            "cross": [list(w3.numpy()) for w3 in cross_w],
        }
        return DecodeResult(post, pre, np.asarray(stop_probs), attention, stopped_by)


class RnnSpeechDecoder(Layer):
    """Location-sensitive attention driving a stacked unidirectional LSTM;
    output and stop projections see both the LSTM state and the context."""

    LSTM_DEPTH = 2

    def __init__(self, rng, cfg: ModelConfig):
        self.prenet = nn.PreNet(rng, cfg.feat_dim, cfg.prenet_dim)
        self.att = nn.LocationSensitiveAttention(rng, cfg.d_model, cfg.d_model)
        self.lstm = nn.StackedLSTM(rng, cfg.prenet_dim + cfg.d_model, cfg.d_model,
                                   self.LSTM_DEPTH)
        self.outproj = nn.Linear(rng, 2 * cfg.d_model, cfg.r * cfg.feat_dim)
        self.stop = nn.Linear(rng, 2 * cfg.d_model, 1, bias_init=-5.0)
        self.postnet = nn.PostNet(rng, cfg.feat_dim, cfg.postnet_dim)
        self.r = cfg.r
        self.feat_dim = cfg.feat_dim
        self.d_model = cfg.d_model

    def _init_state(self, n):
        return {
            "lstm": self.lstm.zero_state(),
            "cum": Tensor(np.zeros((n, 1))),
            "query": Tensor(np.zeros((1, self.d_model))),
        }

    def _step(self, y_prev: Tensor, state, memory: Tensor, mode: RunMode):
        context, weights = self.att(state["query"], memory, state["cum"])
        x = ad.concat([self.prenet(y_prev, mode), context], axis=1)
        h_top, lstm_state = self.lstm.step(x, state["lstm"])
        vec = ad.concat([h_top, context], axis=1)
        group = ad.reshape(self.outproj(vec), (self.r, self.feat_dim))
        stop_logit = self.stop(vec)
        new_state = {
            "lstm": lstm_state,
            "cum": state["cum"] + ad.transpose(weights),
            "query": h_top,
        }
        return group, stop_logit, weights, new_state

    def teacher_forced(self, memory: Tensor, y: np.ndarray, mode: RunMode = EVAL,
                       frame_mask: np.ndarray | None = None):
        if y.shape[0] % self.r != 0:
            raise ContractError(
                f"target of {y.shape[0]} frames is not a multiple of r={self.r}")
        dec_in = _teacher_inputs(y, self.r)
        state = self._init_state(memory.shape[0])
        groups, stops, att_rows = [], [], []
        for t in range(dec_in.shape[0]):
            group, stop_logit, weights, state = self._step(
                Tensor(dec_in[t:t + 1]), state, memory, mode)
            groups.append(group)
            stops.append(stop_logit)
            att_rows.append(weights)
        pre = ad.concat(groups, axis=0)
        post = pre + self.postnet(pre, frame_mask)
        stop_logits = ad.reshape(ad.concat(stops, axis=0), (len(stops),))
        attn = ad.concat(att_rows, axis=0)
        return TeacherForcedOut(pre, post, stop_logits, attn)

    def autoregressive(self, memory: Tensor, threshold: float, max_steps: int):
        state = self._init_state(memory.shape[0])
        prev = np.zeros((1, self.feat_dim))
        pre_groups, stop_probs, att_rows = [], [], []
        stopped_by = "max_length"
        with ad.no_grad():
            for step in range(1, max_steps + 1):
                group, stop_logit, weights, state = self._step(
                    Tensor(prev), state, memory, EVAL)
                pre_groups.append(group.numpy())
                stop_probs.append(ad.sigmoid(stop_logit).item())
                att_rows.append(weights.numpy())
                if stop_probs[-1] >= threshold:
                    stopped_by = "threshold"
                    break
                if step == max_steps:
                    break
                prev = pre_groups[-1][-1:]
            pre = np.vstack(pre_groups)
            post = (Tensor(pre) + self.postnet(Tensor(pre))).numpy()
        attention = {"cross": np.vstack(att_rows)}
        return DecodeResult(post, pre, np.asarray(stop_probs), attention, stopped_by)


# ---------------------------------------------------------------------------
# text decoders (recognition)

class TransformerTextDecoder(Layer):
    def __init__(self, rng, cfg: ModelConfig):
        self.embed = nn.Embedding(rng, cfg.vocab_size, cfg.d_model)
        self.pos = nn.ScaledPositionalEncoding(cfg.d_model)
        self.layer = [nn.DecoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff)
                      for _ in range(cfg.layers)]
        self.outproj = nn.Linear(rng, cfg.d_model, cfg.vocab_size)
        self.rate = cfg.dropout
        self.scale = math.sqrt(cfg.d_model)

    def _core(self, memory: Tensor, ids: np.ndarray, mode: RunMode):
        x = ad.dropout(self.pos(self.embed(ids) * self.scale),
                       self.rate, mode.rng, mode.training)
        mask = nn.causal_mask(len(ids))
        self_w, cross_w = [], []
        for layer in self.layer:
            x, sw, cw = layer(x, memory, mask, mode, self.rate)
            self_w.append(sw)
            cross_w.append(cw)
        return x, self_w, cross_w

    def teacher_forced(self, memory: Tensor, ids_in: np.ndarray, mode: RunMode = EVAL):
        core, self_w, cross_w = self._core(memory, ids_in, mode)
        return self.outproj(core), self_w, cross_w

    def greedy(self, memory: Tensor, bos: int, eos: int, max_len: int):
        ids = [bos]
        with ad.no_grad():
            while len(ids) - 1 < max_len:
                logits, _, _ = self.teacher_forced(memory, np.asarray(ids), EVAL)
                nxt = int(np.argmax(logits.numpy()[-1]))
                if nxt == eos:
                    break
                ids.append(nxt)
        return ids[1:]


class RnnTextDecoder(Layer):
    LSTM_DEPTH = 2

    def __init__(self, rng, cfg: ModelConfig):
        self.embed = nn.Embedding(rng, cfg.vocab_size, cfg.d_model)
        self.att = nn.LocationSensitiveAttention(rng, cfg.d_model, cfg.d_model)
        self.lstm = nn.StackedLSTM(rng, 2 * cfg.d_model, cfg.d_model, self.LSTM_DEPTH)
        self.outproj = nn.Linear(rng, 2 * cfg.d_model, cfg.vocab_size)
        self.d_model = cfg.d_model

    def _init_state(self, n):
        return {
            "lstm": self.lstm.zero_state(),
            "cum": Tensor(np.zeros((n, 1))),
            "query": Tensor(np.zeros((1, self.d_model))),
        }

    def _step(self, sym: int, state, memory: Tensor):
        context, weights = self.att(state["query"], memory, state["cum"])
        emb = self.embed(np.asarray([sym]))
        h_top, lstm_state = self.lstm.step(ad.concat([emb, context], axis=1), state["lstm"])
        logits = self.outproj(ad.concat([h_top, context], axis=1))
        new_state = {
            "lstm": lstm_state,
            "cum": state["cum"] + ad.transpose(weights),
            "query": h_top,
        }
        return logits, weights, new_state

    def teacher_forced(self, memory: Tensor, ids_in: np.ndarray, mode: RunMode = EVAL):
        state = self._init_state(memory.shape[0])
        rows, att_rows = [], []
        for sym in ids_in:
            logits, weights, state = self._step(int(sym), state, memory)
            rows.append(logits)
            att_rows.append(weights)
        return ad.concat(rows, axis=0), None, ad.concat(att_rows, axis=0)

    def greedy(self, memory: Tensor, bos: int, eos: int, max_len: int):
        state = self._init_state(memory.shape[0])
        out = []
        sym = bos
        with ad.no_grad():
            while len(out) < max_len:
                logits, _, state = self._step(sym, state, memory)
                sym = int(np.argmax(logits.numpy()[0]))
                if sym == eos:
                    break
                out.append(sym)
        return out


# ---------------------------------------------------------------------------
# model assembly

class Seq2SeqModel(Layer):
    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        rng = np.random.default_rng(seed)
        if config.architecture == "vtn":
            if config.task == "tts":
                self.encoder = TransformerTextEncoder(rng, config)
            else:
                self.encoder = TransformerSpeechEncoder(rng, config)
            if config.task == "asr":
                self.decoder = TransformerTextDecoder(rng, config)
            else:
                self.decoder = TransformerSpeechDecoder(rng, config)
        else:
            if config.task == "tts":
                self.encoder = RnnTextEncoder(rng, config)
            else:
                self.encoder = RnnSpeechEncoder(rng, config)
            if config.task == "asr":
                self.decoder = RnnTextDecoder(rng, config)
            else:
                self.decoder = RnnSpeechDecoder(rng, config)
        self.config = config
        self.params = self.param_tree()
        self.seed = seed


def build_model(config: ModelConfig, seed: int) -> Seq2SeqModel:
    return Seq2SeqModel(config, seed)


def encode(model: Seq2SeqModel, x, mode: RunMode = EVAL) -> Tensor:
    """Map source features (vc/asr) or symbol ids (tts) to hidden rows."""
    cfg = model.config
    x = np.asarray(x)
    if x.size == 0:
        raise ContractError("encode: empty input")
    if cfg.task == "tts":
        if not np.issubdtype(x.dtype, np.integer):
            raise ContractError("encode: tts input must be symbol ids")
        h, _ = model.encoder(x.astype(np.int64), mode)
    else:
        if x.ndim != 2 or x.shape[1] != cfg.feat_dim:
            raise ContractError(
                f"encode: expected [n x {cfg.feat_dim}] features, got {x.shape}")
        h, _ = model.encoder(Tensor(x), mode)
    return h


def decode_teacher_forced(model: Seq2SeqModel, memory: Tensor, y: np.ndarray,
                          mode: RunMode = EVAL,
                          frame_mask: np.ndarray | None = None) -> TeacherForcedOut:
    if memory.shape[0] < 1:
        raise ContractError("decode: empty encoder output")
    if model.config.task == "asr":
        raise ContractError("teacher-forced frame decoding requires a speech decoder")
    return model.decoder.teacher_forced(memory, np.asarray(y, dtype=np.float64),
                                        mode, frame_mask)


def decode_autoregressive(model: Seq2SeqModel, memory: Tensor) -> DecodeResult:
    if memory.shape[0] < 1:
        raise ContractError("decode: empty encoder output")
    cfg = model.config
    if cfg.task == "asr":
        raise ContractError("autoregressive frame decoding requires a speech decoder")
    max_steps = math.ceil(cfg.max_length_ratio * memory.shape[0])
    return model.decoder.autoregressive(memory, cfg.stop_threshold, max_steps)


def decode_text(model: Seq2SeqModel, memory: Tensor) -> list[int]:
    """Greedy symbol decoding with begin/end-of-sequence handling."""
    cfg = model.config
    if cfg.task != "asr":
        raise ContractError("decode_text requires an asr model")
    return model.decoder.greedy(memory, bos_id(cfg.vocab_size), eos_id(cfg.vocab_size),
                                max_len=2 * memory.shape[0])


def asr_teacher_forced(model: Seq2SeqModel, memory: Tensor, targets: np.ndarray,
                       mode: RunMode = EVAL):
    """Teacher-forced recognition pass.

    Returns (logits [T+1 x vocab], target ids [T+1], cross attention), where
    the decoder consumes [bos, y...] and is scored against [y..., eos].
    """
    cfg = model.config
    targets = np.asarray(targets, dtype=np.int64)
    ids_in = np.concatenate([[bos_id(cfg.vocab_size)], targets])
    ids_out = np.concatenate([targets, [eos_id(cfg.vocab_size)]])
    logits, _, cross = model.decoder.teacher_forced(memory, ids_in, mode)
    return logits, ids_out, cross
