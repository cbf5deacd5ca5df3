"""Model building blocks: attention, FFN, positional encoding, conv stacks,
recurrent cells, prenet/postnet.

Layers are plain objects holding parameter tensors; ``named_parameters``
discovers them in attribute-definition order, which fixes the ParamTree
path layout (list attributes contribute ``<name><index>`` segments, so a
``layer`` list yields layer0, layer1, ...).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .params import ParamTree, uniform_param, zeros_param


@dataclass
class RunMode:
    """Per-call execution context for dropout and related switches."""

    training: bool = False
    rng: np.random.Generator | None = None
    prenet_dropout_at_inference: bool = False


EVAL = RunMode(training=False)


class Layer:
    def named_parameters(self, prefix=""):
        for name, attr in vars(self).items():
            yield from _walk(f"{prefix}{name}" if prefix else name, attr)

    def param_tree(self) -> ParamTree:
        return ParamTree(self.named_parameters())


def _walk(path, attr):
    if isinstance(attr, Tensor):
        if attr.requires_grad:
            yield path, attr
    elif isinstance(attr, Layer):
        yield from attr.named_parameters(prefix=path + ".")
    elif isinstance(attr, (list, tuple)):
        for i, item in enumerate(attr):
            yield from _walk(f"{path}{i}", item)


class Linear(Layer):
    def __init__(self, rng, d_in, d_out, bias=True, bias_init=0.0):
        self.w = uniform_param(rng, (d_in, d_out), fan_in=d_in)
        self.b = zeros_param((d_out,), bias_init) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y


class Embedding(Layer):
    def __init__(self, rng, vocab, dim):
        self.table = uniform_param(rng, (vocab, dim), fan_in=dim)

    def __call__(self, ids):
        return ad.embedding(self.table, ids)


class LayerNorm(Layer):
    def __init__(self, dim, eps=1e-5):
        self.gain = zeros_param((dim,), 1.0)
        self.bias = zeros_param((dim,), 0.0)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class InstanceNorm(Layer):
    """Per-utterance, per-channel normalization over the time axis."""

    def __init__(self, channels, eps=1e-5):
        self.gain = zeros_param((channels,), 1.0)
        self.bias = zeros_param((channels,), 0.0)
        self.eps = eps

    def __call__(self, x):
        mu = ad.mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=0, keepdims=True)
        normed = centered / ad.sqrt(var + self.eps)
        return normed * self.gain + self.bias


# ---------------------------------------------------------------------------
# positional encoding

@functools.lru_cache(maxsize=64)
def sinusoid_table(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding indexed by (position, channel pair)."""
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class ScaledPositionalEncoding(Layer):
    """Sinusoidal encoding scaled by a single trainable weight."""

    def __init__(self, d_model):
        if d_model % 2 != 0:
            raise ContractError(f"positional encoding requires even width, got {d_model}")
        self.alpha = zeros_param((), 1.0)
        self.d_model = d_model

    def table(self, length: int) -> Tensor:
        if length < 1:
            raise ContractError(f"positional encoding length must be >= 1, got {length}")
        return ad.mul(self.alpha, Tensor(sinusoid_table(length, self.d_model)))

    def __call__(self, x):
        return ad.add(x, self.table(x.shape[0]))


def spe(length: int, params: ScaledPositionalEncoding) -> Tensor:
    """The [length x d_model] scaled positional encoding matrix."""
    return params.table(length)


# ---------------------------------------------------------------------------
# attention

def sdpa(q, k, v, mask=None):
    """Scaled dot-product attention; returns (output, weights).

    Masked positions (mask False) get weight exactly 0; a row with no
    attendable position is a contract error.
    """
    if k.shape[0] != v.shape[0]:
        raise ContractError(f"sdpa: key rows {k.shape} != value rows {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ContractError(f"sdpa: query dim {q.shape} != key dim {k.shape}")
    d_att = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_att))
    weights = ad.softmax(scores, mask=mask)
    return ad.matmul(weights, v), weights


class MultiHeadAttention(Layer):
    def __init__(self, rng, d_model, heads, d_att=None):
        d_att = d_model if d_att is None else d_att
        if d_att % heads != 0:
            raise ContractError(f"attention dim {d_att} not divisible by {heads} heads")
        self.wq = Linear(rng, d_model, d_att)
        self.wk = Linear(rng, d_model, d_att)
        self.wv = Linear(rng, d_model, d_att)
        self.wo = Linear(rng, d_att, d_model)
        self.heads = heads
        self.head_dim = d_att // heads

    def __call__(self, q, k, v, mask=None):
        """Returns (output, attention weights [heads x Tq x Tk])."""
        if k.shape[0] != v.shape[0]:
            raise ContractError(f"mha: key rows {k.shape} != value rows {v.shape}")
        weights = ad.multihead_scores(self.wq(q), self.wk(k), self.heads, mask=mask)
        return self.wo(ad.multihead_apply(weights, self.wv(v), self.heads)), weights


def mha(q, k, v, params: MultiHeadAttention, mask=None):
    return params(q, k, v, mask=mask)


class FeedForward(Layer):
    def __init__(self, rng, d_model, d_ff):
        self.w1 = Linear(rng, d_model, d_ff)
        self.w2 = Linear(rng, d_ff, d_model)

    def __call__(self, x):
        return self.w2(ad.relu(self.w1(x)))


class FfnSublayer(Layer):
    """Position-wise FFN wrapped in residual + layer normalization."""

    def __init__(self, rng, d_model, d_ff):
        self.ffn = FeedForward(rng, d_model, d_ff)
        self.norm = LayerNorm(d_model)

    def __call__(self, x, mode: RunMode = EVAL, dropout=0.0):
        return self.norm(x + ad.dropout(self.ffn(x), dropout, mode.rng, mode.training))


def ffn_sublayer(x, params: FfnSublayer):
    return params(x)


class EncoderLayer(Layer):
    def __init__(self, rng, d_model, heads, d_ff):
        self.mha = MultiHeadAttention(rng, d_model, heads)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FfnSublayer(rng, d_model, d_ff)

    def __call__(self, x, mode: RunMode = EVAL, dropout=0.0):
        att, weights = self.mha(x, x, x)
        x = self.norm1(x + ad.dropout(att, dropout, mode.rng, mode.training))
        return self.ffn(x, mode, dropout), weights


class DecoderLayer(Layer):
    def __init__(self, rng, d_model, heads, d_ff):
        self.self_attn = MultiHeadAttention(rng, d_model, heads)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FfnSublayer(rng, d_model, d_ff)

    def __call__(self, x, memory, causal_mask, mode: RunMode = EVAL, dropout=0.0):
        att, self_w = self.self_attn(x, x, x, mask=causal_mask)
        x = self.norm1(x + ad.dropout(att, dropout, mode.rng, mode.training))
        att, cross_w = self.cross_attn(x, memory, memory)
        x = self.norm2(x + ad.dropout(att, dropout, mode.rng, mode.training))
        return self.ffn(x, mode, dropout), self_w, cross_w


@functools.lru_cache(maxsize=256)
def causal_mask(n: int) -> np.ndarray:
    """Boolean [n x n]; True where key index <= query index."""
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# location-sensitive attention

class LocationSensitiveAttention(Layer):
    """Additive attention with a convolutional view of cumulative weights."""

    def __init__(self, rng, d_query, d_model, d_att=None, loc_channels=8, loc_width=31):
        if loc_width % 2 == 0:
            raise ContractError(f"location filter width must be odd, got {loc_width}")
        d_att = d_model if d_att is None else d_att
        self.wq = Linear(rng, d_query, d_att, bias=False)
        self.wm = Linear(rng, d_model, d_att)
        self.loc_filters = uniform_param(rng, (loc_width, 1, loc_channels), fan_in=loc_width)
        self.wl = Linear(rng, loc_channels, d_att, bias=False)
        self.score = Linear(rng, d_att, 1, bias=False)
        self.loc_pad = (loc_width // 2, loc_width // 2)

    def __call__(self, query, memory, cum_weights):
        """query [1 x d_query], memory [n x d_model], cum_weights [n x 1].

        Returns (context [1 x d_model], weights [1 x n]). The caller is
        responsible for accumulating the returned weights into cum_weights.
        """
        n = memory.shape[0]
        if cum_weights.shape[0] != n:
            raise ContractError(
                f"location attention: cumulative weights {cum_weights.shape} "
                f"do not match memory of {n} rows")
        loc = ad.conv1d(cum_weights, self.loc_filters, padding=self.loc_pad)
        scores = self.score(ad.tanh(self.wq(query) + self.wm(memory) + self.wl(loc)))
        weights = ad.softmax(ad.reshape(scores, (1, n)))
        return ad.matmul(weights, memory), weights


def location_attention(query, memory, cum_weights, params: LocationSensitiveAttention):
    return params(query, memory, cum_weights)


# ---------------------------------------------------------------------------
# convolutional pieces

class Conv1dLayer(Layer):
    """Same-length 1-D convolution over time (stride 1)."""

    def __init__(self, rng, c_in, c_out, kernel, bias=True):
        self.w = uniform_param(rng, (kernel, c_in, c_out), fan_in=kernel * c_in)
        self.b = zeros_param((c_out,)) if bias else None
        self.padding = ((kernel - 1) // 2, kernel // 2)

    def __call__(self, x):
        return ad.conv1d(x, self.w, self.b, stride=1, padding=self.padding)


class Conv2dLayer(Layer):
    def __init__(self, rng, c_in, c_out, kernel=3, stride=2):
        self.w = uniform_param(rng, (kernel, kernel, c_in, c_out), fan_in=kernel * kernel * c_in)
        self.b = zeros_param((c_out,))
        self.stride = (stride, stride)
        # pad 1 each side with kernel 3 / stride 2 gives ceil(n/2) output steps
        p = (kernel - 1) // 2
        self.padding = ((p, p), (p, p))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


def downsampled_length(n: int) -> int:
    return math.ceil(math.ceil(n / 2) / 2)


class Downsampler(Layer):
    """Two stride-2x2 conv layers shrinking time and frequency by 4,
    followed by a linear map of the flattened channels to d_model."""

    def __init__(self, rng, feat_dim, d_model):
        c1 = max(d_model // 4, 1)
        c2 = max(d_model // 2, 1)
        self.conv1 = Conv2dLayer(rng, 1, c1)
        self.conv2 = Conv2dLayer(rng, c1, c2)
        f_out = downsampled_length(feat_dim)
        self.proj = Linear(rng, f_out * c2, d_model)
        self.feat_dim = feat_dim

    def __call__(self, x):
        n = x.shape[0]
        h = ad.reshape(x, (n, self.feat_dim, 1))
        h = ad.relu(self.conv1(h))
        h = ad.relu(self.conv2(h))
        n_out = h.shape[0]
        return self.proj(ad.reshape(h, (n_out, h.shape[1] * h.shape[2])))


def downsample_conv(x, params: Downsampler):
    return params(x)


# ---------------------------------------------------------------------------
# recurrent cells

class LSTMCell(Layer):
    """Standard LSTM cell; gate layout (input, forget, candidate, output).

    The forget-gate bias is initialized to 1 so early training does not
    wash out cell state.
    """

    def __init__(self, rng, d_in, hidden):
        self.wx = uniform_param(rng, (d_in, 4 * hidden), fan_in=d_in)
        self.wh = uniform_param(rng, (hidden, 4 * hidden), fan_in=hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)
        self.hidden = hidden

    def step(self, x, h, c):
        z = ad.matmul(x, self.wx) + ad.matmul(h, self.wh) + self.b
        hs = self.hidden
        i = ad.sigmoid(z[:, 0:hs])
        f = ad.sigmoid(z[:, hs:2 * hs])
        g = ad.tanh(z[:, 2 * hs:3 * hs])
        o = ad.sigmoid(z[:, 3 * hs:4 * hs])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return h_new, c_new

    def zero_state(self):
        return Tensor(np.zeros((1, self.hidden))), Tensor(np.zeros((1, self.hidden)))


def lstm_step(x, state, params: LSTMCell):
    return params.step(x, *state)


class BiLSTM(Layer):
    """Forward + reversed pass, hidden states concatenated per step."""

    def __init__(self, rng, d_in, d_out):
        hf = d_out // 2
        hb = d_out - hf
        self.fwd = LSTMCell(rng, d_in, hf)
        self.bwd = LSTMCell(rng, d_in, hb)

    def __call__(self, x):
        n = x.shape[0]
        h, c = self.fwd.zero_state()
        fwd_rows = []
        for t in range(n):
            h, c = self.fwd.step(x[t:t + 1, :], h, c)
            fwd_rows.append(h)
        h, c = self.bwd.zero_state()
        bwd_rows = [None] * n
        for t in range(n - 1, -1, -1):
            h, c = self.bwd.step(x[t:t + 1, :], h, c)
            bwd_rows[t] = h
        return ad.concat([ad.concat(fwd_rows, axis=0), ad.concat(bwd_rows, axis=0)], axis=1)


class StackedLSTM(Layer):
    def __init__(self, rng, d_in, hidden, depth):
        dims = [d_in] + [hidden] * depth
        self.cell = [LSTMCell(rng, dims[i], dims[i + 1]) for i in range(depth)]

    def zero_state(self):
        return [cell.zero_state() for cell in self.cell]

    def step(self, x, states):
        new_states = []
        h = x
        for cell, (hc, cc) in zip(self.cell, states):
            hc, cc = cell.step(h, hc, cc)
            new_states.append((hc, cc))
            h = hc
        return h, new_states


# ---------------------------------------------------------------------------
# prenet / postnet

class PreNet(Layer):
    """Two fully connected ReLU layers with always-on dropout during
    training; the information bottleneck ahead of the decoder."""

    def __init__(self, rng, d_in, d_hidden, rate=0.5):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_hidden)
        self.rate = rate

    def __call__(self, x, mode: RunMode = EVAL):
        active = mode.training or mode.prenet_dropout_at_inference
        h = ad.dropout(ad.relu(self.fc1(x)), self.rate, mode.rng, active)
        return ad.dropout(ad.relu(self.fc2(h)), self.rate, mode.rng, active)


class PostNet(Layer):
    """Five same-length conv layers predicting a residual; tanh between
    layers, linear final layer.

    With a frame mask, padded rows are zeroed after every layer so valid
    outputs match what the unpadded sequence would produce (each conv then
    sees exactly the virtual zero padding).
    """

    def __init__(self, rng, feat_dim, channels, kernel=5, depth=5):
        dims = [feat_dim] + [channels] * (depth - 1) + [feat_dim]
        self.conv = [Conv1dLayer(rng, dims[i], dims[i + 1], kernel) for i in range(depth)]

    def __call__(self, x, frame_mask=None):
        col = None if frame_mask is None else \
            Tensor(np.asarray(frame_mask, dtype=np.float64)[:, None])
        h = x if col is None else x * col
        for conv in self.conv[:-1]:
            h = ad.tanh(conv(h))
            if col is not None:
                h = h * col
        out = self.conv[-1](h)
        return out if col is None else out * col
