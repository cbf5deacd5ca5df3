"""Finite-difference verification suites: every layer, every loss, and
end-to-end micro models. Shared by the gradcheck CLI command and the
test suite."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .autodiff import Tensor, grad_check
from .losses import (LossWeights, guided_attention_loss, recon_loss,
                     stop_loss, text_loss)
from .models import ModelConfig, build_model
from .training import Example, batch_parts
from .losses import compose_total


def _mixer(rng, shape):
    """Fixed random coefficients turning a tensor output into a scalar."""
    c = Tensor(rng.normal(size=shape))
    return lambda out: ad.sum_(out * c)


def _params_of(layer):
    return [t for _, t in layer.named_parameters()]


def layer_checks(tol=1e-4, seed=7):
    """(name, report) for every building block at small sizes."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, inputs):
        results.append((name, grad_check(f, inputs, tol=tol)))

    lin = nn.Linear(rng, 3, 4)
    x = Tensor(rng.normal(size=(2, 3)))
    mix = _mixer(rng, (2, 4))
    check("linear", lambda *t: mix(lin(x)), [x] + _params_of(lin))

    ln = nn.LayerNorm(4)
    x = Tensor(rng.normal(size=(3, 4)))
    mix = _mixer(rng, (3, 4))
    check("layer_norm", lambda *t: mix(ln(x)), [x] + _params_of(ln))

    inorm = nn.InstanceNorm(3)
    x = Tensor(rng.normal(size=(5, 3)))
    mix = _mixer(rng, (5, 3))
    check("instance_norm", lambda *t: mix(inorm(x)), [x] + _params_of(inorm))

    x = Tensor(rng.normal(size=(3, 4)))
    mix = _mixer(rng, (3, 4))
    check("softmax", lambda *t: mix(ad.softmax(x)), [x])

    q = Tensor(rng.normal(size=(4, 6)))
    k = Tensor(rng.normal(size=(4, 6)))
    v = Tensor(rng.normal(size=(4, 6)))
    mix = _mixer(rng, (4, 6))
    mask = nn.causal_mask(4)
    check("sdpa_causal", lambda *t: mix(sdpa_out(q, k, v, mask)), [q, k, v])

    att = nn.MultiHeadAttention(rng, 6, 2)
    q = Tensor(rng.normal(size=(3, 6)))
    m = Tensor(rng.normal(size=(5, 6)))
    mix = _mixer(rng, (3, 6))
    check("mha", lambda *t: mix(att(q, m, m)[0]), [q, m] + _params_of(att))

    ffn = nn.FfnSublayer(rng, 6, 8)
    x = Tensor(rng.normal(size=(3, 6)))
    mix = _mixer(rng, (3, 6))
    check("ffn_sublayer", lambda *t: mix(ffn(x)), [x] + _params_of(ffn))

    pos = nn.ScaledPositionalEncoding(6)
    mix = _mixer(rng, (5, 6))
    check("positional_encoding", lambda *t: mix(pos.table(5)), _params_of(pos))

    loc = nn.LocationSensitiveAttention(rng, 4, 4, loc_channels=3, loc_width=5)
    query = Tensor(rng.normal(size=(1, 4)))
    mem = Tensor(rng.normal(size=(6, 4)))
    cum = Tensor(np.abs(rng.normal(size=(6, 1))))
    mix_c = _mixer(rng, (1, 4))
    mix_w = _mixer(rng, (1, 6))

    def loc_f(*t):
        ctx, w = loc(query, mem, cum)
        return mix_c(ctx) + mix_w(w)

    check("location_attention", loc_f, [query, mem, cum] + _params_of(loc))

    down = nn.Downsampler(rng, 6, 8)
    x = Tensor(rng.normal(size=(7, 6)))
    mix = _mixer(rng, (2, 8))
    check("downsampler", lambda *t: mix(down(x)), [x] + _params_of(down))

    conv = nn.Conv1dLayer(rng, 3, 4, kernel=5)
    x = Tensor(rng.normal(size=(6, 3)))
    mix = _mixer(rng, (6, 4))
    check("conv1d", lambda *t: mix(conv(x)), [x] + _params_of(conv))

    cell = nn.LSTMCell(rng, 3, 4)
    x = Tensor(rng.normal(size=(1, 3)))
    h0 = Tensor(rng.normal(size=(1, 4)))
    c0 = Tensor(rng.normal(size=(1, 4)))
    mix_h = _mixer(rng, (1, 4))
    mix_c2 = _mixer(rng, (1, 4))

    def lstm_f(*t):
        h, c = cell.step(x, h0, c0)
        return mix_h(h) + mix_c2(c)

    check("lstm_cell", lstm_f, [x, h0, c0] + _params_of(cell))

    bi = nn.BiLSTM(rng, 3, 4)
    x = Tensor(rng.normal(size=(4, 3)))
    mix = _mixer(rng, (4, 4))
    check("bilstm", lambda *t: mix(bi(x)), [x] + _params_of(bi))

    pre = nn.PreNet(rng, 4, 6)
    x = Tensor(rng.normal(size=(3, 4)))
    mix = _mixer(rng, (3, 6))
    check("prenet", lambda *t: mix(pre(x)), [x] + _params_of(pre))

    post = nn.PostNet(rng, 4, 6)
    x = Tensor(rng.normal(size=(8, 4)))
    mix = _mixer(rng, (8, 4))
    check("postnet", lambda *t: mix(post(x)), [x] + _params_of(post))

    emb = nn.Embedding(rng, 7, 4)
    ids = np.array([0, 3, 3, 6])
    mix = _mixer(rng, (4, 4))
    check("embedding", lambda *t: mix(emb(ids)), _params_of(emb))

    enc = nn.EncoderLayer(rng, 6, 2, 8)
    x = Tensor(rng.normal(size=(4, 6)))
    mix = _mixer(rng, (4, 6))
    check("encoder_layer", lambda *t: mix(enc(x)[0]), [x] + _params_of(enc))

    dec = nn.DecoderLayer(rng, 6, 2, 8)
    x = Tensor(rng.normal(size=(4, 6)))
    m = Tensor(rng.normal(size=(5, 6)))
    mix = _mixer(rng, (4, 6))
    check("decoder_layer",
          lambda *t: mix(dec(x, m, nn.causal_mask(4))[0]), [x, m] + _params_of(dec))

    return results


def sdpa_out(q, k, v, mask):
    out, _ = nn.sdpa(q, k, v, mask=mask)
    return out


def loss_checks(tol=1e-4, seed=11):
    rng = np.random.default_rng(seed)
    results = []

    pre = Tensor(rng.normal(size=(4, 3)))
    post = Tensor(rng.normal(size=(4, 3)))
    target = rng.normal(size=(4, 3))
    mask = np.array([True, True, True, False])
    results.append(("recon_loss", grad_check(
        lambda *t: recon_loss(pre, post, target, mask), [pre, post], tol=tol)))

    logits = Tensor(rng.normal(size=(4,)))
    stop_targets = np.array([0.0, 0.0, 1.0, 0.0])
    step_mask = np.array([True, True, True, False])
    results.append(("stop_loss", grad_check(
        lambda *t: stop_loss(logits, stop_targets, 5.0, step_mask), [logits], tol=tol)))

    scores = Tensor(rng.normal(size=(4, 5)))
    results.append(("guided_attention_loss", grad_check(
        lambda *t: guided_attention_loss(ad.softmax(scores), 0.2), [scores], tol=tol)))

    tl = Tensor(rng.normal(size=(4, 6)))
    results.append(("text_loss", grad_check(
        lambda *t: text_loss(tl, np.array([1, 2, 0, 5])), [tl], tol=tol)))

    return results


def micro_config(architecture="vtn", task="vc", vocab=None) -> ModelConfig:
    return ModelConfig(architecture=architecture, task=task, d_model=8, heads=2,
                       layers=1, d_ff=8, r=2, feat_dim=4, vocab_size=vocab,
                       prenet_dim=4, postnet_dim=4, dropout=0.0).validate()


def end_to_end_checks(tol=1e-3, seed=3):
    """Full-model loss gradients on 2-utterance micro configs."""
    rng = np.random.default_rng(seed)
    results = []
    weights = LossWeights()

    def total_loss(model, examples):
        parts = batch_parts(model, examples, weights, nn.EVAL)
        total, _ = compose_total(parts, weights, model.config.task)
        return total

    for arch in ("vtn", "rnn"):
        model = build_model(micro_config(arch), seed=5)
        examples = [
            Example("a", rng.normal(size=(8, 4)), rng.normal(size=(6, 4))),
            Example("b", rng.normal(size=(6, 4)), rng.normal(size=(7, 4))),
        ]
        inputs = list(model.params.tensors())
        report = grad_check(lambda *t: total_loss(model, examples), inputs, tol=tol)
        results.append((f"end_to_end_{arch}_vc", report))

    model = build_model(micro_config("vtn", "asr", vocab=8), seed=5)
    examples = [
        Example("a", rng.normal(size=(8, 4)), np.array([1, 4, 2])),
        Example("b", rng.normal(size=(6, 4)), np.array([0, 5])),
    ]
    inputs = list(model.params.tensors())
    report = grad_check(lambda *t: total_loss(model, examples), inputs, tol=tol)
    results.append(("end_to_end_vtn_asr", report))

    return results
