import math

import numpy as np
import pytest

from seqvc import autodiff as ad
from seqvc import layers as nn
from seqvc.autodiff import Tensor
from seqvc.errors import ContractError


def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# scaled positional encoding

def test_spe_position_zero():
    pos = nn.ScaledPositionalEncoding(6)
    table = nn.spe(1, pos).numpy()
    assert np.allclose(table[0, 0::2], 0.0)
    assert np.allclose(table[0, 1::2], 1.0)


def test_spe_zero_alpha_is_zero_matrix():
    pos = nn.ScaledPositionalEncoding(4)
    pos.alpha.data = np.asarray(0.0)
    assert np.allclose(nn.spe(5, pos).numpy(), 0.0)


def test_spe_direct_value():
    pos = nn.ScaledPositionalEncoding(4)
    table = nn.spe(2, pos).numpy()
    assert abs(table[1, 0] - math.sin(1.0)) < 1e-9


def test_spe_scaling_is_linear_in_alpha():
    pos = nn.ScaledPositionalEncoding(8)
    base = nn.spe(6, pos).numpy().copy()
    pos.alpha.data = np.asarray(2.5)
    assert np.allclose(nn.spe(6, pos).numpy() / 2.5, base, atol=1e-12)


def test_spe_odd_width_rejected():
    with pytest.raises(ContractError):
        nn.ScaledPositionalEncoding(5)


# ---------------------------------------------------------------------------
# scaled dot-product attention

def test_sdpa_single_key():
    q = Tensor([[0.3, -1.0]])
    k = Tensor([[5.0, 5.0]])
    v = Tensor([[7.0]])
    out, w = nn.sdpa(q, k, v)
    assert np.allclose(w.numpy(), [[1.0]])
    assert np.allclose(out.numpy(), [[7.0]])


def test_sdpa_orthogonal_query_uniform():
    q = Tensor([[0.0, 0.0, 1.0]])
    k = Tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    v = Tensor([[2.0], [4.0]])
    out, w = nn.sdpa(q, k, v)
    assert np.allclose(w.numpy(), [[0.5, 0.5]])
    assert np.allclose(out.numpy(), [[3.0]])


def test_sdpa_hand_value():
    # softmax([1/sqrt(2), 0]) ~= [0.6698, 0.3302]; output 0.6698*1 + 0.3302*2
    q = Tensor(np.eye(2))
    k = Tensor(np.eye(2))
    v = Tensor([[1.0], [2.0]])
    out, w = nn.sdpa(q, k, v)
    e = math.exp(1.0 / math.sqrt(2.0))
    expect = e / (e + 1.0)
    assert abs(w.numpy()[0, 0] - expect) < 1e-4
    assert abs(w.numpy()[0, 0] - 0.6698) < 1e-4
    assert abs(out.numpy()[0, 0] - 1.3302) < 1e-4


def test_sdpa_rows_sum_to_one():
    r = rng()
    _, w = nn.sdpa(Tensor(r.normal(size=(5, 3))), Tensor(r.normal(size=(7, 3))),
                   Tensor(r.normal(size=(7, 4))))
    assert np.allclose(w.numpy().sum(axis=1), 1.0, atol=1e-5)
    assert (w.numpy() >= 0).all()


def test_sdpa_permuting_keys_and_values_together_is_invariant():
    r = rng()
    q = Tensor(r.normal(size=(4, 3)))
    k = r.normal(size=(6, 3))
    v = r.normal(size=(6, 5))
    out1, _ = nn.sdpa(q, Tensor(k), Tensor(v))
    perm = r.permutation(6)
    out2, _ = nn.sdpa(q, Tensor(k[perm]), Tensor(v[perm]))
    assert np.allclose(out1.numpy(), out2.numpy(), atol=1e-12)


def test_sdpa_shape_contracts():
    with pytest.raises(ContractError):
        nn.sdpa(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))), Tensor(np.ones((5, 2))))
    with pytest.raises(ContractError):
        nn.sdpa(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))


# ---------------------------------------------------------------------------
# multi-head attention

def test_mha_single_head_identity_projections_equals_sdpa():
    r = rng()
    att = nn.MultiHeadAttention(r, 3, 1)
    for lin in (att.wq, att.wk, att.wv, att.wo):
        lin.w.data = np.eye(3)
        lin.b.data = np.zeros(3)
    q = Tensor(r.normal(size=(2, 3)))
    k = Tensor(r.normal(size=(4, 3)))
    v = Tensor(r.normal(size=(4, 3)))
    out, w = att(q, k, v)
    ref_out, ref_w = nn.sdpa(q, k, v)
    assert np.allclose(out.numpy(), ref_out.numpy(), atol=1e-12)
    assert np.allclose(w.numpy()[0], ref_w.numpy(), atol=1e-12)


def test_mha_zero_value_projection_gives_zero_output():
    r = rng()
    att = nn.MultiHeadAttention(r, 4, 2)
    att.wv.w.data = np.zeros((4, 4))
    att.wv.b.data = np.zeros(4)
    att.wo.b.data = np.zeros(4)
    out, _ = att(Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(5, 4))),
                 Tensor(r.normal(size=(5, 4))))
    assert out.shape == (3, 4)
    assert np.allclose(out.numpy(), 0.0)


def test_mha_two_heads_matches_manual_computation():
    r = rng()
    d, h = 4, 2
    att = nn.MultiHeadAttention(r, d, h)
    q = r.normal(size=(3, d))
    m = r.normal(size=(5, d))

    out, w = att(Tensor(q), Tensor(m), Tensor(m))

    # independent numpy recomputation, head by head
    def lin(x, layer):
        return x @ layer.w.data + layer.b.data

    pq, pk, pv = lin(q, att.wq), lin(m, att.wk), lin(m, att.wv)
    heads = []
    for i in range(h):
        cols = slice(2 * i, 2 * i + 2)
        scores = pq[:, cols] @ pk[:, cols].T / math.sqrt(2)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(w.numpy()[i], weights, atol=1e-12)
        heads.append(weights @ pv[:, cols])
    expect = lin(np.concatenate(heads, axis=1), att.wo)
    assert np.allclose(out.numpy(), expect, atol=1e-12)


def test_mha_head_divisibility_contract():
    with pytest.raises(ContractError):
        nn.MultiHeadAttention(rng(), 6, 4)


def test_causal_mask_zeroes_future_positions_exactly():
    r = rng()
    att = nn.MultiHeadAttention(r, 4, 2)
    x = Tensor(r.normal(size=(5, 4)))
    _, w = att(x, x, x, mask=nn.causal_mask(5))
    for head in w.numpy():
        assert np.array_equal(np.triu(head, k=1), np.zeros_like(head))
        assert np.allclose(head.sum(axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------------------
# position-wise FFN sublayer

def test_ffn_sublayer_zero_weights_reduce_to_layer_norm():
    r = rng()
    f = nn.FfnSublayer(r, 4, 8)
    for lin in (f.ffn.w1, f.ffn.w2):
        lin.w.data = np.zeros_like(lin.w.data)
        lin.b.data = np.zeros_like(lin.b.data)
    x = Tensor(r.normal(size=(3, 4)))
    ln = nn.LayerNorm(4)
    assert np.allclose(f(x).numpy(), ln(x).numpy(), atol=1e-12)


def test_ffn_sublayer_position_independence():
    r = rng()
    f = nn.FfnSublayer(r, 4, 8)
    row = r.normal(size=4)
    out = f(Tensor(np.stack([row, row]))).numpy()
    assert np.allclose(out[0], out[1], atol=1e-12)


def test_ffn_sublayer_hand_value_single_position():
    r = rng()
    f = nn.FfnSublayer(r, 2, 3)
    x = r.normal(size=(1, 2))
    inner = np.maximum(x @ f.ffn.w1.w.data + f.ffn.w1.b.data, 0.0)
    ffn = inner @ f.ffn.w2.w.data + f.ffn.w2.b.data
    pre = x + ffn
    mu, var = pre.mean(), pre.var()
    expect = (pre - mu) / np.sqrt(var + 1e-5)
    assert np.allclose(f(Tensor(x)).numpy(), expect, atol=1e-10)


# ---------------------------------------------------------------------------
# location-sensitive attention

def test_location_attention_single_position():
    r = rng()
    att = nn.LocationSensitiveAttention(r, 3, 3)
    memory = Tensor(r.normal(size=(1, 3)))
    ctx, w = att(Tensor(r.normal(size=(1, 3))), memory, Tensor(np.zeros((1, 1))))
    assert np.allclose(w.numpy(), [[1.0]])
    assert np.allclose(ctx.numpy(), memory.numpy())


def test_location_attention_zero_scoring_vector_uniform():
    r = rng()
    att = nn.LocationSensitiveAttention(r, 3, 3)
    att.score.w.data = np.zeros_like(att.score.w.data)
    memory = r.normal(size=(5, 3))
    ctx, w = att(Tensor(r.normal(size=(1, 3))), Tensor(memory), Tensor(np.zeros((5, 1))))
    assert np.allclose(w.numpy(), 0.2)
    assert np.allclose(ctx.numpy()[0], memory.mean(axis=0), atol=1e-12)


def test_location_attention_matches_manual_scores():
    r = rng()
    att = nn.LocationSensitiveAttention(r, 2, 2, loc_channels=2, loc_width=3)
    query = r.normal(size=(1, 2))
    memory = r.normal(size=(3, 2))
    cum = np.abs(r.normal(size=(3, 1)))

    ctx, w = att(Tensor(query), Tensor(memory), Tensor(cum))

    loc = np.zeros((3, 2))
    cp = np.pad(cum, ((1, 1), (0, 0)))
    for t in range(3):
        loc[t] = np.einsum("kc,kco->o", cp[t:t + 3], att.loc_filters.data)
    scores = np.tanh(query @ att.wq.w.data
                     + memory @ att.wm.w.data + att.wm.b.data
                     + loc @ att.wl.w.data) @ att.score.w.data
    e = np.exp(scores[:, 0] - scores[:, 0].max())
    expect_w = e / e.sum()
    assert np.allclose(w.numpy()[0], expect_w, atol=1e-10)
    assert np.allclose(ctx.numpy()[0], expect_w @ memory, atol=1e-10)


def test_location_attention_length_contract():
    r = rng()
    att = nn.LocationSensitiveAttention(r, 3, 3)
    with pytest.raises(ContractError):
        att(Tensor(r.normal(size=(1, 3))), Tensor(r.normal(size=(4, 3))),
            Tensor(np.zeros((3, 1))))


def test_location_filters_must_be_odd_width():
    with pytest.raises(ContractError):
        nn.LocationSensitiveAttention(rng(), 3, 3, loc_width=4)


# ---------------------------------------------------------------------------
# downsampler

@pytest.mark.parametrize("n,expected", [(16, 4), (1, 1), (10, 3), (4, 1), (5, 2)])
def test_downsampler_output_length(n, expected):
    r = rng()
    down = nn.Downsampler(r, 6, 8)
    out = down(Tensor(r.normal(size=(n, 6))))
    assert out.shape == (expected, 8)
    assert nn.downsampled_length(n) == expected


# ---------------------------------------------------------------------------
# lstm

def test_lstm_zero_dynamics():
    r = rng()
    cell = nn.LSTMCell(r, 2, 3)
    cell.wx.data = np.zeros_like(cell.wx.data)
    cell.wh.data = np.zeros_like(cell.wh.data)
    cell.b.data = np.zeros_like(cell.b.data)
    h, c = cell.step(Tensor(np.ones((1, 2))), *cell.zero_state())
    assert np.allclose(h.numpy(), 0.0)
    assert np.allclose(c.numpy(), 0.0)


def test_lstm_forget_gate_saturation():
    r = rng()
    cell = nn.LSTMCell(r, 2, 3)
    cell.b.data = cell.b.data.copy()
    cell.b.data[3:6] = 50.0  # forget gate saturated at 1
    x = Tensor(r.normal(size=(1, 2)))
    c0 = Tensor(r.normal(size=(1, 3)))
    h0 = Tensor(np.zeros((1, 3)))
    _, c1 = cell.step(x, h0, c0)
    z = x.numpy() @ cell.wx.data + cell.b.data
    i = 1 / (1 + np.exp(-z[:, 0:3]))
    g = np.tanh(z[:, 6:9])
    assert np.allclose(c1.numpy(), c0.numpy() + i * g, atol=1e-8)


def test_lstm_hand_evaluated_cell():
    cell = nn.LSTMCell(rng(), 1, 1)
    cell.wx.data = np.array([[0.5, -0.25, 1.0, 2.0]])
    cell.wh.data = np.array([[1.0, 0.5, -1.0, 0.0]])
    cell.b.data = np.array([0.1, 0.2, 0.3, -0.4])
    x, h0, c0 = 2.0, 0.5, -1.0

    def sig(v):
        return 1 / (1 + math.exp(-v))

    i = sig(0.5 * x + 1.0 * h0 + 0.1)
    f = sig(-0.25 * x + 0.5 * h0 + 0.2)
    g = math.tanh(1.0 * x - 1.0 * h0 + 0.3)
    o = sig(2.0 * x + 0.0 * h0 - 0.4)
    c1 = f * c0 + i * g
    h1 = o * math.tanh(c1)
    h, c = cell.step(Tensor([[x]]), Tensor([[h0]]), Tensor([[c0]]))
    assert abs(c.numpy()[0, 0] - c1) < 1e-12
    assert abs(h.numpy()[0, 0] - h1) < 1e-12


def test_bilstm_shapes_and_direction_sensitivity():
    r = rng()
    bi = nn.BiLSTM(r, 3, 6)
    x = r.normal(size=(5, 3))
    out = bi(Tensor(x)).numpy()
    rev = bi(Tensor(x[::-1].copy())).numpy()
    assert out.shape == (5, 6)
    assert not np.allclose(out, rev[::-1])


# ---------------------------------------------------------------------------
# prenet / postnet / norms

def test_prenet_dropout_active_in_training_only():
    r = rng()
    pre = nn.PreNet(r, 4, 8)
    x = Tensor(np.abs(r.normal(size=(3, 4))) + 1.0)
    eval_out = pre(x).numpy()
    assert np.array_equal(pre(x).numpy(), eval_out)
    mode = nn.RunMode(training=True, rng=np.random.default_rng(0))
    assert not np.allclose(pre(x, mode).numpy(), eval_out)
    inference_on = nn.RunMode(training=False, rng=np.random.default_rng(0),
                              prenet_dropout_at_inference=True)
    assert not np.allclose(pre(x, inference_on).numpy(), eval_out)


def test_postnet_zero_final_layer_outputs_zero():
    r = rng()
    post = nn.PostNet(r, 4, 8)
    post.conv[-1].w.data = np.zeros_like(post.conv[-1].w.data)
    post.conv[-1].b.data = np.zeros_like(post.conv[-1].b.data)
    out = post(Tensor(r.normal(size=(6, 4))))
    assert np.allclose(out.numpy(), 0.0)


def test_instance_norm_normalizes_over_time():
    r = rng()
    inorm = nn.InstanceNorm(3)
    out = inorm(Tensor(r.normal(size=(50, 3)) * 4 + 2)).numpy()
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-6)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-2)


def test_named_parameters_cover_list_attributes():
    r = rng()
    post = nn.PostNet(r, 4, 8)
    names = [n for n, _ in post.named_parameters()]
    assert "conv0.w" in names and "conv4.b" in names
    assert len(names) == 10
