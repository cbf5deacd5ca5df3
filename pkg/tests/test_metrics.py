import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqvc.errors import ContractError
from seqvc.metrics import (MCD_CONST, McdConfig, cluster_score, diagonality,
                           dtw_align, edit_distance, error_rate,
                           map_labels_to_hidden, mcd, mel_cepstra, trim_silence)


# ---------------------------------------------------------------------------
# DTW with a brute-force oracle

def brute_force_dtw(a, b):
    """Minimum path cost by exhaustive recursion over monotone steps."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    n, m = len(a), len(b)
    d = np.array([[np.linalg.norm(a[i] - b[j]) for j in range(m)] for i in range(n)])

    @functools.cache
    def best(i, j):
        if i == 0 and j == 0:
            return d[0, 0]
        options = []
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1))
        if i > 0:
            options.append(best(i - 1, j))
        if j > 0:
            options.append(best(i, j - 1))
        return min(options) + d[i, j]

    return best(n - 1, m - 1)


def test_dtw_identical_sequences_is_diagonal():
    a = np.arange(12.0).reshape(4, 3)
    path, cost = dtw_align(a, a)
    assert cost == 0.0
    assert path == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_dtw_hand_case():
    path, cost = dtw_align(np.array([1.0, 2.0, 3.0]), np.array([1.0, 3.0]))
    assert cost == pytest.approx(1.0)
    assert path[0] == (0, 0) and path[-1] == (2, 1)


def test_dtw_path_is_monotone_and_continuous():
    rng = np.random.default_rng(0)
    path, _ = dtw_align(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))
    assert path[0] == (0, 0)
    assert path[-1] == (4, 5)
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}


def test_dtw_matches_brute_force_on_many_random_cases():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n, m = rng.integers(1, 7, size=2)
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(m, 2))
        _, cost = dtw_align(a, b)
        assert cost == pytest.approx(brute_force_dtw(a, b), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=1, max_size=6),
    st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=1, max_size=6),
)
def test_dtw_property_matches_brute_force(xs, ys):
    _, cost = dtw_align(np.asarray(xs), np.asarray(ys))
    assert cost == pytest.approx(brute_force_dtw(np.asarray(xs), np.asarray(ys)), abs=1e-9)


def test_dtw_empty_sequence_rejected():
    with pytest.raises(ContractError):
        dtw_align(np.zeros((0, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# silence trimming

def test_trim_constant_energy_keeps_all():
    feats = np.full((6, 4), 1.5)
    assert list(trim_silence(feats, 40.0)) == list(range(6))


def test_trim_single_loud_frame():
    feats = np.full((10, 4), -8.0)
    feats[4] = 5.0
    kept = trim_silence(feats, 40.0)
    assert list(kept) == [4]


def test_trim_infinite_threshold_keeps_all():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(8, 4)) * 10
    assert list(trim_silence(feats, math.inf)) == list(range(8))


def test_trim_never_empty():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(5, 4)) * 20
    assert len(trim_silence(feats, 0.0)) >= 1


# ---------------------------------------------------------------------------
# MCD

def test_mcd_identical_inputs_zero():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(9, 20))
    assert mcd(feats, feats, McdConfig(order=19)) == pytest.approx(0.0, abs=1e-12)


def test_mcd_single_coefficient_difference():
    # build feature rows whose cepstra differ by exactly 1.0 in one coefficient
    from scipy.fft import idct
    order = 19
    base = np.zeros(20)
    delta = np.zeros(20)
    delta[7] = 1.0  # coefficient index 7 (within 1..19)
    conv = idct(base + delta, type=2, norm="ortho")[None, :]
    tgt = idct(base, type=2, norm="ortho")[None, :]
    value = mcd(conv, tgt, McdConfig(order=order, silence_db=math.inf))
    assert value == pytest.approx(MCD_CONST * math.sqrt(2.0), abs=1e-6)
    assert value == pytest.approx(6.1421, abs=1e-3)


def test_mcd_invariant_to_duplicated_target_frames():
    # uniform time-stretch of the target is absorbed by the alignment when
    # the sequences genuinely correspond (small per-frame deviations)
    rng = np.random.default_rng(5)
    conv = rng.normal(size=(6, 12)) * 3
    tgt = conv + 0.01 * rng.normal(size=(6, 12))
    cfg = McdConfig(order=8, silence_db=math.inf)
    base = mcd(conv, tgt, cfg)
    assert base > 0
    doubled = np.repeat(tgt, 2, axis=0)
    assert mcd(conv, doubled, cfg) == pytest.approx(base, rel=1e-9)


def test_mcd_symmetry_with_equal_silence_sets():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(6, 12))
    b = rng.normal(size=(7, 12))
    cfg = McdConfig(order=8, silence_db=math.inf)
    assert mcd(a, b, cfg) == pytest.approx(mcd(b, a, cfg), abs=1e-9)


def test_mcd_nonnegative():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = rng.normal(size=(4, 12))
        b = rng.normal(size=(5, 12))
        assert mcd(a, b, McdConfig(order=8)) >= 0.0


def test_mel_cepstra_order_contract():
    with pytest.raises(ContractError, match="order"):
        mel_cepstra(np.zeros((3, 10)), 10)
    assert mel_cepstra(np.ones((3, 10)), 9).shape == (3, 9)


# ---------------------------------------------------------------------------
# symbol error rate with an independent oracle

def oracle_edit_distance(a, b):
    a, b = list(a), list(b)

    @functools.cache
    def go(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(go(i - 1, j) + 1, go(i, j - 1) + 1,
                   go(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return go(len(a), len(b))


def test_error_rate_identical():
    d, rate = error_rate([1, 2, 3], [1, 2, 3])
    assert (d, rate) == (0, 0.0)


def test_error_rate_single_substitution():
    d, rate = error_rate([1, 9, 3], [1, 2, 3])
    assert d == 1
    assert rate == pytest.approx(1 / 3)


def test_error_rate_kitten_sitting():
    assert edit_distance("kitten", "sitting") == 3


def test_error_rate_empty_reference_rejected():
    with pytest.raises(ContractError):
        error_rate([1], [])


def test_error_rate_matches_oracle_exhaustively():
    rng = np.random.default_rng(8)
    for _ in range(400):
        n, m = rng.integers(0, 9, size=2)
        a = tuple(rng.integers(0, 4, size=n))
        b = tuple(rng.integers(0, 4, size=m))
        assert edit_distance(a, b) == oracle_edit_distance(a, b)


@settings(max_examples=80, deadline=None)
@given(st.text(alphabet="abc", max_size=8), st.text(alphabet="abc", max_size=8),
       st.text(alphabet="abc", max_size=8))
def test_error_rate_triangle_inequality(a, b, c):
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


# ---------------------------------------------------------------------------
# diagonality

def test_diagonality_exact_diagonal_is_one():
    assert diagonality(np.eye(6)) == pytest.approx(1.0)


def test_diagonality_uniform_equals_band_area_fraction():
    from seqvc.losses import ga_weight_matrix
    t = 8
    attn = np.full((t, t), 1.0 / t)
    band_area_fraction = float((1.0 - ga_weight_matrix(t, t, 0.2)).mean())
    assert diagonality(attn) == pytest.approx(band_area_fraction, rel=1e-12)


def test_diagonality_antidiagonal_below_diagonal():
    t = 5
    anti = np.eye(t)[::-1]
    assert diagonality(anti) < diagonality(np.eye(t))
    assert 0.0 <= diagonality(anti) <= 1.0


# ---------------------------------------------------------------------------
# cluster score

def test_cluster_score_separated_clusters_near_one():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(40, 6)) * 0.05 + np.array([10.0] + [0.0] * 5)
    b = rng.normal(size=(40, 6)) * 0.05 - np.array([10.0] + [0.0] * 5)
    reps = np.vstack([a, b])
    labels = np.array([0] * 40 + [1] * 40)
    score, proj, kept = cluster_score(reps, labels)
    assert score > 0.98
    assert proj.shape == (80, 2)
    assert kept.shape == (80,)


def test_cluster_score_random_labels_near_zero():
    rng = np.random.default_rng(10)
    reps = rng.normal(size=(500, 8))
    labels = rng.integers(0, 3, size=500)
    score, _, _ = cluster_score(reps, labels)
    assert abs(score) < 0.1


def test_cluster_score_scale_free_and_stable_under_duplication():
    rng = np.random.default_rng(11)
    reps = rng.normal(size=(60, 5))
    labels = rng.integers(0, 2, size=60)
    s1, _, _ = cluster_score(reps, labels)
    # the score is a ratio of distances: exactly scale-free
    s_scaled, _, _ = cluster_score(7.0 * reps, labels)
    assert s1 == pytest.approx(s_scaled, abs=1e-12)
    # copying every point shifts each mean intra-distance by O(1/n) only
    s_dup, _, _ = cluster_score(np.vstack([reps, reps]), np.concatenate([labels, labels]))
    assert s_dup == pytest.approx(s1, abs=0.05)


def test_cluster_score_rotation_invariance():
    rng = np.random.default_rng(12)
    reps = rng.normal(size=(50, 4))
    labels = rng.integers(0, 2, size=50)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    s1, _, _ = cluster_score(reps, labels)
    s2, _, _ = cluster_score(reps @ q, labels)
    assert s1 == pytest.approx(s2, abs=1e-9)


def test_cluster_score_top_k_and_exclusions():
    rng = np.random.default_rng(13)
    reps = np.vstack([rng.normal(size=(30, 4)) + 8, rng.normal(size=(30, 4)) - 8,
                      rng.normal(size=(5, 4))])
    labels = np.array([0] * 30 + [1] * 30 + [9] * 5)
    score, _, kept = cluster_score(reps, labels, top_k=2)
    assert set(kept) == {0, 1}
    score2, _, kept2 = cluster_score(reps, labels, top_k=3, exclude=(9,))
    assert set(kept2) == {0, 1}
    with pytest.raises(ContractError, match="fewer than 2"):
        cluster_score(reps, np.zeros(65, dtype=int))


def test_map_labels_to_hidden_majority_windows():
    labels = np.array([0, 0, 0, 1, 1, 1, 1, 2])
    mapped = map_labels_to_hidden(labels, 2)
    assert list(mapped) == [0, 1]
    # windows of ceil(8/4)=2: [0,0] [0,1] [1,1] [1,2]; ties pick the smaller id
    mapped4 = map_labels_to_hidden(labels, 4)
    assert list(mapped4) == [0, 0, 1, 1]
