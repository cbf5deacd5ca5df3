"""Objective evaluation: DTW-aligned mel-cepstral distortion, silence
trimming, symbol error rate, attention diagonality, and cluster analysis
of encoder hidden representations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from sklearn.metrics import silhouette_score

from .errors import ContractError
from .losses import ga_weight_matrix

MCD_CONST = 10.0 / math.log(10.0)


@dataclass
class McdConfig:
    order: int = 24            # cepstral coefficients 1..order enter the distance
    silence_db: float = 40.0   # keep frames within this many dB of the loudest
    g: float = 0.2             # band sharpness shared with the diagonality score

    def validate(self):
        if self.order < 1:
            raise ContractError("mel-cepstral order must be >= 1")
        return self


# ---------------------------------------------------------------------------
# alignment

def _pairwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d2 = np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)
    return np.sqrt(d2)


def dtw_align(a, b, dist=None):
    """Minimum-cost monotone alignment between two frame sequences.

    Steps move down, right, or diagonally by one; ties prefer the diagonal,
    then the i-advance. Returns (path as (i, j) pairs, total cost).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("dtw_align: empty sequence")
    n, m = a.shape[0], b.shape[0]
    if dist is None:
        d = _pairwise_euclidean(a, b)
    else:
        d = np.array([[dist(a[i], b[j]) for j in range(m)] for i in range(n)])
    cost = np.full((n, m), np.inf)
    move = np.zeros((n, m), dtype=np.int8)  # 0 diag, 1 i-advance, 2 j-advance
    cost[0, 0] = d[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            candidates = (
                cost[i - 1, j - 1] if i > 0 and j > 0 else np.inf,
                cost[i - 1, j] if i > 0 else np.inf,
                cost[i, j - 1] if j > 0 else np.inf,
            )
            best = int(np.argmin(candidates))  # argmin takes the first minimum
            cost[i, j] = candidates[best] + d[i, j]
            move[i, j] = best
    path = []
    i, j = n - 1, m - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        step = move[i, j]
        if step == 0:
            i, j = i - 1, j - 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return path, float(cost[n - 1, m - 1])


# ---------------------------------------------------------------------------
# silence and cepstra

def frame_energy_db(features: np.ndarray) -> np.ndarray:
    """Per-frame energy in dB, treating features as log magnitudes."""
    energy = np.exp(np.asarray(features, dtype=np.float64)).sum(axis=1)
    return 10.0 * np.log10(np.maximum(energy, 1e-300))


def trim_silence(features: np.ndarray, threshold_db: float = 40.0) -> np.ndarray:
    """Indices of frames within threshold_db of the loudest frame. The
    loudest frame always survives, so the result is never empty."""
    features = np.asarray(features)
    if features.shape[0] == 0:
        raise ContractError("trim_silence: empty features")
    db = frame_energy_db(features)
    if math.isinf(threshold_db):
        return np.arange(features.shape[0])
    return np.flatnonzero(db >= db.max() - threshold_db)


def mel_cepstra(features: np.ndarray, order: int) -> np.ndarray:
    """Coefficients 1..order of the type-II DCT of each feature row."""
    features = np.asarray(features, dtype=np.float64)
    if order > features.shape[1] - 1:
        raise ContractError(
            f"cepstral order {order} needs at least {order + 1} feature dims, "
            f"got {features.shape[1]}")
    return dct(features, type=2, norm="ortho", axis=1)[:, 1:order + 1]


def mcd(converted: np.ndarray, target: np.ndarray, cfg: McdConfig | None = None) -> float:
    """Mel-cepstral distortion in dB over DTW-aligned non-silent frames."""
    cfg = (cfg or McdConfig()).validate()
    converted = np.asarray(converted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if converted.shape[0] == 0 or target.shape[0] == 0:
        raise ContractError("mcd: empty features")
    mc = mel_cepstra(converted[trim_silence(converted, cfg.silence_db)], cfg.order)
    mt = mel_cepstra(target[trim_silence(target, cfg.silence_db)], cfg.order)
    path, _ = dtw_align(mc, mt)
    diffs = np.array([mc[i] - mt[j] for i, j in path])
    per_pair = MCD_CONST * np.sqrt(2.0 * (diffs * diffs).sum(axis=1))
    return float(per_pair.mean())


# ---------------------------------------------------------------------------
# symbol error rate

def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit costs."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[len(ref)]


def error_rate(hyp, ref):
    """(edit distance, distance / reference length)."""
    ref = list(ref)
    if not ref:
        raise ContractError("error_rate: empty reference")
    d = edit_distance(hyp, ref)
    return d, d / len(ref)


# ---------------------------------------------------------------------------
# attention diagonality

def diagonality(attn: np.ndarray, g: float = 0.2) -> float:
    """Fraction of attention mass inside the soft diagonal band: 1 for an
    exact diagonal one-hot square map, lower as mass moves off-diagonal."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2 or attn.shape[0] == 0 or attn.shape[1] == 0:
        raise ContractError(f"diagonality: need a 2-D attention map, got {attn.shape}")
    w = ga_weight_matrix(attn.shape[0], attn.shape[1], g)
    mass = attn.sum()
    if mass <= 0:
        raise ContractError("diagonality: attention map has no mass")
    return float(1.0 - (attn * w).sum() / mass)


# ---------------------------------------------------------------------------
# hidden-representation clustering

def map_labels_to_hidden(frame_labels: np.ndarray, n_hidden: int) -> np.ndarray:
    """Majority frame label per hidden step, over ceil(n/n')-frame windows."""
    frame_labels = np.asarray(frame_labels, dtype=np.int64)
    n = frame_labels.size
    if n_hidden < 1 or n < 1:
        raise ContractError("label mapping: empty inputs")
    ratio = math.ceil(n / n_hidden)
    out = np.empty(n_hidden, dtype=np.int64)
    for j in range(n_hidden):
        window = frame_labels[j * ratio:min((j + 1) * ratio, n)]
        if window.size == 0:
            window = frame_labels[-1:]
        out[j] = int(np.bincount(window).argmax())
    return out


def cluster_score(hidden_reps: np.ndarray, labels: np.ndarray, top_k: int = 5,
                  exclude=()):
    """Silhouette score over the top-k most frequent labels plus a 2-D PCA
    projection table for plotting.

    Returns (score, projection [m x 2], kept labels [m]).
    """
    reps = np.asarray(hidden_reps, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if reps.shape[0] != labels.shape[0]:
        raise ContractError("cluster_score: labels do not match representations")
    keep = ~np.isin(labels, list(exclude))
    reps, labels = reps[keep], labels[keep]
    values, counts = np.unique(labels, return_counts=True)
    order = sorted(range(values.size), key=lambda i: (-counts[i], values[i]))
    top = set(values[i] for i in order[:top_k])
    if len(top) < 2:
        raise ContractError("cluster_score: fewer than 2 labels among the most frequent")
    sel = np.isin(labels, list(top))
    reps, labels = reps[sel], labels[sel]
    score = float(silhouette_score(reps, labels, metric="euclidean"))
    centered = reps - reps.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    projection = centered @ vt[:2].T
    return score, projection, labels
