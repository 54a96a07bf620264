"""Independent reference computations the tests compare against."""

import math

import numpy as np


def central_difference(f, arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor absorbs round-off on exactly-zero gradients."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def single_head_attention(x: np.ndarray, wq, bq, wk, bk, wv, bv, wo, bo) -> np.ndarray:
    """Causal one-head attention over (T, E), written with explicit loops."""
    t, e = x.shape
    q = x @ wq + bq
    k = x @ wk + bk
    v = x @ wv + bv
    out = np.zeros((t, e))
    for i in range(t):
        scores = [float(q[i] @ k[j]) / math.sqrt(e) for j in range(i + 1)]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for j in range(i + 1):
            out[i] += (w[j] / z) * v[j]
    return out @ wo + bo


def layer_norm_ref(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu_ref(x):
    return np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(x)


def greedy_pieces(vocab_set: set, word: str, prefix: str = "##"):
    """Longest-match-first segmentation by exhaustive search of every end point."""
    pieces = []
    i = 0
    while i < len(word):
        best = None
        for j in range(i + 1, len(word) + 1):
            cand = word[i:j] if i == 0 else prefix + word[i:j]
            if cand in vocab_set:
                best = (j, cand)
        if best is None:
            return None
        pieces.append(best[1])
        i = best[0]
    return pieces
