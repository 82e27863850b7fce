"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` version (default when numba is
importable) and a pure-numpy fallback. The backend is selected once at import
time from the ``STREAMLM_BACKEND`` environment variable (``auto`` | ``numba``
| ``numpy``) and can be switched at runtime with :func:`set_backend`, which
tests and the benchmark use to compare both paths.

All numba kernels parallelize over disjoint output rows only, so results are
deterministic regardless of thread scheduling. ``fastmath`` stays off: the
two backends must agree to float rounding, not merely in distribution.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "STREAMLM_BACKEND"

try:
    from numba import njit, prange

    _NUMBA_OK = True
except ImportError:  # pragma: no cover - environment without numba
    _NUMBA_OK = False

    def njit(*args, **kwargs):  # type: ignore
        raise RuntimeError("numba is not installed")

    prange = range  # type: ignore


def _initial_backend() -> str:
    choice = os.environ.get(_ENV_FLAG, "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"{_ENV_FLAG} must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba" and not _NUMBA_OK:
        raise RuntimeError(f"{_ENV_FLAG}=numba but numba is not importable")
    return "numba" if _NUMBA_OK else "numpy"


_BACKEND = _initial_backend()


def backend() -> str:
    """Name of the active backend, ``"numba"`` or ``"numpy"``."""
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch the active backend; returns the previous one."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _NUMBA_OK:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev = _BACKEND
    _BACKEND = name
    return prev


# ---------------------------------------------------------------------------
# rmsnorm


def _rmsnorm_fwd_np(x, gain, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1) + eps)
    return x * inv[:, None] * gain, inv


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _rmsnorm_fwd_nb(x, gain, eps):
        m, d = x.shape
        y = np.empty_like(x)
        inv = np.empty(m, dtype=x.dtype)
        for i in prange(m):
            ss = 0.0
            for j in range(d):
                ss += x[i, j] * x[i, j]
            r = 1.0 / np.sqrt(ss / d + eps)
            inv[i] = r
            for j in range(d):
                y[i, j] = x[i, j] * r * gain[j]
        return y, inv


def rmsnorm_fwd(x, gain, eps):
    """Row-wise RMS normalization with learned gain.

    x: (M, d). Returns (y, inv) where inv is the per-row 1/rms factor the
    backward pass reuses.
    """
    if _BACKEND == "numba":
        return _rmsnorm_fwd_nb(x, gain, eps)
    return _rmsnorm_fwd_np(x, gain, eps)


def _rmsnorm_bwd_np(x, gain, inv, dy):
    d = x.shape[1]
    dyg = dy * gain
    dot = np.sum(dyg * x, axis=-1)
    dx = dyg * inv[:, None] - x * (inv**3 * dot / d)[:, None]
    dgain = np.sum(dy * x * inv[:, None], axis=0)
    return dx, dgain


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _rmsnorm_bwd_nb(x, gain, inv, dy):
        m, d = x.shape
        dx = np.empty_like(x)
        dgain_part = np.zeros((m, d), dtype=x.dtype)
        for i in prange(m):
            r = inv[i]
            dot = 0.0
            for j in range(d):
                dot += dy[i, j] * gain[j] * x[i, j]
            c = r * r * r * dot / d
            for j in range(d):
                dx[i, j] = dy[i, j] * gain[j] * r - x[i, j] * c
                dgain_part[i, j] = dy[i, j] * x[i, j] * r
        return dx, dgain_part.sum(axis=0)


def rmsnorm_bwd(x, gain, inv, dy):
    """Backward of :func:`rmsnorm_fwd`; returns (dx, dgain)."""
    if _BACKEND == "numba":
        return _rmsnorm_bwd_nb(x, gain, inv, dy)
    return _rmsnorm_bwd_np(x, gain, inv, dy)


# ---------------------------------------------------------------------------
# causal segment-masked softmax (attention probabilities)


def _masked_softmax_np(scores, seg):
    b, h, t, _ = scores.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    legal = causal[None, None] & (seg[:, None, None, :] == seg[:, None, :, None])
    neg = np.array(-np.inf, dtype=scores.dtype)
    masked = np.where(legal, scores, neg)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=-1, keepdims=True)


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _masked_softmax_nb(scores, seg):
        b, h, t, _ = scores.shape
        probs = np.zeros_like(scores)
        for idx in prange(b * h * t):
            bi = idx // (h * t)
            rest = idx % (h * t)
            hi = rest // t
            i = rest % t
            s = seg[bi, i]
            mx = scores[bi, hi, i, i]  # self position is always legal
            for j in range(i + 1):
                if seg[bi, j] == s and scores[bi, hi, i, j] > mx:
                    mx = scores[bi, hi, i, j]
            tot = 0.0
            for j in range(i + 1):
                if seg[bi, j] == s:
                    e = np.exp(scores[bi, hi, i, j] - mx)
                    probs[bi, hi, i, j] = e
                    tot += e
            for j in range(i + 1):
                if seg[bi, j] == s:
                    probs[bi, hi, i, j] /= tot
        return probs


def masked_softmax(scores, seg):
    """Softmax over attention scores restricted to same-segment causal keys.

    scores: (B, H, T, T); seg: (B, T) int32 segment ids. Position i attends
    to j <= i with seg[j] == seg[i]; everything else gets probability 0.
    """
    if _BACKEND == "numba":
        return _masked_softmax_nb(scores, seg)
    return _masked_softmax_np(scores, seg)


def _softmax_bwd_np(probs, dprobs):
    dot = np.sum(probs * dprobs, axis=-1, keepdims=True)
    return probs * (dprobs - dot)


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _softmax_bwd_nb(probs, dprobs):
        b, h, t, _ = probs.shape
        ds = np.empty_like(probs)
        for idx in prange(b * h * t):
            bi = idx // (h * t)
            rest = idx % (h * t)
            hi = rest // t
            i = rest % t
            dot = 0.0
            for j in range(t):
                dot += probs[bi, hi, i, j] * dprobs[bi, hi, i, j]
            for j in range(t):
                ds[bi, hi, i, j] = probs[bi, hi, i, j] * (dprobs[bi, hi, i, j] - dot)
        return ds


def softmax_bwd(probs, dprobs):
    """Backward of softmax rows; masked cells (probs == 0) yield 0."""
    if _BACKEND == "numba":
        return _softmax_bwd_nb(probs, dprobs)
    return _softmax_bwd_np(probs, dprobs)


# ---------------------------------------------------------------------------
# fused weighted cross-entropy rows


def _ce_rows_np(logits, targets, weights):
    m = logits.max(axis=1)
    z = logits - m[:, None]
    e = np.exp(z)
    tot = e.sum(axis=1)
    lse = np.log(tot)
    rows = np.arange(logits.shape[0])
    ce = lse - z[rows, targets]
    dlogits = e / tot[:, None]
    dlogits[rows, targets] -= 1.0
    dlogits *= weights[:, None]
    return ce, dlogits, logits.argmax(axis=1).astype(np.int64)


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _ce_rows_nb(logits, targets, weights):
        m, v = logits.shape
        ce = np.empty(m, dtype=logits.dtype)
        dlogits = np.empty_like(logits)
        am = np.empty(m, dtype=np.int64)
        for i in prange(m):
            mx = logits[i, 0]
            best = 0
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
                    best = j
            am[i] = best
            tot = 0.0
            for j in range(v):
                tot += np.exp(logits[i, j] - mx)
            lse = np.log(tot)
            ce[i] = lse - (logits[i, targets[i]] - mx)
            w = weights[i]
            for j in range(v):
                p = np.exp(logits[i, j] - mx) / tot
                if j == targets[i]:
                    p -= 1.0
                dlogits[i, j] = p * w
        return ce, dlogits, am


def ce_rows(logits, targets, weights):
    """Cross-entropy per row plus weighted logit gradient and argmax.

    logits: (M, V); targets: (M,) int; weights: (M,). Returns
    (ce, dlogits, argmax) with dlogits = w * (softmax - onehot), i.e. the
    gradient of sum(w_i * ce_i) — the caller owns any normalization.
    """
    if _BACKEND == "numba":
        return _ce_rows_nb(logits, targets, weights)
    return _ce_rows_np(logits, targets, weights)


# ---------------------------------------------------------------------------
# embedding: summed gather forward, scatter-add backward


def _embed_sum_np(emb, ids):
    m, n = ids.shape
    return emb[ids.reshape(-1)].reshape(m, n, emb.shape[1]).sum(axis=1)


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _embed_sum_nb(emb, ids):
        m, n = ids.shape
        d = emb.shape[1]
        out = np.zeros((m, d), dtype=emb.dtype)
        for i in prange(m):
            for s in range(n):
                row = ids[i, s]
                for j in range(d):
                    out[i, j] += emb[row, j]
        return out


def embed_sum(emb, ids):
    """Sum of embedding rows per position: (M, N) ids -> (M, d)."""
    if _BACKEND == "numba":
        return _embed_sum_nb(emb, ids)
    return _embed_sum_np(emb, ids)


def _embed_grad_np(ids, dh, vocab_size):
    m, n = ids.shape
    demb = np.zeros((vocab_size, dh.shape[1]), dtype=dh.dtype)
    flat = np.broadcast_to(dh[:, None, :], (m, n, dh.shape[1])).reshape(-1, dh.shape[1])
    np.add.at(demb, ids.reshape(-1), flat)
    return demb


if _NUMBA_OK:

    # Serial on purpose: rows collide, scatter-add must stay race-free.
    @njit(cache=True)
    def _embed_grad_nb(ids, dh, vocab_size):
        m, n = ids.shape
        d = dh.shape[1]
        demb = np.zeros((vocab_size, d), dtype=dh.dtype)
        for i in range(m):
            for s in range(n):
                row = ids[i, s]
                for j in range(d):
                    demb[row, j] += dh[i, j]
        return demb


def embed_grad(ids, dh, vocab_size):
    """Scatter-add gradient for :func:`embed_sum`; returns (vocab_size, d)."""
    if _BACKEND == "numba":
        return _embed_grad_nb(ids, dh, vocab_size)
    return _embed_grad_np(ids, dh, vocab_size)


# ---------------------------------------------------------------------------
# fused decoupled-weight-decay adaptive-moment parameter update


def _adamw_np(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * wd * p + lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


if _NUMBA_OK:

    @njit(parallel=True, cache=True)
    def _adamw_nb(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
        for i in prange(p.shape[0]):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * wd * p[i] + lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, step):
    """In-place update of flat parameter/moment arrays for one step.

    bc1/bc2 are the usual bias corrections computed from ``step`` (1-based).
    """
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    if _BACKEND == "numba":
        _adamw_nb(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2)
    else:
        _adamw_np(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2)


KERNEL_NAMES = (
    "rmsnorm_fwd",
    "rmsnorm_bwd",
    "masked_softmax",
    "softmax_bwd",
    "ce_rows",
    "embed_sum",
    "embed_grad",
    "adamw_update",
)
