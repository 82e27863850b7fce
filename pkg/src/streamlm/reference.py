"""Independent single-stream transformer used as a text-path oracle.

Deliberately re-implements the forward pass from the written math, not from
:mod:`streamlm.model`: per-position loops, explicit attention over the
prefix, no shared helpers and no kernel backends. It consumes the same
parameter dict, embeds exactly one token per position, and uses no level
selector, which is what a plain text language model does. Agreement with
the multi-stream path on text input is a correctness check, so keeping this
code boring and obviously right matters more than speed.
"""

from __future__ import annotations

import numpy as np

from .model import ModelState


def _norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + eps) * gain


def _rotate(vec: np.ndarray, pos: int, base: float) -> np.ndarray:
    half = vec.shape[0] // 2
    out = np.empty_like(vec)
    for i in range(half):
        angle = pos / base ** (2.0 * i / vec.shape[0])
        c, s = np.cos(angle), np.sin(angle)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i + half] * c + vec[i] * s
    return out


def reference_text_logits(state: ModelState, token_ids) -> np.ndarray:
    """Next-token logits of a plain decoder-only model sharing state's weights.

    token_ids: 1-D global ids. Returns (T, V) float64 logits.
    """
    cfg = state.config
    p = {k: v.astype(np.float64) for k, v in state.params.items()}
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    t = ids.size
    d, nh, dh = cfg.d_model, cfg.n_heads, cfg.head_dim

    x = np.stack([p["embedding"][g] for g in ids])  # (T, d)
    for li in range(cfg.n_layers):
        qs = np.zeros((t, nh, dh))
        ks = np.zeros((t, nh, dh))
        vs = np.zeros((t, nh, dh))
        normed = np.zeros((t, d))
        for pos in range(t):
            normed[pos] = _norm(x[pos], p[f"layer{li}.attn_norm"], cfg.norm_eps)
            q = (normed[pos] @ p[f"layer{li}.wq"]).reshape(nh, dh)
            k = (normed[pos] @ p[f"layer{li}.wk"]).reshape(nh, dh)
            vs[pos] = (normed[pos] @ p[f"layer{li}.wv"]).reshape(nh, dh)
            for hi in range(nh):
                qs[pos, hi] = _rotate(q[hi], pos, cfg.rope_base)
                ks[pos, hi] = _rotate(k[hi], pos, cfg.rope_base)
        attn = np.zeros((t, d))
        for pos in range(t):
            heads = []
            for hi in range(nh):
                scores = np.array([qs[pos, hi] @ ks[j, hi] for j in range(pos + 1)]) / np.sqrt(dh)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                heads.append(sum(w[j] * vs[j, hi] for j in range(pos + 1)))
            attn[pos] = np.concatenate(heads) @ p[f"layer{li}.wo"]
        x = x + attn
        ffn = np.zeros((t, d))
        for pos in range(t):
            z = _norm(x[pos], p[f"layer{li}.ffn_norm"], cfg.norm_eps)
            gate = z @ p[f"layer{li}.w_gate"]
            swish = gate / (1.0 + np.exp(-gate))
            ffn[pos] = (swish * (z @ p[f"layer{li}.w_up"])) @ p[f"layer{li}.w_down"]
        x = x + ffn

    logits = np.zeros((t, state.vocab.total_size))
    for pos in range(t):
        logits[pos] = _norm(x[pos], p["final_norm"], cfg.norm_eps) @ p["out_proj"]
    return logits
