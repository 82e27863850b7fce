"""Multi-stream decoder-only transformer on delayed token grids.

Per delayed position the N stream tokens are embedded and summed into one
input vector; a pre-norm causal transformer body produces a hidden state;
logits for stream n add a trainable level-selector vector to the hidden
state before the shared output projection. Two structural constraints keep
text-only behavior identical to a plain single-stream model: the pad
embedding row is zero (summing pads is a no-op) and the stream-1 selector
is zero, both frozen.

Forward and backward are written directly against numpy/BLAS with the hot
row-wise pieces in :mod:`streamlm.kernels`; gradients are exact (verified
against finite differences in the training module).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .interleave import DelayedMatrix, FrameMatrix
from .vocab import PAD_ID, JointVocab, TokenKind


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    context_len: int = 256
    n_streams: int = 3
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "context_len": self.context_len,
            "n_streams": self.n_streams,
            "rope_base": self.rope_base,
            "norm_eps": self.norm_eps,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order used by init, optimizer, and checkpoints."""
    names = ["embedding"]
    for i in range(config.n_layers):
        names += [
            f"layer{i}.attn_norm",
            f"layer{i}.wq",
            f"layer{i}.wk",
            f"layer{i}.wv",
            f"layer{i}.wo",
            f"layer{i}.ffn_norm",
            f"layer{i}.w_gate",
            f"layer{i}.w_up",
            f"layer{i}.w_down",
        ]
    names += ["final_norm", "level_bias", "out_proj"]
    return names


def param_shape(name: str, config: ModelConfig, vocab: JointVocab) -> tuple[int, ...]:
    d, dff = config.d_model, config.d_ff
    if name == "embedding":
        return (vocab.total_size, d)
    if name == "out_proj":
        return (d, vocab.total_size)
    if name == "level_bias":
        return (config.n_streams, d)
    if name.endswith("_norm"):
        return (d,)
    leaf = name.split(".")[1]
    return {
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "w_gate": (d, dff),
        "w_up": (d, dff),
        "w_down": (dff, d),
    }[leaf]


@dataclass
class ModelState:
    config: ModelConfig
    vocab: JointVocab
    params: dict[str, np.ndarray]
    dtype: np.dtype = np.dtype(np.float32)
    step: int = 0

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ModelState":
        return ModelState(
            self.config, self.vocab, {k: v.copy() for k, v in self.params.items()}, self.dtype, self.step
        )


FROZEN_SLICES = (("embedding", PAD_ID), ("level_bias", 0))  # (param, frozen row)


def zero_frozen(arrays: dict[str, np.ndarray]) -> None:
    """Zero the frozen rows (pad embedding, stream-1 selector) in-place."""
    for name, row in FROZEN_SLICES:
        if name in arrays:
            arrays[name][row, :] = 0.0


def init_model(
    config: ModelConfig,
    vocab: JointVocab,
    seed: int,
    text_embed_init: np.ndarray | None = None,
    dtype=np.float32,
) -> ModelState:
    """Random parameter init, deterministic per seed.

    When ``text_embed_init`` is given its rows are copied into the text id
    range and every non-text row is drawn with that table's empirical
    per-element standard deviation, so externally trained text embeddings
    can be dropped in without a scale mismatch.
    """
    if config.n_streams != vocab.n_streams:
        raise ValueError("config.n_streams must match vocab")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    std = config.init_std
    if text_embed_init is not None:
        expected = (vocab.text_size, config.d_model)
        if tuple(text_embed_init.shape) != expected:
            raise ValueError(f"text_embed_init shape {text_embed_init.shape} != {expected}")
        std = float(np.std(text_embed_init))

    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = param_shape(name, config, vocab)
        if name.endswith("_norm"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name == "level_bias":
            params[name] = np.zeros(shape, dtype=dtype)
        elif name == "embedding":
            emb = rng.normal(0.0, std, size=shape)
            if text_embed_init is not None:
                emb[vocab.text_start : vocab.text_start + vocab.text_size] = text_embed_init
            params[name] = emb.astype(dtype)
        else:
            params[name] = rng.normal(0.0, config.init_std, size=shape).astype(dtype)
    zero_frozen(params)
    return ModelState(config=config, vocab=vocab, params=params, dtype=dtype)


# ---------------------------------------------------------------------------
# rotary position encoding (half-split convention)


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """x: (..., P, head_dim); cos/sin: (P, head_dim/2) broadcast over leading dims."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    out = np.empty_like(x)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half:] = x2 * cos + x1 * sin
    return out


def rope_apply_inv(dx: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Gradient/inverse of rope_apply (rotation by the opposite angle)."""
    half = dx.shape[-1] // 2
    d1, d2 = dx[..., :half], dx[..., half:]
    out = np.empty_like(dx)
    out[..., :half] = d1 * cos + d2 * sin
    out[..., half:] = d2 * cos - d1 * sin
    return out


# ---------------------------------------------------------------------------
# batched forward/backward


def embed_frame(state: ModelState, frame: np.ndarray) -> np.ndarray:
    """Input vector for one delayed frame: sum of its N embedding rows."""
    ids = np.asarray(frame, dtype=np.int64).reshape(-1)
    if ids.min() < 0 or ids.max() >= state.vocab.total_size:
        raise ValueError("token id out of range")
    return state.params["embedding"][ids].sum(axis=0)


def _as_batch(tokens) -> np.ndarray:
    if isinstance(tokens, DelayedMatrix):
        tokens = tokens.tokens
    arr = np.ascontiguousarray(tokens, dtype=np.int64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (T, N) or (R, T, N) tokens, got shape {arr.shape}")
    return arr


def forward_acts(state: ModelState, tokens, seg: np.ndarray | None = None):
    """Run the body over delayed rows; returns (final hidden, activation cache)."""
    cfg = state.config
    p = state.params
    ids = _as_batch(tokens)
    r, c, n = ids.shape
    if c > cfg.context_len:
        raise ValueError(f"sequence length {c} exceeds context_len {cfg.context_len}")
    if n != cfg.n_streams:
        raise ValueError(f"expected {cfg.n_streams} streams, got {n}")
    if ids.min() < 0 or ids.max() >= state.vocab.total_size:
        raise ValueError("token id out of range")
    if seg is None:
        seg = np.zeros((r, c), dtype=np.int32)
    seg = np.ascontiguousarray(seg, dtype=np.int32)

    d, h, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    eps = cfg.norm_eps
    m = r * c
    ids2d = np.ascontiguousarray(ids.reshape(m, n))

    x = kernels.embed_sum(p["embedding"], ids2d).reshape(r, c, d)
    cos, sin = rope_tables(np.arange(c), dh, cfg.rope_base, state.dtype)
    cos_b, sin_b = cos[None, None], sin[None, None]  # broadcast over (R, H)

    layers = []
    for i in range(cfg.n_layers):
        x0 = x
        xn, inv1 = kernels.rmsnorm_fwd(x0.reshape(m, d), p[f"layer{i}.attn_norm"], eps)
        q = (xn @ p[f"layer{i}.wq"]).reshape(r, c, h, dh).transpose(0, 2, 1, 3)
        k = (xn @ p[f"layer{i}.wk"]).reshape(r, c, h, dh).transpose(0, 2, 1, 3)
        v = np.ascontiguousarray((xn @ p[f"layer{i}.wv"]).reshape(r, c, h, dh).transpose(0, 2, 1, 3))
        q = np.ascontiguousarray(rope_apply(q, cos_b, sin_b))
        k = np.ascontiguousarray(rope_apply(k, cos_b, sin_b))
        scores = np.matmul(q, k.swapaxes(-1, -2))
        scores *= scale
        probs = kernels.masked_softmax(scores, seg)
        ctx = np.matmul(probs, v)  # (R, H, C, dh)
        ctx2d = ctx.transpose(0, 2, 1, 3).reshape(m, d)
        x1 = x0 + (ctx2d @ p[f"layer{i}.wo"]).reshape(r, c, d)
        xn2, inv2 = kernels.rmsnorm_fwd(x1.reshape(m, d), p[f"layer{i}.ffn_norm"], eps)
        gpre = xn2 @ p[f"layer{i}.w_gate"]
        upre = xn2 @ p[f"layer{i}.w_up"]
        sig = 1.0 / (1.0 + np.exp(-gpre))
        hmid = gpre * sig * upre
        x = x1 + (hmid @ p[f"layer{i}.w_down"]).reshape(r, c, d)
        layers.append(
            dict(
                x0=x0, xn=xn, inv1=inv1, q=q, k=k, v=v, probs=probs, ctx2d=ctx2d,
                x1=x1, xn2=xn2, inv2=inv2, gpre=gpre, upre=upre, sig=sig, hmid=hmid,
            )
        )

    hf2d, inv_f = kernels.rmsnorm_fwd(x.reshape(m, d), p["final_norm"], eps)
    acts = dict(
        ids2d=ids2d, seg=seg, shape=(r, c, n), layers=layers,
        x_final=x, hf2d=hf2d, inv_f=inv_f, cos=cos_b, sin=sin_b, scale=scale,
    )
    return hf2d.reshape(r, c, d), acts


def logits_from_hidden(state: ModelState, hf: np.ndarray) -> np.ndarray:
    """Per-level logits: add the level selector, then the shared projection."""
    b = state.params["level_bias"]
    n, d = b.shape
    hb = hf[..., None, :] + b  # (..., N, d)
    v = state.params["out_proj"].shape[1]
    return (hb.reshape(-1, d) @ state.params["out_proj"]).reshape(hf.shape[:-1] + (n, v))


def forward_full(state: ModelState, tokens, seg: np.ndarray | None = None) -> np.ndarray:
    """Logits over all delayed rows and levels.

    tokens: DelayedMatrix, (T, N) grid, or (R, T, N) batch. Returns
    (T, N, V) for unbatched input, (R, T, N, V) otherwise. logits[t, n]
    scores the stream-n token of delayed row t+1.
    """
    if isinstance(tokens, DelayedMatrix):
        unbatched = True
    else:
        unbatched = np.asarray(tokens).ndim == 2
    hf, _ = forward_acts(state, tokens, seg)
    logits = logits_from_hidden(state, hf)
    return logits[0] if unbatched else logits


def backward(state: ModelState, acts: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of any scalar loss given d(loss)/d(logits)."""
    cfg = state.config
    p = state.params
    r, c, n = acts["shape"]
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    m = r * c
    eps = cfg.norm_eps
    grads: dict[str, np.ndarray] = {}

    dl2 = np.ascontiguousarray(dlogits.reshape(m * n, -1))
    hb2 = (acts["hf2d"].reshape(r, c, d)[..., None, :] + p["level_bias"]).reshape(m * n, d)
    grads["out_proj"] = hb2.T @ dl2
    dhb = (dl2 @ p["out_proj"].T).reshape(r, c, n, d)
    grads["level_bias"] = dhb.sum(axis=(0, 1))
    dhf = dhb.sum(axis=2).reshape(m, d)

    dx2d, dgf = kernels.rmsnorm_bwd(acts["x_final"].reshape(m, d), p["final_norm"], acts["inv_f"], dhf)
    grads["final_norm"] = dgf
    dx = dx2d.reshape(r, c, d)

    cos_b, sin_b, scale = acts["cos"], acts["sin"], acts["scale"]
    for i in reversed(range(cfg.n_layers)):
        a = acts["layers"][i]
        # feed-forward
        dff2 = dx.reshape(m, d)
        grads[f"layer{i}.w_down"] = a["hmid"].T @ dff2
        dhmid = dff2 @ p[f"layer{i}.w_down"].T
        act = a["gpre"] * a["sig"]
        dact = dhmid * a["upre"]
        dupre = dhmid * act
        dgpre = dact * (a["sig"] * (1.0 + a["gpre"] * (1.0 - a["sig"])))
        grads[f"layer{i}.w_gate"] = a["xn2"].T @ dgpre
        grads[f"layer{i}.w_up"] = a["xn2"].T @ dupre
        dxn2 = dgpre @ p[f"layer{i}.w_gate"].T + dupre @ p[f"layer{i}.w_up"].T
        dx1_2d, dg2 = kernels.rmsnorm_bwd(a["x1"].reshape(m, d), p[f"layer{i}.ffn_norm"], a["inv2"], dxn2)
        grads[f"layer{i}.ffn_norm"] = dg2
        dx1 = dx + dx1_2d.reshape(r, c, d)
        # attention
        datt2 = dx1.reshape(m, d)
        grads[f"layer{i}.wo"] = a["ctx2d"].T @ datt2
        dctx = (datt2 @ p[f"layer{i}.wo"].T).reshape(r, c, h, dh).transpose(0, 2, 1, 3)
        dprobs = np.matmul(dctx, a["v"].swapaxes(-1, -2))
        dv = np.matmul(a["probs"].swapaxes(-1, -2), dctx)
        dscores = kernels.softmax_bwd(a["probs"], dprobs)
        dq = np.matmul(dscores, a["k"]) * scale
        dk = np.matmul(dscores.swapaxes(-1, -2), a["q"]) * scale
        dq = rope_apply_inv(dq, cos_b, sin_b).transpose(0, 2, 1, 3).reshape(m, d)
        dk = rope_apply_inv(dk, cos_b, sin_b).transpose(0, 2, 1, 3).reshape(m, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(m, d)
        grads[f"layer{i}.wq"] = a["xn"].T @ dq
        grads[f"layer{i}.wk"] = a["xn"].T @ dk
        grads[f"layer{i}.wv"] = a["xn"].T @ dv
        dxn = dq @ p[f"layer{i}.wq"].T + dk @ p[f"layer{i}.wk"].T + dv @ p[f"layer{i}.wv"].T
        dx0_2d, dg1 = kernels.rmsnorm_bwd(a["x0"].reshape(m, d), p[f"layer{i}.attn_norm"], a["inv1"], dxn)
        grads[f"layer{i}.attn_norm"] = dg1
        dx = dx1 + dx0_2d.reshape(r, c, d)

    grads["embedding"] = kernels.embed_grad(acts["ids2d"], np.ascontiguousarray(dx.reshape(m, d)), state.vocab.total_size)
    return grads


# ---------------------------------------------------------------------------
# incremental decoding


@dataclass
class DecodeCache:
    """Per-session attention key/value memory for one-frame-at-a-time decoding."""

    k: list[np.ndarray]  # per layer (context_len, H, dh)
    v: list[np.ndarray]
    length: int = 0


def make_cache(state: ModelState) -> DecodeCache:
    cfg = state.config
    shape = (cfg.context_len, cfg.n_heads, cfg.head_dim)
    return DecodeCache(
        k=[np.zeros(shape, dtype=state.dtype) for _ in range(cfg.n_layers)],
        v=[np.zeros(shape, dtype=state.dtype) for _ in range(cfg.n_layers)],
    )


def _rmsnorm_vec(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x * (1.0 / np.sqrt(np.mean(x * x) + eps)) * gain


def forward_step(state: ModelState, cache: DecodeCache, frame: np.ndarray) -> np.ndarray:
    """Consume one delayed frame; return (N, V) logits for the next one.

    Exactly one pass through the transformer body per call; cost per call is
    independent of how many frames each original frame carries.
    """
    cfg = state.config
    p = state.params
    pos = cache.length
    if pos >= cfg.context_len:
        raise ValueError(f"decode cache full at context_len {cfg.context_len}")
    h_, dh = cfg.n_heads, cfg.head_dim
    eps = cfg.norm_eps
    cos, sin = rope_tables(np.array([pos]), dh, cfg.rope_base, state.dtype)

    x = embed_frame(state, frame).astype(state.dtype)
    for i in range(cfg.n_layers):
        xn = _rmsnorm_vec(x, p[f"layer{i}.attn_norm"], eps)
        q = (xn @ p[f"layer{i}.wq"]).reshape(h_, dh)
        k = (xn @ p[f"layer{i}.wk"]).reshape(h_, dh)
        v = (xn @ p[f"layer{i}.wv"]).reshape(h_, dh)
        q = rope_apply(q, cos[0], sin[0])
        k = rope_apply(k, cos[0], sin[0])
        cache.k[i][pos] = k
        cache.v[i][pos] = v
        keys = cache.k[i][: pos + 1]  # (P, H, dh)
        vals = cache.v[i][: pos + 1]
        scores = np.einsum("hd,phd->hp", q, keys) / np.sqrt(dh)
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=1, keepdims=True)
        ctx = np.einsum("hp,phd->hd", probs, vals).reshape(cfg.d_model)
        x1 = x + ctx @ p[f"layer{i}.wo"]
        xn2 = _rmsnorm_vec(x1, p[f"layer{i}.ffn_norm"], eps)
        gpre = xn2 @ p[f"layer{i}.w_gate"]
        act = gpre / (1.0 + np.exp(-gpre))
        x = x1 + (act * (xn2 @ p[f"layer{i}.w_up"])) @ p[f"layer{i}.w_down"]
    cache.length = pos + 1
    hf = _rmsnorm_vec(x, p["final_norm"], eps)
    return (hf[None, :] + p["level_bias"]) @ p["out_proj"]


# ---------------------------------------------------------------------------
# text-only path


def text_compat_forward(state: ModelState, text_global_ids: np.ndarray) -> np.ndarray:
    """Stream-1 logits for a plain single-stream token sequence.

    Accepts text/special global ids only; equivalent to running the
    multi-stream model on frames whose other streams are all pad.
    """
    ids = np.asarray(text_global_ids, dtype=np.int64).reshape(-1)
    vocab = state.vocab
    for gid in ids:
        kind = vocab.classify(int(gid)).kind
        if kind not in (TokenKind.TEXT, TokenKind.SPECIAL):
            raise ValueError(f"id {gid} is {kind.value}, not a text/special token")
    tokens = np.full((ids.size, vocab.n_streams), PAD_ID, dtype=np.int32)
    tokens[:, 0] = ids
    logits = forward_full(state, tokens)
    return logits[:, 0, :]
