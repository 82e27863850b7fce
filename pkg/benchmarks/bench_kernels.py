#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Times each hot kernel at training-shaped inputs on both backends, checks
they agree numerically, then times a full optimizer step each way.

Usage:
    python benchmarks/bench_kernels.py [--reps 20] [--rows 8] [--ctx 192]
"""

import argparse
import time

import numpy as np

from streamlm import kernels
from streamlm.model import ModelConfig, forward_acts, init_model, logits_from_hidden, backward
from streamlm.sequence import Region, pack_batches
from streamlm.toycodec import CodecSpec, gen_corpus, vocab_for_codec
from streamlm.sequence import record_to_sequence
from streamlm.training import TrainSchedule, make_opt_state, train_step


def timeit(fn, reps):
    fn()  # warmup / jit compile
    t0 = time.perf_counter()
    for _ in range(reps):
        out = fn()
    return (time.perf_counter() - t0) / reps, out


def bench_kernels(rows, ctx, reps):
    rng = np.random.default_rng(0)
    d, heads, v, n = 128, 4, 139, 3
    m = rows * ctx
    x = rng.standard_normal((m, d)).astype(np.float32)
    gain = rng.standard_normal(d).astype(np.float32)
    dy = rng.standard_normal((m, d)).astype(np.float32)
    scores = rng.standard_normal((rows, heads, ctx, ctx)).astype(np.float32)
    seg = np.repeat(np.arange(4), ctx // 4)[None].repeat(rows, axis=0).astype(np.int32)
    logits = rng.standard_normal((m, v)).astype(np.float32)
    targets = rng.integers(0, v, m)
    weights = rng.random(m).astype(np.float32)
    ids = rng.integers(0, v, (m, n))
    emb = rng.standard_normal((v, d)).astype(np.float32)
    p = rng.standard_normal(200_000).astype(np.float32)
    g = rng.standard_normal(200_000).astype(np.float32)

    cases = {
        "rmsnorm_fwd": lambda: kernels.rmsnorm_fwd(x, gain, 1e-5),
        "rmsnorm_bwd": lambda: kernels.rmsnorm_bwd(x, gain, kernels.rmsnorm_fwd(x, gain, 1e-5)[1], dy),
        "masked_softmax": lambda: kernels.masked_softmax(scores, seg),
        "softmax_bwd": lambda: kernels.softmax_bwd(kernels.masked_softmax(scores, seg), scores),
        "ce_rows": lambda: kernels.ce_rows(logits, targets, weights),
        "embed_sum": lambda: kernels.embed_sum(emb, ids),
        "embed_grad": lambda: kernels.embed_grad(ids, dy, v),
        "adamw_update": lambda: kernels.adamw_update(
            p.copy(), g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.95, 1e-8, 0.1, 1
        ),
    }

    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, fn in cases.items():
        kernels.set_backend("numpy")
        t_np, out_np = timeit(fn, reps)
        kernels.set_backend("numba")
        t_nb, out_nb = timeit(fn, reps)
        if isinstance(out_np, tuple):
            agree = all(np.allclose(a, b, rtol=2e-4, atol=1e-5) for a, b in zip(out_np, out_nb))
        elif out_np is None:
            agree = True
        else:
            agree = np.allclose(out_np, out_nb, rtol=2e-4, atol=1e-5)
        print(f"{name:<16} {t_np*1e3:>10.3f} {t_nb*1e3:>10.3f} {t_np/t_nb:>8.2f}x  {agree}")


def bench_train_step(rows, ctx, reps):
    codec = CodecSpec()
    vocab = vocab_for_codec(codec)
    records, _ = gen_corpus(codec, vocab, 200, (3, 12), 0.0, 0, seed=1)
    seqs = [record_to_sequence(r, vocab) for r in records]
    config = ModelConfig(context_len=ctx, n_streams=codec.n_streams)
    schedule = TrainSchedule(
        warmup_steps=10, peak_lr=1e-3, floor_lr=1e-4, total_steps=1000, switch_step=500,
        batch_frames=rows * ctx, seed=0,
    )
    batch = next(pack_batches(seqs, ctx, 0.5, 0, rows))

    print(f"\nfull train step ({rows} rows x {ctx} ctx = {rows*ctx} frames)")
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        state = init_model(config, vocab, seed=0)
        opt = make_opt_state(state)
        t, _ = timeit(lambda: train_step(state, opt, batch, schedule, 1), max(3, reps // 4))
        print(f"  {backend:<6} {t*1e3:>9.1f} ms/step")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--rows", type=int, default=8)
    ap.add_argument("--ctx", type=int, default=192)
    args = ap.parse_args()
    if kernels.backend() != "numba":
        raise SystemExit("numba backend unavailable; nothing to compare")
    bench_kernels(args.rows, args.ctx, args.reps)
    bench_train_step(args.rows, args.ctx, args.reps)
