"""Weighted cross-entropy training with a two-phase learning-rate program.

Pre-training ramps the learning rate linearly to its peak over the warmup
steps and then decays it linearly to the floor; the supervised region flips
from the whole sequence to the task target at a configured step. Annealing
is a separate short phase that restarts from a checkpoint and drives the
rate linearly to exactly zero, typically over a refreshed data mixture.

The optimizer is the usual decoupled-weight-decay adaptive-moment update
with global gradient-norm clipping. The pad embedding row and the stream-1
level selector are structurally frozen: their gradients are zeroed before
the moments see them, so momentum never leaks mass into frozen rows.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .interleave import FrameMatrix, Modality, delay, delay_cells
from .model import (
    FROZEN_SLICES,
    ModelConfig,
    ModelState,
    backward,
    forward_acts,
    init_model,
    logits_from_hidden,
    zero_frozen,
)
from .sequence import PackedBatch, Region, Task, TaskSequence, compose, loss_mask, pack_batches
from .vocab import JointVocab, build_vocab

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.1
CLIP_NORM = 1.0

#: parameters excluded from weight decay (norm gains, level selectors)
_NO_DECAY_SUFFIXES = ("_norm", "level_bias")


class Phase(enum.Enum):
    PRETRAIN = "pretrain"
    ANNEAL = "anneal"


@dataclass(frozen=True)
class TrainSchedule:
    """Learning-rate program and batching knobs.

    Defaults carry the reference full-scale numbers; desk-scale runs
    override them from config.
    """

    warmup_steps: int = 25_000
    peak_lr: float = 2e-4
    floor_lr: float = 2e-5
    total_steps: int = 500_000
    switch_step: int = 250_000
    anneal_start_lr: float = 5e-5
    anneal_steps: int = 85_000
    batch_frames: int = 16_384
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.floor_lr > self.peak_lr:
            raise ValueError("floor_lr must not exceed peak_lr")
        if not 0 <= self.switch_step <= self.total_steps:
            raise ValueError("switch_step must lie in [0, total_steps]")
        if self.anneal_start_lr <= 0:
            raise ValueError("anneal_start_lr must be positive")

    def to_dict(self) -> dict:
        return {
            "warmup_steps": self.warmup_steps,
            "peak_lr": self.peak_lr,
            "floor_lr": self.floor_lr,
            "total_steps": self.total_steps,
            "switch_step": self.switch_step,
            "anneal_start_lr": self.anneal_start_lr,
            "anneal_steps": self.anneal_steps,
            "batch_frames": self.batch_frames,
            "seed": self.seed,
        }


def lr_at_step(schedule: TrainSchedule, step: int, phase: Phase = Phase.PRETRAIN) -> float:
    """Piecewise-linear learning rate; endpoints are exact by construction."""
    if phase == Phase.ANNEAL:
        if not 0 <= step <= schedule.anneal_steps:
            raise ValueError(f"anneal step {step} outside [0, {schedule.anneal_steps}]")
        return schedule.anneal_start_lr * (schedule.anneal_steps - step) / schedule.anneal_steps
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.peak_lr
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.peak_lr + (schedule.floor_lr - schedule.peak_lr) * frac


def region_at_step(schedule: TrainSchedule, step: int) -> Region:
    """Supervised region for a pre-training step: flips at switch_step."""
    return Region.WHOLE if step < schedule.switch_step else Region.TARGET


@dataclass
class TrainLogRecord:
    step: int
    lr: float
    total_loss: float
    loss_text: float
    loss_semantic: float
    loss_acoustic: float
    token_acc: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "lr": self.lr,
                "total_loss": self.total_loss,
                "loss_text": self.loss_text,
                "loss_semantic": self.loss_semantic,
                "loss_acoustic": self.loss_acoustic,
                "token_acc": self.token_acc,
                "wall_ms": self.wall_ms,
            }
        )


class DivergedError(RuntimeError):
    """Raised when a step produces a non-finite loss."""


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossStats:
    loss: float
    loss_text: float
    loss_semantic: float
    loss_acoustic: float
    token_acc: float
    n_tokens: int


def weighted_ce_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    weights: np.ndarray,
    vocab: JointVocab,
    want_grad: bool = False,
) -> tuple[LossStats, np.ndarray | None]:
    """Weight-normalized cross-entropy over masked cells.

    loss = sum(w * ce) / sum(w) over cells where ``mask`` holds. The
    per-class parts (text incl. non-pad specials / semantic / acoustic) are
    normalized by the same global weight sum, so they add up to the total.
    Token accuracy counts argmax hits over the same cells, unweighted.
    When ``want_grad`` is set, also returns d(loss)/d(logits) with zeros at
    unmasked cells.
    """
    sel = np.asarray(mask, dtype=bool)
    if not sel.any():
        raise ValueError("loss mask selects no cells")
    flat_logits = np.ascontiguousarray(logits[sel])
    flat_targets = np.ascontiguousarray(targets[sel].astype(np.int64))
    flat_w = np.ascontiguousarray(weights[sel].astype(logits.dtype))

    ce, dflat, am = kernels.ce_rows(flat_logits, flat_targets, flat_w)
    wsum = float(np.sum(flat_w, dtype=np.float64))
    if wsum <= 0:
        raise ValueError("masked cells carry zero total weight")
    wce = flat_w.astype(np.float64) * ce.astype(np.float64)
    total = float(wce.sum() / wsum)
    if not np.isfinite(total):
        raise DivergedError(f"non-finite loss {total}")

    kinds = vocab.kind_table()[flat_targets]
    parts = []
    for kind_sel in (np.isin(kinds, (1, 2)), kinds == 3, kinds == 4):
        parts.append(float(wce[kind_sel].sum() / wsum))
    acc = float(np.mean(am == flat_targets))

    stats = LossStats(total, parts[0], parts[1], parts[2], acc, int(flat_targets.size))
    if not want_grad:
        return stats, None
    dlogits = np.zeros_like(logits)
    dlogits[sel] = dflat / np.asarray(wsum, dtype=logits.dtype)
    return stats, dlogits


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def make_opt_state(state: ModelState) -> OptState:
    return OptState(
        m={k: np.zeros_like(p) for k, p in state.params.items()},
        v={k: np.zeros_like(p) for k, p in state.params.items()},
    )


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        flat = g.reshape(-1).astype(np.float64, copy=False)
        total += float(np.dot(flat, flat))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = np.asarray(max_norm / norm, dtype=next(iter(grads.values())).dtype)
        for g in grads.values():
            g *= scale
    return norm


def apply_update(state: ModelState, opt: OptState, grads: dict[str, np.ndarray], lr: float) -> None:
    opt.step += 1
    for name, p in state.params.items():
        wd = 0.0 if name.endswith(_NO_DECAY_SUFFIXES) else WEIGHT_DECAY
        kernels.adamw_update(
            p.reshape(-1),
            np.ascontiguousarray(grads[name].reshape(-1)),
            opt.m[name].reshape(-1),
            opt.v[name].reshape(-1),
            lr,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            wd,
            opt.step,
        )


# ---------------------------------------------------------------------------
# steps and loops


def train_step(
    state: ModelState,
    opt: OptState,
    batch: PackedBatch,
    schedule: TrainSchedule,
    step: int,
    phase: Phase = Phase.PRETRAIN,
    region_override: Region | None = None,
) -> TrainLogRecord:
    """One optimizer update on a packed batch. Mutates state and opt."""
    t0 = time.perf_counter()
    lr = lr_at_step(schedule, step, phase)
    if region_override is not None:
        region = region_override
    elif phase == Phase.ANNEAL:
        region = Region.TARGET
    else:
        region = region_at_step(schedule, step)
    mask = batch.mask_target if region == Region.TARGET else batch.mask_whole

    hf, acts = forward_acts(state, batch.tokens, batch.seg)
    logits = logits_from_hidden(state, hf)
    # logits at row t score row t+1: shift targets/mask/weights left by one
    try:
        stats, dshift = weighted_ce_loss(
            logits[:, :-1],
            batch.tokens[:, 1:],
            mask[:, 1:],
            batch.weights[:, 1:],
            state.vocab,
            want_grad=True,
        )
    except DivergedError as e:
        raise DivergedError(f"step {step}: {e}") from e
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dshift

    grads = backward(state, acts, dlogits)
    # structural freeze: masked gradients keep the moments and the update
    # at exact zero for the pad row and the stream-1 selector
    zero_frozen(grads)
    clip_grad_norm(grads, CLIP_NORM)
    apply_update(state, opt, grads, lr)
    state.step += 1

    wall = (time.perf_counter() - t0) * 1e3
    return TrainLogRecord(
        step=step,
        lr=lr,
        total_loss=stats.loss,
        loss_text=stats.loss_text,
        loss_semantic=stats.loss_semantic,
        loss_acoustic=stats.loss_acoustic,
        token_acc=stats.token_acc,
        wall_ms=wall,
    )


def run_phase(
    state: ModelState,
    opt: OptState,
    sequences: list[TaskSequence],
    schedule: TrainSchedule,
    phase: Phase,
    text_fraction: float,
    steps: int | None = None,
    region_override: Region | None = None,
    log_path: str | Path | None = None,
    log_every: int = 10,
) -> list[TrainLogRecord]:
    """Drive ``steps`` updates (default: the phase's full budget)."""
    n_steps = steps if steps is not None else (schedule.anneal_steps if phase == Phase.ANNEAL else schedule.total_steps)
    rows = max(1, schedule.batch_frames // state.config.context_len)
    batches = pack_batches(sequences, state.config.context_len, text_fraction, schedule.seed, rows)
    records: list[TrainLogRecord] = []
    log_f = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(1, n_steps + 1):
            batch = next(batches)
            rec = train_step(state, opt, batch, schedule, step, phase, region_override)
            records.append(rec)
            if log_f is not None and (step % log_every == 0 or step == 1 or step == n_steps):
                log_f.write(rec.to_json() + "\n")
    finally:
        if log_f is not None:
            log_f.close()
    return records


# ---------------------------------------------------------------------------
# gradient verification


def _gradcheck_setup(seed: int):
    vocab = build_vocab(n_streams=3, text_size=6, semantic_size=5, acoustic_size=4)
    config = ModelConfig(
        d_model=8, n_layers=1, n_heads=2, d_ff=16, context_len=32, n_streams=3, init_std=0.05
    )
    state = init_model(config, vocab, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    text = rng.integers(0, vocab.text_size, size=4).tolist()
    frames = rng.integers(0, vocab.semantic_size, size=(3, 1))
    speech_tokens = np.concatenate(
        [
            vocab.semantic_start + frames,
            np.stack(
                [vocab.acoustic_range(cb)[0] + rng.integers(0, vocab.acoustic_size, size=3) for cb in (1, 2)],
                axis=1,
            ),
        ],
        axis=1,
    ).astype(np.int32)
    speech = FrameMatrix(speech_tokens, np.full(3, Modality.SPEECH, dtype=np.int8))
    seq = compose(Task.ASR, vocab, text=text, speech=speech)
    xh = delay(seq.x)
    mask = delay_cells(loss_mask(seq, Region.WHOLE), fill=False)
    weights = delay_cells(seq.weights, fill=0.0)
    tokens = xh.tokens[None]  # batch of 1
    seg = np.zeros((1, tokens.shape[1]), dtype=np.int32)
    return state, tokens, seg, mask[None], weights[None]


def _loss_only(state, tokens, seg, mask, weights) -> float:
    hf, _ = forward_acts(state, tokens, seg)
    logits = logits_from_hidden(state, hf)
    stats, _ = weighted_ce_loss(
        logits[:, :-1], tokens[:, 1:], mask[:, 1:], weights[:, 1:], state.vocab
    )
    return stats.loss


def grad_check(seed: int = 0, fd_step: float = 1e-3) -> dict[str, float]:
    """Analytic vs central-finite-difference gradients on a tiny model.

    Returns the max relative error per parameter group; frozen rows are
    checked for exactly-zero analytic gradient and reported as 0.0.
    """
    state, tokens, seg, mask, weights = _gradcheck_setup(seed)
    hf, acts = forward_acts(state, tokens, seg)
    logits = logits_from_hidden(state, hf)
    _, dlogits = weighted_ce_loss(
        logits[:, :-1], tokens[:, 1:], mask[:, 1:], weights[:, 1:], state.vocab, want_grad=True
    )
    full = np.zeros_like(logits)
    full[:, :-1] = dlogits
    grads = backward(state, acts, full)
    zero_frozen(grads)

    frozen = {name: row for name, row in FROZEN_SLICES}
    report: dict[str, float] = {}
    for name, p in state.params.items():
        g = grads[name]
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            if name in frozen:
                row = i // p.shape[-1] if p.ndim > 1 else i
                if row == frozen[name]:
                    if gflat[i] != 0.0:
                        raise AssertionError(f"{name}: frozen row has non-zero gradient")
                    continue
            old = flat[i]
            flat[i] = old + fd_step
            up = _loss_only(state, tokens, seg, mask, weights)
            flat[i] = old - fd_step
            down = _loss_only(state, tokens, seg, mask, weights)
            flat[i] = old
            fd = (up - down) / (2.0 * fd_step)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
        report[name] = worst
    return report
