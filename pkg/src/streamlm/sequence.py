"""Task sequence composition, loss regions, token weighting, and packing.

Four task layouts are supported (frames, stream 1 shown):

    text-only     [task_textlm] text... [eot]
    speech-only   [task_audiolm] [sos_speech] speech... [eos_speech] <pads>
    recognition   [task_asr] [sos_speech] speech... [eos_speech] <pads> text... [eot]
    synthesis     [task_tts] text... [eot] [sos_speech] prompt... [cont]
                  target... [eos_speech] <pads>

``<pads>`` are the N-1 all-pad border frames that absorb the delayed
acoustic tails of the preceding speech run. Placing them after the
eos_speech delimiter keeps the generation contract simple: stream 1 emits
eos_speech directly after the last semantic token, and the pads are exactly
the flush steps that complete the remaining acoustic tail.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .interleave import (
    DelayedMatrix,
    FrameMatrix,
    Modality,
    delay,
    delay_cells,
    frames_concat,
    pad_frames,
)
from .vocab import PAD_ID, JointVocab


class Task(enum.Enum):
    TEXTLM = "textlm"
    AUDIOLM = "audiolm"
    ASR = "asr"
    TTS = "tts"


class Region(enum.Enum):
    WHOLE = "whole"
    TARGET = "target"


@dataclass(frozen=True)
class WeightPolicy:
    """Per-token loss weights by token class (pad is always 0)."""

    w_text: float
    w_semantic: float
    w_acoustic: float

    def __post_init__(self):
        for v in (self.w_text, self.w_semantic, self.w_acoustic):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weights must be finite and non-negative, got {v}")

    @classmethod
    def defaults(cls, n_streams: int) -> "WeightPolicy":
        """Literal per-token ratio 1 : 1/2 : 1/(N-1)."""
        w_ac = 1.0 / (n_streams - 1) if n_streams > 1 else 0.0
        return cls(1.0, 0.5, w_ac)

    @classmethod
    def balanced_frame(cls, n_streams: int) -> "WeightPolicy":
        """Variant where a full speech frame sums to 1 (0.5 : 0.5 split)."""
        w_ac = 0.5 / (n_streams - 1) if n_streams > 1 else 0.0
        return cls(1.0, 0.5, w_ac)


@dataclass
class TaskSequence:
    """A composed training example.

    ``target_span`` is the half-open frame interval (0-indexed) holding the
    task's target region; ``weights`` are per-cell loss weights aligned to
    ``x.tokens`` (0 exactly at pad cells).
    """

    task: Task
    x: FrameMatrix
    target_span: tuple[int, int]
    weights: np.ndarray
    seq_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.x.n_frames


def weight_table(policy: WeightPolicy, vocab: JointVocab) -> np.ndarray:
    """Per-global-id weight lookup; non-pad specials weigh like text."""
    kinds = vocab.kind_table()
    table = np.empty(vocab.total_size, dtype=np.float64)
    table[kinds == 0] = 0.0
    table[kinds == 1] = policy.w_text
    table[kinds == 2] = policy.w_text
    table[kinds == 3] = policy.w_semantic
    table[kinds == 4] = policy.w_acoustic
    return table


def token_weights(x: FrameMatrix, policy: WeightPolicy, vocab: JointVocab) -> np.ndarray:
    """Per-cell weights for a frame grid, by token class."""
    return weight_table(policy, vocab)[x.tokens]


def loss_mask(seq: TaskSequence, region: Region) -> np.ndarray:
    """Per-cell supervision mask.

    WHOLE covers every non-pad cell except the frame-0 task token (given,
    never predicted); TARGET restricts that to the target span. For the
    single-segment tasks the two coincide.
    """
    mask = seq.x.tokens != PAD_ID
    mask[0, :] = False
    if region == Region.TARGET:
        a, b = seq.target_span
        keep = np.zeros(seq.n_frames, dtype=bool)
        keep[a:b] = True
        mask &= keep[:, None]
    return mask


# ---------------------------------------------------------------------------
# composition


def _special_frame(vocab: JointVocab, name: str) -> FrameMatrix:
    tokens = np.full((1, vocab.n_streams), PAD_ID, dtype=np.int32)
    tokens[0, 0] = vocab.special_id(name)
    return FrameMatrix(tokens, np.array([Modality.SPECIAL], dtype=np.int8))


def _text_frames(vocab: JointVocab, text_ids: Sequence[int]) -> FrameMatrix:
    ids = np.asarray(text_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("text must be a non-empty 1-D id sequence")
    if np.any(ids < 0) or np.any(ids >= vocab.text_size):
        raise ValueError("text local id out of range")
    tokens = np.full((ids.size, vocab.n_streams), PAD_ID, dtype=np.int32)
    tokens[:, 0] = vocab.text_start + ids
    return FrameMatrix(tokens, np.full(ids.size, Modality.TEXT, dtype=np.int8))


def _check_speech(vocab: JointVocab, frames: FrameMatrix | None, part: str) -> FrameMatrix:
    if frames is None or frames.n_frames == 0:
        raise ValueError(f"{part} speech is required and must be non-empty")
    if np.any(frames.modality != Modality.SPEECH):
        raise ValueError(f"{part} must contain speech frames only")
    frames.validate(vocab)
    return frames


def compose(
    task: Task,
    vocab: JointVocab,
    *,
    text: Sequence[int] | None = None,
    speech: FrameMatrix | None = None,
    prompt: FrameMatrix | None = None,
    policy: WeightPolicy | None = None,
    seq_id: str = "",
) -> TaskSequence:
    """Compose one task sequence from its parts.

    ``text`` holds local text ids; ``speech``/``prompt`` hold speech frame
    grids (for synthesis, ``speech`` is the target and ``prompt`` the speaker
    prompt). Raises if a part the task needs is missing or malformed.
    """
    if policy is None:
        policy = WeightPolicy.defaults(vocab.n_streams)
    n = vocab.n_streams
    pads = pad_frames(n - 1, n)

    if task == Task.TEXTLM:
        parts = [_special_frame(vocab, "task_textlm"), _text_frames(vocab, text), _special_frame(vocab, "eot")]
        x = frames_concat(parts)
        span = (1, x.n_frames)
    elif task == Task.AUDIOLM:
        sp = _check_speech(vocab, speech, "speech")
        parts = [
            _special_frame(vocab, "task_audiolm"),
            _special_frame(vocab, "sos_speech"),
            sp,
            _special_frame(vocab, "eos_speech"),
            pads,
        ]
        x = frames_concat(parts)
        span = (1, x.n_frames)
    elif task == Task.ASR:
        sp = _check_speech(vocab, speech, "speech")
        txt = _text_frames(vocab, text)
        parts = [
            _special_frame(vocab, "task_asr"),
            _special_frame(vocab, "sos_speech"),
            sp,
            _special_frame(vocab, "eos_speech"),
            pads,
            txt,
            _special_frame(vocab, "eot"),
        ]
        x = frames_concat(parts)
        span = (x.n_frames - txt.n_frames - 1, x.n_frames)
    elif task == Task.TTS:
        tgt = _check_speech(vocab, speech, "target")
        pr = _check_speech(vocab, prompt, "prompt")
        txt = _text_frames(vocab, text)
        head = [
            _special_frame(vocab, "task_tts"),
            txt,
            _special_frame(vocab, "eot"),
            _special_frame(vocab, "sos_speech"),
            pr,
            _special_frame(vocab, "cont"),
        ]
        tgt_start = sum(p.n_frames for p in head)
        parts = head + [tgt, _special_frame(vocab, "eos_speech"), pads]
        x = frames_concat(parts)
        span = (tgt_start, tgt_start + tgt.n_frames + 1)  # target frames + eos_speech
    else:  # pragma: no cover
        raise ValueError(f"unknown task {task}")

    return TaskSequence(
        task=task,
        x=x,
        target_span=span,
        weights=token_weights(x, policy, vocab),
        seq_id=seq_id,
    )


def prompt_length(seq: TaskSequence) -> int:
    """Delayed rows that are fully determined before the target region.

    Equals the target span start: delayed row r only holds tokens from
    frames <= r, so rows before the span start never touch the target.
    """
    return seq.target_span[0]


# ---------------------------------------------------------------------------
# corpus records


@dataclass
class CorpusRecord:
    task: str
    text: list[int]
    speech: list[list[int]]
    speaker: int
    id: str
    prompt_speech: list[list[int]] | None = None

    def to_json(self) -> str:
        d = {
            "task": self.task,
            "text": self.text,
            "speech": self.speech,
            "speaker": self.speaker,
            "id": self.id,
        }
        if self.prompt_speech is not None:
            d["prompt_speech"] = self.prompt_speech
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        d = json.loads(line)
        return cls(
            task=d["task"],
            text=list(d["text"]),
            speech=[list(f) for f in d["speech"]],
            speaker=int(d["speaker"]),
            id=str(d["id"]),
            prompt_speech=[list(f) for f in d["prompt_speech"]] if "prompt_speech" in d else None,
        )


def header_path(corpus_path: str | Path) -> Path:
    p = Path(corpus_path)
    return p.with_name(p.stem + ".header.json")


def write_corpus(path: str | Path, records: list[CorpusRecord], header: dict) -> None:
    path = Path(path)
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    with open(header_path(path), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")


def load_corpus(path: str | Path) -> tuple[list[CorpusRecord], dict]:
    path = Path(path)
    hp = header_path(path)
    if not hp.exists():
        raise FileNotFoundError(f"corpus header not found: {hp}")
    with open(hp) as f:
        header = json.load(f)
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(CorpusRecord.from_json(line))
    return records, header


def speech_to_frames(rows: list[list[int]]) -> FrameMatrix:
    tokens = np.asarray(rows, dtype=np.int32)
    return FrameMatrix(tokens, np.full(tokens.shape[0], Modality.SPEECH, dtype=np.int8))


def record_to_sequence(rec: CorpusRecord, vocab: JointVocab, policy: WeightPolicy | None = None) -> TaskSequence:
    task = Task(rec.task)
    kwargs: dict = {"policy": policy, "seq_id": rec.id}
    if task == Task.TEXTLM:
        return compose(task, vocab, text=rec.text, **kwargs)
    if task == Task.AUDIOLM:
        return compose(task, vocab, speech=speech_to_frames(rec.speech), **kwargs)
    if task == Task.ASR:
        return compose(task, vocab, text=rec.text, speech=speech_to_frames(rec.speech), **kwargs)
    if rec.prompt_speech is None:
        raise ValueError(f"record {rec.id}: synthesis task needs prompt_speech")
    return compose(
        task,
        vocab,
        text=rec.text,
        speech=speech_to_frames(rec.speech),
        prompt=speech_to_frames(rec.prompt_speech),
        **kwargs,
    )


# ---------------------------------------------------------------------------
# packing


class PackError(ValueError):
    pass


@dataclass
class PackedBatch:
    """Fixed-length training contexts with per-sequence attention segments."""

    tokens: np.ndarray  # (R, C, N) int32 delayed token rows
    seg: np.ndarray  # (R, C) int32; attention never crosses segment borders
    mask_whole: np.ndarray  # (R, C, N) bool
    mask_target: np.ndarray  # (R, C, N) bool
    weights: np.ndarray  # (R, C, N) float32
    n_text_frames: int  # content rows drawn from text-only sequences
    n_content_frames: int  # all content rows (excludes tail padding)


@dataclass
class _Bundle:
    tokens: np.ndarray
    mask_whole: np.ndarray
    mask_target: np.ndarray
    weights: np.ndarray
    is_text: bool

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def _bundle(seq: TaskSequence) -> _Bundle:
    xh = delay(seq.x)
    mw = loss_mask(seq, Region.WHOLE)
    mt = loss_mask(seq, Region.TARGET)
    return _Bundle(
        tokens=xh.tokens,
        mask_whole=delay_cells(mw, fill=False),
        mask_target=delay_cells(mt, fill=False),
        weights=delay_cells(seq.weights.astype(np.float32), fill=np.float32(0.0)),
        is_text=seq.task == Task.TEXTLM,
    )


def pack_batches(
    sequences: Sequence[TaskSequence],
    context_len: int,
    text_fraction: float,
    seed: int,
    rows_per_batch: int,
) -> Iterator[PackedBatch]:
    """Endless deterministic stream of packed batches.

    Sequences are delayed, then drawn with replacement and concatenated into
    fixed-length context rows; each sequence gets its own attention segment.
    The draw probability of the text-only pool is set from the pools' mean
    delayed lengths so the expected share of content frames coming from
    text-only sequences equals ``text_fraction``.
    """
    if not 0.0 <= text_fraction <= 1.0:
        raise ValueError("text_fraction must lie in [0, 1]")
    bundles = [_bundle(s) for s in sequences]
    for s, b in zip(sequences, bundles):
        if b.length > context_len:
            raise PackError(
                f"sequence {s.seq_id or '<unnamed>'} has delayed length {b.length} > context_len {context_len}"
            )
    text_pool = [b for b in bundles if b.is_text]
    speech_pool = [b for b in bundles if not b.is_text]
    if text_fraction > 0 and not text_pool:
        raise PackError("text_fraction > 0 but no text-only sequences")
    if text_fraction < 1 and not speech_pool:
        raise PackError("text_fraction < 1 but no non-text sequences")

    if text_fraction == 0.0:
        p_text = 0.0
    elif text_fraction == 1.0:
        p_text = 1.0
    else:
        mu_t = float(np.mean([b.length for b in text_pool]))
        mu_s = float(np.mean([b.length for b in speech_pool]))
        p_text = text_fraction * mu_s / (text_fraction * mu_s + (1.0 - text_fraction) * mu_t)

    rng = np.random.default_rng(seed)
    n = bundles[0].tokens.shape[1]
    carried: _Bundle | None = None

    while True:
        tokens = np.full((rows_per_batch, context_len, n), PAD_ID, dtype=np.int32)
        seg = np.full((rows_per_batch, context_len), 0, dtype=np.int32)
        mw = np.zeros((rows_per_batch, context_len, n), dtype=bool)
        mt = np.zeros((rows_per_batch, context_len, n), dtype=bool)
        wts = np.zeros((rows_per_batch, context_len, n), dtype=np.float32)
        n_text = 0
        n_content = 0
        for r in range(rows_per_batch):
            pos = 0
            seg_idx = 0
            while pos < context_len:
                if carried is not None:
                    b, carried = carried, None
                else:
                    if p_text > 0 and rng.random() < p_text:
                        pool = text_pool
                    else:
                        pool = speech_pool
                    b = pool[int(rng.integers(len(pool)))]
                if b.length > context_len - pos:
                    carried = b
                    break
                end = pos + b.length
                tokens[r, pos:end] = b.tokens
                mw[r, pos:end] = b.mask_whole
                mt[r, pos:end] = b.mask_target
                wts[r, pos:end] = b.weights
                seg[r, pos:end] = seg_idx
                n_content += b.length
                if b.is_text:
                    n_text += b.length
                seg_idx += 1
                pos = end
            # leftover tail keeps pad tokens and its own segment id
            if pos < context_len:
                seg[r, pos:] = seg_idx
        yield PackedBatch(tokens, seg, mw, mt, wts, n_text, n_content)
