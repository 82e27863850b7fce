"""Frame-synchronous decoding for recognition and synthesis.

Both decoders share the same session mechanics: the composed prompt is
delayed and fed row by row, then one delayed row (all N streams) is emitted
per model call, so the cost of decoding T frames is prompt + T + (N - 1)
calls regardless of N. Each stream samples only from its legal id set;
cells whose source frame lies in the known prompt region or after the
end-of-speech frame are forced rather than sampled, which keeps the output
grid well-formed by construction.

Speech generation ends when stream 1 emits eos_speech; the following N - 1
flush rows complete the acoustic tails that the delay transform spreads
over later rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interleave import FrameMatrix, Modality, delay
from .model import DecodeCache, ModelState, forward_step, make_cache
from .sequence import Task, TaskSequence, compose, prompt_length
from .vocab import PAD_ID, JointVocab


@dataclass(frozen=True)
class DecodeParams:
    """Decoding knobs. ``min_frames`` keeps eos/eot off the legal set until
    that many frames are out (0 preserves the plain behavior; tests use it
    to pin output length)."""

    mode: str = "topk"  # "greedy" | "topk"
    k: int = 30
    temperature: float = 0.7
    max_frames: int = 256
    seed: int = 0
    min_frames: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "topk"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "topk" and self.k < 1:
            raise ValueError("top-k sampling needs k >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


GREEDY = DecodeParams(mode="greedy")


@dataclass
class AsrResult:
    text: list[int]  # local text ids
    truncated: bool
    n_calls: int
    prompt_rows: int


@dataclass
class TtsResult:
    frames: FrameMatrix  # generated target speech (eos frame excluded)
    truncated: bool
    n_calls: int
    prompt_rows: int


class DecodeSession:
    """One incremental pass over a model; counts its forward calls."""

    def __init__(self, state: ModelState):
        self.state = state
        self.cache: DecodeCache = make_cache(state)
        self.n_calls = 0

    def feed(self, row: np.ndarray) -> np.ndarray:
        self.n_calls += 1
        return forward_step(self.state, self.cache, row)


def sample_topk(logits: np.ndarray, legal: np.ndarray, k: int, temperature: float, rng: np.random.Generator) -> int:
    """Temperature-scaled top-k sample restricted to the legal id set."""
    idx = np.flatnonzero(legal)
    if idx.size == 0:
        raise ValueError("empty legal token set")
    vals = logits[idx].astype(np.float64)
    if k < idx.size:
        keep = np.argpartition(vals, -k)[-k:]
        idx, vals = idx[keep], vals[keep]
    z = vals / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(idx[rng.choice(idx.size, p=p)])


def greedy_pick(logits: np.ndarray, legal: np.ndarray) -> int:
    idx = np.flatnonzero(legal)
    if idx.size == 0:
        raise ValueError("empty legal token set")
    return int(idx[np.argmax(logits[idx])])


def _picker(params: DecodeParams, rng: np.random.Generator):
    if params.mode == "greedy":
        return lambda logits, legal: greedy_pick(logits, legal)
    return lambda logits, legal: sample_topk(logits, legal, params.k, params.temperature, rng)


def _legal_semantic(vocab: JointVocab, with_end: bool) -> np.ndarray:
    legal = np.zeros(vocab.total_size, dtype=bool)
    legal[vocab.semantic_start : vocab.acoustic_start] = True
    if with_end:
        legal[vocab.special_id("eos_speech")] = True
    return legal


def _legal_text(vocab: JointVocab, with_end: bool) -> np.ndarray:
    legal = np.zeros(vocab.total_size, dtype=bool)
    legal[vocab.text_start : vocab.semantic_start] = True
    if with_end:
        legal[vocab.special_id("eot")] = True
    return legal


def _legal_acoustic(vocab: JointVocab, stream: int) -> np.ndarray:
    legal = np.zeros(vocab.total_size, dtype=bool)
    lo, hi = vocab.acoustic_range(stream - 1)
    legal[lo:hi] = True
    legal[PAD_ID] = True
    return legal


def _feed_prompt(sess: DecodeSession, seq: TaskSequence) -> tuple[np.ndarray, int, np.ndarray]:
    """Feed the delayed prompt prefix; returns (next logits, rows fed, known grid)."""
    a = prompt_length(seq)
    rows = delay(seq.x).tokens[:a]
    logits = None
    for r in range(a):
        logits = sess.feed(rows[r])
    if logits is None:
        raise ValueError("empty prompt")
    return logits, a, seq.x.tokens


def decode_asr(state: ModelState, speech: FrameMatrix, params: DecodeParams | None = None) -> AsrResult:
    """Transcribe speech frames; greedy over the text legal set by default.

    Streams beyond the first stay pad through the text region. Stops at eot
    or when the frame budget (or the model context) runs out, in which case
    the partial text comes back flagged as truncated.
    """
    params = params or GREEDY
    vocab = state.vocab
    rng = np.random.default_rng(params.seed)
    pick = _picker(params, rng)
    # dummy single text token: composition only supplies the prompt prefix
    seq = compose(Task.ASR, vocab, text=[0], speech=speech)
    sess = DecodeSession(state)
    logits, a, known = _feed_prompt(sess, seq)

    budget = min(params.max_frames, state.config.context_len - a - 1)
    if budget < 0:
        raise ValueError(f"prompt of {a} rows does not fit the model context")
    eot = vocab.special_id("eot")
    legal = _legal_text(vocab, with_end=True)
    legal_no_end = _legal_text(vocab, with_end=False)
    n = vocab.n_streams

    text: list[int] = []
    truncated = False
    r = a
    while True:
        if len(text) >= budget:
            truncated = True
            break
        row = np.full(n, PAD_ID, dtype=np.int32)
        for j in range(2, n + 1):
            src = r - (j - 1)
            if src < a:
                row[j - 1] = known[src, j - 1]
        tok = pick(logits[0], legal if len(text) >= params.min_frames else legal_no_end)
        row[0] = tok
        logits = sess.feed(row)
        if tok == eot:
            break
        text.append(int(tok) - vocab.text_start)
        r += 1
    return AsrResult(text=text, truncated=truncated, n_calls=sess.n_calls, prompt_rows=a)


def decode_tts(
    state: ModelState,
    text: list[int],
    prompt_speech: FrameMatrix,
    params: DecodeParams | None = None,
) -> TtsResult:
    """Generate target speech for text, conditioned on a speaker prompt.

    Top-k sampling by default. Every delayed step fills all N streams: the
    semantic stream chooses content or eos_speech, acoustic streams choose
    within their codebook (pad is legal), and structurally determined cells
    are forced. Returns the undelayed target frames.
    """
    params = params or DecodeParams()
    vocab = state.vocab
    rng = np.random.default_rng(params.seed)
    pick = _picker(params, rng)
    dummy = _dummy_speech_frame(vocab)
    seq = compose(Task.TTS, vocab, text=text, speech=dummy, prompt=prompt_speech)
    sess = DecodeSession(state)
    logits, a, known = _feed_prompt(sess, seq)

    n = vocab.n_streams
    budget = min(params.max_frames, state.config.context_len - a - n + 1)
    if budget < 0:
        raise ValueError(f"prompt of {a} rows does not fit the model context")
    eos = vocab.special_id("eos_speech")
    legal_sem = _legal_semantic(vocab, with_end=True)
    legal_sem_no_end = _legal_semantic(vocab, with_end=False)
    legal_ac = {j: _legal_acoustic(vocab, j) for j in range(2, n + 1)}

    # undelayed output grid; frame index src holds the cell (src, stream)
    out = np.full((a + budget + n + 1, n), PAD_ID, dtype=np.int32)
    out[:a] = known[:a]
    eos_at: int | None = None
    truncated = False
    r = a
    while True:
        row = np.full(n, PAD_ID, dtype=np.int32)
        if eos_at is None:
            frames_out = r - a
            if frames_out >= budget:
                eos_at = r
                truncated = True
                row[0] = eos
            else:
                tok = pick(logits[0], legal_sem if frames_out >= params.min_frames else legal_sem_no_end)
                row[0] = tok
                if tok == eos:
                    eos_at = r
        # rows past the eos frame keep pad on stream 1 (flush phase)
        for j in range(2, n + 1):
            src = r - (j - 1)
            if src < a:
                row[j - 1] = known[src, j - 1]
            elif eos_at is not None and src >= eos_at:
                row[j - 1] = PAD_ID
            else:
                row[j - 1] = pick(logits[j - 1], legal_ac[j])
        for j in range(1, n + 1):
            src = r - (j - 1)
            if src >= a:
                out[src, j - 1] = row[j - 1]
        logits = sess.feed(row)
        if eos_at is not None and r >= eos_at + max(n - 2, 0):
            break
        r += 1

    m = (eos_at if eos_at is not None else a) - a
    frames = FrameMatrix(out[a : a + m].copy(), np.full(m, Modality.SPEECH, dtype=np.int8))
    return TtsResult(frames=frames, truncated=truncated, n_calls=sess.n_calls, prompt_rows=a)


def _dummy_speech_frame(vocab: JointVocab) -> FrameMatrix:
    """One structurally valid speech frame (composition filler; never fed)."""
    tokens = np.full((1, vocab.n_streams), PAD_ID, dtype=np.int32)
    tokens[0, 0] = vocab.semantic_start
    for cb in range(1, vocab.n_codebooks + 1):
        tokens[0, cb] = vocab.acoustic_range(cb)[0]
    return FrameMatrix(tokens, np.array([Modality.SPEECH], dtype=np.int8))
