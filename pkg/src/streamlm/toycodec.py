"""Deterministic, exactly invertible synthetic speech codec.

Stands in for real semantic/acoustic tokenizers so recognition and
synthesis have exact oracles at desk scale. Each character emits a fixed
number of frames: the semantic stream carries the character id (speaker
invariant), acoustic streams carry a modular mix of character, speaker, and
within-character frame index (speaker covariant). Stream 2 is character
independent, so speaker identity is readable from any single frame.

With ``noise_rate`` > 0 individual cells are perturbed within their class;
decoding majority-votes per character group and brute-force-scores speaker
candidates, so moderate noise still decodes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interleave import FrameMatrix, Modality
from .sequence import CorpusRecord, write_corpus
from .vocab import PAD_ID, JointVocab, build_vocab

ALPHABET = "abcdefghijklmnopqrstuvwxyz "


@dataclass(frozen=True)
class CodecSpec:
    frames_per_char: int = 4
    n_streams: int = 3
    semantic_size: int = 32
    acoustic_size: int = 32
    n_speakers: int = 4
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_char < 1:
            raise ValueError("frames_per_char must be >= 1")
        if self.n_streams < 2:
            raise ValueError("the codec needs at least one acoustic stream")
        if self.semantic_size < len(ALPHABET):
            raise ValueError(f"semantic_size must cover the {len(ALPHABET)}-char alphabet")
        if self.acoustic_size < self.n_speakers:
            raise ValueError("acoustic_size must be >= n_speakers so speakers stay recoverable")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "frames_per_char": self.frames_per_char,
            "n_streams": self.n_streams,
            "semantic_size": self.semantic_size,
            "acoustic_size": self.acoustic_size,
            "n_speakers": self.n_speakers,
            "noise_rate": self.noise_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodecSpec":
        return cls(**d)


def text_to_ids(text: str) -> list[int]:
    ids = []
    for ch in text:
        idx = ALPHABET.find(ch)
        if idx < 0:
            raise ValueError(f"character {ch!r} outside the codec alphabet")
        ids.append(idx)
    return ids


def ids_to_text(ids) -> str:
    return "".join(ALPHABET[i] if 0 <= i < len(ALPHABET) else "?" for i in ids)


def _acoustic_local(spec: CodecSpec, stream: int, char_idx: int, speaker: int, fi: int) -> int:
    # stream 2 ignores the character: a clean per-frame speaker channel
    char_mult = 0 if stream == 2 else 1
    return (char_mult * char_idx + speaker + (stream - 2) * fi + 3 * stream) % spec.acoustic_size


def encode_speech(
    spec: CodecSpec,
    vocab: JointVocab,
    text: str,
    speaker: int,
    rng: np.random.Generator | None = None,
) -> FrameMatrix:
    """Turn text into speech frames for one speaker; exact inverse of decode
    at noise_rate 0."""
    if not 0 <= speaker < spec.n_speakers:
        raise ValueError(f"speaker {speaker} outside [0, {spec.n_speakers})")
    char_ids = text_to_ids(text)
    if not char_ids:
        raise ValueError("cannot encode empty text")
    d = spec.frames_per_char
    n = spec.n_streams
    noisy = spec.noise_rate > 0.0
    if noisy and rng is None:
        rng = np.random.default_rng(spec.seed)

    tokens = np.empty((len(char_ids) * d, n), dtype=np.int32)
    t = 0
    for ci in char_ids:
        for fi in range(d):
            sem = ci
            if noisy and rng.random() < spec.noise_rate:
                sem = int(rng.integers(spec.semantic_size))
            tokens[t, 0] = vocab.semantic_start + sem
            for stream in range(2, n + 1):
                local = _acoustic_local(spec, stream, ci, speaker, fi)
                if noisy and rng.random() < spec.noise_rate:
                    local = int(rng.integers(spec.acoustic_size))
                tokens[t, stream - 1] = vocab.acoustic_range(stream - 1)[0] + local
            t += 1
    return FrameMatrix(tokens, np.full(tokens.shape[0], Modality.SPEECH, dtype=np.int8))


@dataclass
class DecodedSpeech:
    text: str
    speaker: int
    flagged: bool  # frame count not a multiple of the group size, or unreadable cells


def decode_speech(spec: CodecSpec, vocab: JointVocab, frames: FrameMatrix) -> DecodedSpeech:
    """Recover (text, speaker) by per-group majority vote.

    Robust to per-cell perturbation well past ``noise_rate`` 0.1 at the
    default group size; damaged groups decode to ``?`` and set the flag.
    """
    d = spec.frames_per_char
    tokens = frames.tokens
    flagged = tokens.shape[0] == 0 or tokens.shape[0] % d != 0
    n_groups = tokens.shape[0] // d
    n = spec.n_streams
    alpha = len(ALPHABET)

    chars: list[int | None] = []
    for g in range(n_groups):
        votes = np.zeros(alpha, dtype=np.int64)
        for fi in range(d):
            gid = int(tokens[g * d + fi, 0])
            if vocab.semantic_start <= gid < vocab.acoustic_start:
                local = gid - vocab.semantic_start
                if local < alpha:
                    votes[local] += 1
        if votes.sum() == 0:
            chars.append(None)
            flagged = True
        else:
            chars.append(int(votes.argmax()))

    speaker_scores = np.zeros(spec.n_speakers, dtype=np.int64)
    for g, ci in enumerate(chars):
        if ci is None:
            continue
        for fi in range(d):
            for stream in range(2, n + 1):
                gid = int(tokens[g * d + fi, stream - 1])
                lo, hi = vocab.acoustic_range(stream - 1)
                if not lo <= gid < hi:
                    continue
                local = gid - lo
                for s in range(spec.n_speakers):
                    if local == _acoustic_local(spec, stream, ci, s, fi):
                        speaker_scores[s] += 1
    speaker = int(speaker_scores.argmax()) if speaker_scores.sum() > 0 else 0
    if speaker_scores.sum() == 0:
        flagged = True

    text = "".join("?" if c is None else ALPHABET[c] for c in chars)
    return DecodedSpeech(text=text, speaker=speaker, flagged=flagged)


# ---------------------------------------------------------------------------
# corpus generation


def _rand_text(rng: np.random.Generator, lo: int, hi: int) -> str:
    """Random word-shaped text: letters with single separating spaces."""
    target = int(rng.integers(lo, hi + 1))
    letters = ALPHABET[:-1]
    out = []
    word_len = 0
    while len(out) < target:
        if word_len >= 2 and len(out) < target - 1 and rng.random() < 0.25:
            out.append(" ")
            word_len = 0
        else:
            out.append(letters[int(rng.integers(len(letters)))])
            word_len += 1
    return "".join(out)


def _spliced_text(rng: np.random.Generator, lo: int, hi: int, target_chars: int) -> str:
    parts = []
    total = 0
    while total < target_chars:
        part = _rand_text(rng, lo, hi)
        parts.append(part)
        total += len(part) + 1
    text = " ".join(parts)[:target_chars]
    if text.endswith(" "):
        text = text[:-1] + ALPHABET[int(rng.integers(26))]
    return text


_TASKS = ("textlm", "audiolm", "asr", "tts")


def gen_corpus(
    spec: CodecSpec,
    vocab: JointVocab,
    n_utts: int,
    len_range: tuple[int, int],
    long_form_frac: float,
    splice_target_len: int,
    seed: int,
    out_path=None,
) -> tuple[list[CorpusRecord], dict]:
    """Seeded corpus over all four tasks; byte-identical across reruns.

    A ``long_form_frac`` share of recognition/speech-only records are
    spliced concatenations approaching ``splice_target_len`` frames.
    Synthesis records carry a short speaker prompt from the same speaker.
    """
    lo, hi = int(len_range[0]), int(len_range[1])
    if not 1 <= lo <= hi:
        raise ValueError(f"infeasible length range [{lo}, {hi}]")
    if not 0.0 <= long_form_frac <= 1.0:
        raise ValueError("long_form_frac must lie in [0, 1]")
    records: list[CorpusRecord] = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, i])
        task = _TASKS[int(rng.integers(len(_TASKS)))]
        speaker = int(rng.integers(spec.n_speakers))
        long_form = task in ("asr", "audiolm") and long_form_frac > 0 and rng.random() < long_form_frac
        if long_form:
            target_chars = max(lo, splice_target_len // spec.frames_per_char)
            text = _spliced_text(rng, lo, hi, target_chars)
        else:
            text = _rand_text(rng, lo, hi)
        speech: list[list[int]] = []
        prompt_speech = None
        if task != "textlm":
            speech = encode_speech(spec, vocab, text, speaker, rng).tokens.tolist()
        if task == "tts":
            prompt_text = _rand_text(rng, 2, 4)
            prompt_speech = encode_speech(spec, vocab, prompt_text, speaker, rng).tokens.tolist()
        records.append(
            CorpusRecord(
                task=task,
                text=text_to_ids(text),
                speech=speech,
                speaker=speaker,
                id=f"utt{i:06d}",
                prompt_speech=prompt_speech,
            )
        )
    header = {
        "format": "streamlm-corpus-v1",
        "speech_ids": "global",
        "alphabet": ALPHABET,
        "vocab": vocab.to_dict(),
        "codec": spec.to_dict(),
        "n_utts": n_utts,
        "len_range": [lo, hi],
        "long_form_frac": long_form_frac,
        "splice_target_len": splice_target_len,
        "seed": seed,
    }
    if out_path is not None:
        write_corpus(out_path, records, header)
    return records, header


def vocab_for_codec(spec: CodecSpec, text_size: int = 32) -> JointVocab:
    """Joint vocabulary sized for this codec plus a character text range."""
    if text_size < len(ALPHABET):
        raise ValueError(f"text_size must cover the {len(ALPHABET)}-char alphabet")
    return build_vocab(spec.n_streams, text_size, spec.semantic_size, spec.acoustic_size)
