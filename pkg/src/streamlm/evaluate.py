"""Error-rate, speaker-match, and perplexity metrics plus eval drivers.

The toy codec makes recognition and synthesis exactly scorable: decoded
text is compared token-by-token against the reference via minimal edit
distance, and the synthesis round trip goes through the codec decoder to
recover text and speaker. Text capability is tracked as perplexity through
the single-stream-compatible path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .inference import DecodeParams, decode_asr, decode_tts
from .model import ModelState, text_compat_forward
from .sequence import CorpusRecord, speech_to_frames
from .toycodec import CodecSpec, decode_speech, ids_to_text
from .vocab import JointVocab


def edit_distance(ref, hyp) -> int:
    """Minimal edit distance with unit substitution/insertion/deletion costs."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def wer(ref, hyp) -> float:
    """(S + D + I) / |ref|; exceeds 1 when insertions dominate."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


def speaker_match(decoded, expected) -> float:
    if len(decoded) != len(expected):
        raise ValueError(f"length mismatch: {len(decoded)} vs {len(expected)}")
    if not decoded:
        raise ValueError("no items")
    return float(np.mean([d == e for d, e in zip(decoded, expected)]))


def perplexity(state: ModelState, text_records: list[list[int]], vocab: JointVocab) -> float:
    """exp(mean per-token CE) over text sequences via the text-compat path.

    Each record is wrapped as [task_textlm] text... [eot]; every token after
    the task marker is scored.
    """
    if not text_records:
        raise ValueError("empty text corpus")
    task_id = vocab.special_id("task_textlm")
    eot = vocab.special_id("eot")
    total_ce = 0.0
    total_tokens = 0
    for text in text_records:
        ids = np.array([task_id] + [vocab.text_start + t for t in text] + [eot], dtype=np.int64)
        logits = text_compat_forward(state, ids).astype(np.float64)
        z = logits[:-1]
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        ce = lse - z[np.arange(len(ids) - 1), ids[1:]]
        total_ce += float(ce.sum())
        total_tokens += len(ids) - 1
    return float(np.exp(total_ce / total_tokens))


@dataclass
class EvalReport:
    task: str
    n_items: int
    wer: float | None = None
    speaker_match_rate: float | None = None
    perplexity: float | None = None
    truncation_count: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_items": self.n_items,
            "wer": self.wer,
            "speaker_match_rate": self.speaker_match_rate,
            "perplexity": self.perplexity,
            "truncation_count": self.truncation_count,
        }


def eval_asr(
    state: ModelState,
    records: list[CorpusRecord],
    params: DecodeParams | None = None,
    max_items: int | None = None,
) -> EvalReport:
    """Decode recognition records and score the char error rate."""
    items = records[:max_items] if max_items else records
    if not items:
        raise ValueError("no recognition records to evaluate")
    errors = 0.0
    truncated = 0
    for rec in items:
        res = decode_asr(state, speech_to_frames(rec.speech), params)
        errors += wer(rec.text, res.text)
        truncated += int(res.truncated)
    return EvalReport(task="asr", n_items=len(items), wer=errors / len(items), truncation_count=truncated)


def eval_tts(
    state: ModelState,
    records: list[CorpusRecord],
    codec: CodecSpec,
    params: DecodeParams | None = None,
    max_items: int | None = None,
) -> EvalReport:
    """Generate speech, decode it with the codec, score text and speaker."""
    items = records[:max_items] if max_items else records
    if not items:
        raise ValueError("no synthesis records to evaluate")
    vocab = state.vocab
    errors = 0.0
    speakers_hyp: list[int] = []
    speakers_ref: list[int] = []
    truncated = 0
    for rec in items:
        if rec.prompt_speech is None:
            raise ValueError(f"record {rec.id}: synthesis record lacks prompt_speech")
        res = decode_tts(state, rec.text, speech_to_frames(rec.prompt_speech), params)
        truncated += int(res.truncated)
        if res.frames.n_frames == 0:
            errors += 1.0  # all-deletion
            speakers_hyp.append(-1)
        else:
            dec = decode_speech(codec, vocab, res.frames)
            ref_text = ids_to_text(rec.text)
            errors += wer(ref_text, dec.text)
            speakers_hyp.append(dec.speaker)
        speakers_ref.append(rec.speaker)
    return EvalReport(
        task="tts",
        n_items=len(items),
        wer=errors / len(items),
        speaker_match_rate=speaker_match(speakers_hyp, speakers_ref),
        truncation_count=truncated,
    )


def eval_textlm(state: ModelState, records: list[CorpusRecord], max_items: int | None = None) -> EvalReport:
    items = records[:max_items] if max_items else records
    if not items:
        raise ValueError("no text records to evaluate")
    ppl = perplexity(state, [rec.text for rec in items], state.vocab)
    return EvalReport(task="textlm", n_items=len(items), perplexity=ppl)


def format_reports(reports: list[EvalReport]) -> str:
    lines = [f"{'task':<8} {'items':>6} {'wer':>8} {'spk-match':>10} {'ppl':>10} {'trunc':>6}"]
    for r in reports:
        lines.append(
            f"{r.task:<8} {r.n_items:>6} "
            f"{r.wer if r.wer is not None else float('nan'):>8.4f} "
            f"{r.speaker_match_rate if r.speaker_match_rate is not None else float('nan'):>10.4f} "
            f"{r.perplexity if r.perplexity is not None else float('nan'):>10.3f} "
            f"{r.truncation_count:>6}"
        )
    return "\n".join(lines)


def write_reports(path, reports: list[EvalReport], extra: dict | None = None) -> None:
    payload = {"reports": [r.to_dict() for r in reports]}
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
