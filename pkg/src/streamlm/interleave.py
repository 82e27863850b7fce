"""Frame grids and the stream-delay transform.

A frame holds N parallel token slots. Delaying shifts stream n down by n-1
frames, so within one original frame the stream-n token lands after the
stream-(n-1) token; next-frame prediction on the delayed grid therefore sees
lower streams of the same frame as context. The transform is exactly
invertible; ``undelay`` also validates the structurally-forced pad triangles
so malformed delayed grids surface instead of decoding silently wrong.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .vocab import PAD_ID, JointVocab, TokenKind


class Modality(enum.IntEnum):
    TEXT = 0
    SPEECH = 1
    SPECIAL = 2


@dataclass
class FrameMatrix:
    """T x N grid of global token ids with a per-frame modality tag.

    Text and special frames carry their payload on stream 1 and pad on all
    other streams; speech frames carry a semantic token (or pad) on stream 1
    and codebook-n-1 acoustic tokens (or pad) on stream n >= 2.
    """

    tokens: np.ndarray  # (T, N) int32
    modality: np.ndarray  # (T,) int8 of Modality values

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int32)
        self.modality = np.ascontiguousarray(self.modality, dtype=np.int8)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.modality.shape != (self.tokens.shape[0],):
            raise ValueError("modality length must equal frame count")

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_streams(self) -> int:
        return self.tokens.shape[1]

    def validate(self, vocab: JointVocab) -> None:
        """Check the per-modality stream-class invariants against a vocab."""
        if self.n_streams != vocab.n_streams:
            raise ValueError("stream count does not match vocab")
        for t in range(self.n_frames):
            mod = Modality(self.modality[t])
            row = self.tokens[t]
            if mod in (Modality.TEXT, Modality.SPECIAL):
                if np.any(row[1:] != PAD_ID):
                    raise ValueError(f"frame {t}: non-pad token beyond stream 1 in a {mod.name} frame")
                kind = vocab.classify(int(row[0])).kind
                if mod == Modality.TEXT and kind != TokenKind.TEXT:
                    raise ValueError(f"frame {t}: text frame carries {kind}")
                if mod == Modality.SPECIAL and kind != TokenKind.SPECIAL:
                    raise ValueError(f"frame {t}: special frame carries {kind}")
            else:
                for n in range(1, self.n_streams + 1):
                    if not vocab.stream_class_ok(n, int(row[n - 1])):
                        raise ValueError(f"frame {t}: stream {n} token {row[n-1]} has the wrong class")

    def copy(self) -> "FrameMatrix":
        return FrameMatrix(self.tokens.copy(), self.modality.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameMatrix):
            return NotImplemented
        return (
            self.tokens.shape == other.tokens.shape
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.modality, other.modality)
        )


@dataclass(eq=False)
class DelayedMatrix:
    """(T + N - 1) x N delayed view of a FrameMatrix.

    ``source_modality`` is the original per-frame tag vector, carried along
    so the inverse transform restores the FrameMatrix exactly.
    """

    tokens: np.ndarray  # (T + N - 1, N) int32
    source_t: int
    source_modality: np.ndarray  # (source_t,) int8

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_streams(self) -> int:
        return self.tokens.shape[1]


def frames_concat(parts: list[FrameMatrix]) -> FrameMatrix:
    return FrameMatrix(
        np.concatenate([p.tokens for p in parts], axis=0),
        np.concatenate([p.modality for p in parts], axis=0),
    )


def pad_frames(count: int, n_streams: int) -> FrameMatrix:
    """``count`` all-pad special frames (the border-padding unit)."""
    return FrameMatrix(
        np.full((count, n_streams), PAD_ID, dtype=np.int32),
        np.full(count, Modality.SPECIAL, dtype=np.int8),
    )


def insert_border_pads(x: FrameMatrix) -> FrameMatrix:
    """Insert N-1 all-pad frames after every maximal speech run.

    Pads go where a speech run is followed by a text/special frame and after
    a speech run that ends the sequence, so delayed acoustic tails never
    share a delayed frame with the following text. Borders entering speech
    need nothing: text frames have no tails.
    """
    n = x.n_streams
    if n == 1 or x.n_frames == 0:
        return x.copy()
    parts: list[FrameMatrix] = []
    run_start = 0
    speech = x.modality == Modality.SPEECH
    for t in range(x.n_frames + 1):
        ended_run = t == x.n_frames or not speech[t]
        if ended_run and t > 0 and speech[t - 1]:
            parts.append(FrameMatrix(x.tokens[run_start:t], x.modality[run_start:t]))
            parts.append(pad_frames(n - 1, n))
            run_start = t
    if run_start < x.n_frames:
        parts.append(FrameMatrix(x.tokens[run_start:], x.modality[run_start:]))
    if not parts:
        return x.copy()
    return frames_concat(parts)


def delay(x: FrameMatrix) -> DelayedMatrix:
    """Shift stream n down by n-1 rows, padding the exposed triangles."""
    t, n = x.tokens.shape
    out = np.full((t + n - 1, n), PAD_ID, dtype=np.int32)
    for j in range(n):
        out[j : j + t, j] = x.tokens[:, j]
    return DelayedMatrix(out, source_t=t, source_modality=x.modality.copy())


def delay_cells(values: np.ndarray, fill=0) -> np.ndarray:
    """Apply the same shift to any per-cell array (masks, weights)."""
    t, n = values.shape
    out = np.full((t + n - 1, n), fill, dtype=values.dtype)
    for j in range(n):
        out[j : j + t, j] = values[:, j]
    return out


def undelay(xh: DelayedMatrix) -> FrameMatrix:
    """Exact inverse of :func:`delay`.

    Rejects grids whose leading/trailing forced-pad triangles hold non-pad
    tokens; those positions cannot come from any source FrameMatrix.
    """
    t = xh.source_t
    rows, n = xh.tokens.shape
    if rows != t + n - 1:
        raise ValueError(f"delayed grid has {rows} rows, expected {t + n - 1}")
    for j in range(n):
        lead = xh.tokens[:j, j]
        trail = xh.tokens[j + t :, j]
        if np.any(lead != PAD_ID) or np.any(trail != PAD_ID):
            raise ValueError(f"non-pad token in the forced-pad triangle of stream {j + 1}")
    tokens = np.empty((t, n), dtype=np.int32)
    for j in range(n):
        tokens[:, j] = xh.tokens[j : j + t, j]
    return FrameMatrix(tokens, xh.source_modality.copy())
