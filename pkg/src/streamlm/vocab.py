"""Joint token space over text, semantic, acoustic, and special tokens.

Global ids are laid out contiguously: specials first (pad at global id 0),
then text, then semantic, then one acoustic block per extra stream. Keeping
one id range per acoustic codebook means the stream a token belongs to is
recoverable from the id alone, which the per-stream masking in decoding
relies on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

#: Fixed control-flow tokens, in global-id order. pad must come first.
SPECIAL_TOKENS = (
    "pad",
    "bos",
    "eos",
    "eot",
    "sos_speech",
    "eos_speech",
    "task_textlm",
    "task_audiolm",
    "task_asr",
    "task_tts",
    "cont",
)

PAD_ID = 0


class TokenKind(enum.Enum):
    SPECIAL = "special"
    TEXT = "text"
    SEMANTIC = "semantic"
    ACOUSTIC = "acoustic"


@dataclass(frozen=True)
class TokenClass:
    """Class of one global id: kind plus the detail that kind carries.

    ``name`` is set for specials, ``codebook`` (1-based) for acoustics.
    """

    kind: TokenKind
    name: str | None = None
    codebook: int | None = None


@dataclass(frozen=True)
class JointVocab:
    n_streams: int
    text_size: int
    semantic_size: int
    acoustic_size: int
    specials: tuple[str, ...] = SPECIAL_TOKENS

    def __post_init__(self):
        if self.n_streams < 1:
            raise ValueError(f"n_streams must be >= 1, got {self.n_streams}")
        for field in ("text_size", "semantic_size", "acoustic_size"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.specials[0] != "pad":
            raise ValueError("first special token must be pad")

    # -- layout -------------------------------------------------------------

    @property
    def n_codebooks(self) -> int:
        return self.n_streams - 1

    @property
    def text_start(self) -> int:
        return len(self.specials)

    @property
    def semantic_start(self) -> int:
        return self.text_start + self.text_size

    @property
    def acoustic_start(self) -> int:
        return self.semantic_start + self.semantic_size

    @property
    def total_size(self) -> int:
        return self.acoustic_start + self.n_codebooks * self.acoustic_size

    def special_id(self, name: str) -> int:
        return self.specials.index(name)

    # -- id mapping ----------------------------------------------------------

    def classify(self, global_id: int) -> TokenClass:
        """Map a global id to its TokenClass. Raises on out-of-range ids."""
        gid = int(global_id)
        if not 0 <= gid < self.total_size:
            raise ValueError(f"global id {gid} outside [0, {self.total_size})")
        if gid < self.text_start:
            return TokenClass(TokenKind.SPECIAL, name=self.specials[gid])
        if gid < self.semantic_start:
            return TokenClass(TokenKind.TEXT)
        if gid < self.acoustic_start:
            return TokenClass(TokenKind.SEMANTIC)
        cb, _ = divmod(gid - self.acoustic_start, self.acoustic_size)
        return TokenClass(TokenKind.ACOUSTIC, codebook=cb + 1)

    def global_id(self, cls: TokenClass, local_id: int) -> int:
        """Map (class, local id) to the global id; inverse of local_id()."""
        lid = int(local_id)
        if cls.kind == TokenKind.SPECIAL:
            if cls.name is not None:
                return self.specials.index(cls.name)
            if not 0 <= lid < len(self.specials):
                raise ValueError(f"special local id {lid} out of range")
            return lid
        if cls.kind == TokenKind.TEXT:
            if not 0 <= lid < self.text_size:
                raise ValueError(f"text local id {lid} out of range")
            return self.text_start + lid
        if cls.kind == TokenKind.SEMANTIC:
            if not 0 <= lid < self.semantic_size:
                raise ValueError(f"semantic local id {lid} out of range")
            return self.semantic_start + lid
        cb = cls.codebook
        if cb is None or not 1 <= cb <= self.n_codebooks:
            raise ValueError(f"acoustic codebook {cb} out of range")
        if not 0 <= lid < self.acoustic_size:
            raise ValueError(f"acoustic local id {lid} out of range")
        return self.acoustic_start + (cb - 1) * self.acoustic_size + lid

    def local_id(self, global_id: int) -> tuple[TokenClass, int]:
        """Inverse of global_id(): global id -> (class, local id)."""
        cls = self.classify(global_id)
        gid = int(global_id)
        if cls.kind == TokenKind.SPECIAL:
            return cls, gid
        if cls.kind == TokenKind.TEXT:
            return cls, gid - self.text_start
        if cls.kind == TokenKind.SEMANTIC:
            return cls, gid - self.semantic_start
        return cls, (gid - self.acoustic_start) % self.acoustic_size

    # -- vectorized range helpers (used by weighting/masking) ----------------

    def kind_table(self) -> np.ndarray:
        """Per-global-id kind codes: 0 pad, 1 other special, 2 text, 3 semantic, 4 acoustic."""
        table = np.empty(self.total_size, dtype=np.int8)
        table[: self.text_start] = 1
        table[PAD_ID] = 0
        table[self.text_start : self.semantic_start] = 2
        table[self.semantic_start : self.acoustic_start] = 3
        table[self.acoustic_start :] = 4
        return table

    def acoustic_range(self, codebook: int) -> tuple[int, int]:
        """Half-open global id range of one acoustic codebook (1-based)."""
        if not 1 <= codebook <= self.n_codebooks:
            raise ValueError(f"codebook {codebook} out of range")
        start = self.acoustic_start + (codebook - 1) * self.acoustic_size
        return start, start + self.acoustic_size

    def stream_class_ok(self, stream: int, global_id: int) -> bool:
        """Whether a token may sit on a given 1-based speech-frame stream."""
        if global_id == PAD_ID:
            return True
        cls = self.classify(global_id)
        if stream == 1:
            return cls.kind == TokenKind.SEMANTIC
        return cls.kind == TokenKind.ACOUSTIC and cls.codebook == stream - 1

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_streams": self.n_streams,
            "text_size": self.text_size,
            "semantic_size": self.semantic_size,
            "acoustic_size": self.acoustic_size,
            "specials": list(self.specials),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointVocab":
        return cls(
            n_streams=int(d["n_streams"]),
            text_size=int(d["text_size"]),
            semantic_size=int(d["semantic_size"]),
            acoustic_size=int(d["acoustic_size"]),
            specials=tuple(d["specials"]),
        )


def build_vocab(n_streams: int, text_size: int, semantic_size: int, acoustic_size: int) -> JointVocab:
    """Construct the joint vocabulary with the standard special-token set."""
    return JointVocab(
        n_streams=n_streams,
        text_size=text_size,
        semantic_size=semantic_size,
        acoustic_size=acoustic_size,
    )
