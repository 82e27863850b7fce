"""Multi-stream speech-text language modeling on discrete tokens.

Joint text/semantic/acoustic vocabulary, stream-delay interleaving with an
exact inverse, four task-sequence layouts with weighted loss regions, a
decoder-only multi-stream transformer (numpy with numba-accelerated
kernels), two-phase training schedules, frame-synchronous decoding, and a
deterministic invertible toy codec for end-to-end verification.
"""

from .interleave import DelayedMatrix, FrameMatrix, Modality, delay, insert_border_pads, undelay
from .model import ModelConfig, ModelState, init_model
from .sequence import Region, Task, TaskSequence, WeightPolicy, compose
from .toycodec import CodecSpec
from .training import TrainSchedule
from .vocab import JointVocab, TokenClass, TokenKind, build_vocab

__version__ = "0.1.0"

__all__ = [
    "CodecSpec",
    "DelayedMatrix",
    "FrameMatrix",
    "JointVocab",
    "Modality",
    "ModelConfig",
    "ModelState",
    "Region",
    "Task",
    "TaskSequence",
    "TokenClass",
    "TokenKind",
    "TrainSchedule",
    "WeightPolicy",
    "build_vocab",
    "compose",
    "delay",
    "init_model",
    "insert_border_pads",
    "undelay",
    "__version__",
]
