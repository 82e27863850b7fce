"""Versioned binary checkpoints.

Layout (all integers little-endian):

    bytes 0..7    magic ``b"SLMCKPT1"``
    bytes 8..11   format version, uint32 (currently 1)
    bytes 12..19  header length H, uint64
    bytes 20..20+H-1
                  UTF-8 JSON header with keys: model (ModelConfig dict),
                  vocab (JointVocab dict), step (int), params (ordered list
                  of {name, shape}), has_moments (bool)
    then          one raw float32 little-endian C-order block per parameter,
                  in header order
    if has_moments
                  per parameter, in the same order: first-moment block then
                  second-moment block, float32 little-endian

Loading validates every shape against the configuration, so a truncated or
mismatched file fails loudly instead of producing a silently wrong model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState, param_names, param_shape
from .vocab import JointVocab

MAGIC = b"SLMCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]] | None = None,
    step: int | None = None,
) -> None:
    """Write a checkpoint; ``moments`` is the optional (m, v) optimizer pair."""
    names = param_names(state.config)
    header = {
        "model": state.config.to_dict(),
        "vocab": state.vocab.to_dict(),
        "step": int(state.step if step is None else step),
        "params": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
        "has_moments": moments is not None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(state.params[n], dtype="<f4").tobytes())
        if moments is not None:
            m, v = moments
            for n in names:
                f.write(np.ascontiguousarray(m[n], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(v[n], dtype="<f4").tobytes())


def load_checkpoint(
    path: str | Path, dtype=np.float32, want_moments: bool = False
) -> tuple[ModelState, tuple[dict, dict] | None]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["model"])
    vocab = JointVocab.from_dict(header["vocab"])

    names = param_names(config)
    listed = [e["name"] for e in header["params"]]
    if listed != names:
        raise CheckpointError(f"{path}: parameter list does not match configuration")
    offset = 20 + hlen
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        expected = param_shape(entry["name"], config, vocab)
        if shape != expected:
            raise CheckpointError(f"{path}: {entry['name']} has shape {shape}, config implies {expected}")
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(dtype)
        offset += count * 4

    moments = None
    if header["has_moments"]:
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            m[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(dtype)
            offset += count * 4
            v[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(dtype)
            offset += count * 4
        moments = (m, v)
    elif want_moments:
        raise CheckpointError(f"{path}: checkpoint carries no optimizer moments")
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    state = ModelState(config=config, vocab=vocab, params=params, dtype=np.dtype(dtype), step=int(header["step"]))
    return state, moments
