"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HYBK" | u32 version | u32 len + UTF-8 config text | u32 tensor count
    per tensor: u32 len + UTF-8 name | u8 rank | rank x u32 extents | f32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import SGD, Adam, HybridConfig, HybridModel, PlateauState, TrainState

MAGIC = b"HYBK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def encode(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    text = config_text.encode("utf-8")
    out += [struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<B", arr.ndim)]
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"file truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("bad magic: not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    text = r.take(r.u32("config length"), "config text").decode("utf-8")
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name = r.take(r.u32(f"name length of tensor #{i}"), f"name of tensor #{i}").decode("utf-8")
        what = f"tensor {name!r}"
        rank = r.take(1, what)[0]
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, what))
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, what)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return text, tensors


def _state_text(state: TrainState, label_names: list[str] | None) -> str:
    lines = [state.model.cfg.to_text().rstrip("\n")]
    lines.append(f"state.lr={state.lr!r}")
    lines.append(f"state.epoch={state.epoch}")
    lines.append(f"state.step={state.step}")
    lines.append(f"state.optimizer={type(state.optimizer).__name__.lower()}")
    lines.append(f"state.optimizer_t={state.optimizer.t}")
    for f in fields(PlateauState):
        lines.append(f"plateau.{f.name}={getattr(state.plateau, f.name)!r}")
    if label_names is not None:
        lines.append(f"meta.label_names={json.dumps(list(label_names))}")
    return "\n".join(lines) + "\n"


def checkpoint_save(state: TrainState, path, label_names: list[str] | None = None) -> None:
    tensors = dict(state.model.state_dict())
    tensors.update(state.optimizer.state_tensors())
    Path(path).write_bytes(encode(_state_text(state, label_names), tensors))


def checkpoint_load(path, expected: HybridConfig | None = None
                    ) -> tuple[TrainState, list[str] | None]:
    """Rebuild the training state stored at ``path``.

    With ``expected`` given, every model tensor must match the shapes that
    configuration produces.
    """
    text, tensors = decode(Path(path).read_bytes())
    pairs = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    cfg = HybridConfig.from_text(text)
    model = HybridModel(expected if expected is not None else cfg)

    own = model.state_dict()
    for name, arr in own.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {tensors[name].shape} "
                f"does not match model shape {arr.shape}"
            )
    model.load_state_dict({k: tensors[k] for k in own})

    params = dict(model.named_parameters())
    opt_kind = pairs.get("state.optimizer", "adam")
    optimizer = SGD(params) if opt_kind == "sgd" else Adam(params)
    opt_t = int(pairs.get("state.optimizer_t", 0))
    try:
        optimizer.load_state_tensors(tensors, opt_t)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks optimizer tensor {exc.args[0]!r}") from None

    plateau = PlateauState()
    for f in fields(PlateauState):
        key = f"plateau.{f.name}"
        if key in pairs:
            raw = pairs[key]
            if f.type == "str":
                value = raw.strip("'")
            elif f.type == "float":
                value = float(raw)
            else:
                value = int(raw)
            setattr(plateau, f.name, value)
    state = TrainState(model, float(pairs.get("state.lr", "0.001")), optimizer, plateau,
                       int(pairs.get("state.epoch", 0)), int(pairs.get("state.step", 0)))
    labels = json.loads(pairs["meta.label_names"]) if "meta.label_names" in pairs else None
    return state, labels
