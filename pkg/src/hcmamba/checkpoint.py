"""Checkpoints: a plain-text manifest plus one contiguous little-endian blob.

``save_checkpoint("run/best.ckpt", ...)`` writes the manifest to
``run/best.ckpt`` and the tensors to ``run/best.ckpt.bin``. Manifest lines are
tab separated::

    format      hcmamba-checkpoint/1
    seed        0
    epoch       12
    blob_bytes  1234567
    config      base_channels=32
    meta        step=400
    tensor      embed.weight    float32    32x4x4x3    0

Tensor offsets must tile the blob exactly, in manifest order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT = "hcmamba-checkpoint/1"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def num_scalars(self) -> int:
        return sum(a.size for a in self.tensors.values())


def blob_path(path) -> Path:
    return Path(str(path) + ".bin")


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"format\t{FORMAT}", f"seed\t{ckpt.seed}", f"epoch\t{ckpt.epoch}"]
    chunks, offset, entries = [], 0, []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        prec = arr.dtype.name
        if prec not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unsupported precision {prec}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[prec]).tobytes()
        entries.append(f"tensor\t{name}\t{prec}\t{_shape_str(arr.shape)}\t{offset}")
        chunks.append(raw)
        offset += len(raw)
    lines.append(f"blob_bytes\t{offset}")
    lines += [f"config\t{k}={v}" for k, v in ckpt.config.items()]
    lines += [f"meta\t{k}={v}" for k, v in ckpt.meta.items()]
    lines += entries
    # blob first, so a manifest never points at a missing blob
    blob_path(path).write_bytes(b"".join(chunks))
    path.write_text("\n".join(lines) + "\n")


def _kv(value: str, lineno: int) -> tuple[str, str]:
    key, sep, val = value.partition("=")
    if not sep:
        raise CheckpointError(f"manifest line {lineno}: expected key=value, got {value!r}")
    return key, val


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    if not blob_path(path).exists():
        raise CheckpointError(f"checkpoint blob {blob_path(path)} is missing")
    blob = blob_path(path).read_bytes()
    header: dict[str, str] = {}
    config: dict[str, str] = {}
    meta: dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        kind = parts[0]
        if kind == "tensor":
            if len(parts) != 5:
                raise CheckpointError(f"manifest line {lineno}: malformed tensor entry")
            _, name, prec, shape_s, off_s = parts
            if prec not in _DTYPES:
                raise CheckpointError(f"manifest line {lineno}: unknown precision {prec!r}")
            try:
                shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
                off = int(off_s)
            except ValueError:
                raise CheckpointError(f"manifest line {lineno}: bad shape or offset") from None
            entries.append((name, prec, shape, off, lineno))
        elif kind in ("config", "meta") and len(parts) == 2:
            k, v = _kv(parts[1], lineno)
            (config if kind == "config" else meta)[k] = v
        elif len(parts) == 2:
            header[kind] = parts[1]
        else:
            raise CheckpointError(f"manifest line {lineno}: unrecognised entry {line!r}")
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} manifest")
    declared = int(header.get("blob_bytes", -1))
    if declared != len(blob):
        raise CheckpointError(f"blob is {len(blob)} bytes but the manifest declares {declared}")

    tensors: dict[str, np.ndarray] = {}
    expected_off = 0
    for name, prec, shape, off, lineno in entries:
        if name in tensors:
            raise CheckpointError(f"manifest line {lineno}: duplicate tensor {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[prec].itemsize
        if off != expected_off:
            raise CheckpointError(f"manifest line {lineno}: tensor {name} at offset {off}, "
                                  f"expected {expected_off} (offsets must tile the blob)")
        if off + nbytes > len(blob):
            raise CheckpointError(f"tensor {name} runs past the end of the blob "
                                  f"(offset {off} + {nbytes} > {len(blob)})")
        arr = np.frombuffer(blob, dtype=_DTYPES[prec], count=nbytes // _DTYPES[prec].itemsize,
                            offset=off)
        tensors[name] = arr.reshape(shape).astype(_DTYPES[prec].newbyteorder("="))
        expected_off = off + nbytes
    if expected_off != len(blob):
        raise CheckpointError(f"blob has {len(blob) - expected_off} trailing bytes after "
                              f"offset {expected_off} not covered by the manifest")
    return Checkpoint(tensors, config, int(header.get("seed", 0)), int(header.get("epoch", 0)), meta)


def shape_mismatches(expected: dict[str, tuple], found: dict[str, np.ndarray]) -> list[str]:
    """Human-readable differences between expected parameter shapes and a checkpoint."""
    out = []
    for name, shape in expected.items():
        if name not in found:
            out.append(f"missing {name} {_shape_str(shape)}")
        elif tuple(found[name].shape) != tuple(shape):
            out.append(f"{name}: expected {_shape_str(shape)}, checkpoint has "
                       f"{_shape_str(found[name].shape)}")
    out += [f"unexpected {name}" for name in found if name not in expected]
    return out
