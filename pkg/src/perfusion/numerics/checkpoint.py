"""Checkpoint files: a plain-text manifest followed by raw little-endian float64.

Layout::

    PFCKPT 1
    <name>\t<d0,d1,...>\t<byte offset>
    ...
    END
    <payload>

Offsets count from the first payload byte.  Scalars use an empty shape field.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from perfusion.errors import MissingArtifactError

MAGIC = "PFCKPT 1"
_DTYPE = np.dtype("<f8")


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    lines = [MAGIC]
    chunks = []
    offset = 0
    for name in sorted(arrays):
        if any(ch in name for ch in "\t\n"):
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.array(arrays[name], dtype=_DTYPE, order="C")  # keeps 0-d shapes
        lines.append(f"{name}\t{','.join(str(d) for d in arr.shape)}\t{offset}")
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    lines.append("END")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    end = blob.find(b"\nEND\n")
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise ValueError(f"{path} is not a checkpoint file")
    header = blob[:end].decode("utf-8").split("\n")[1:]
    payload = memoryview(blob)[end + 5:]
    out: dict[str, np.ndarray] = {}
    for line in header:
        name, shape_s, off_s = line.split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        off = int(off_s)
        arr = np.frombuffer(payload[off: off + count * 8], dtype=_DTYPE).astype(np.float64)
        out[name] = arr.reshape(shape)
    return out


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def strip_prefix(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix.rstrip("/") + "/"
    return {k[len(head):]: v for k, v in state.items() if k.startswith(head)}
