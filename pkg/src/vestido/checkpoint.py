"""Versioned binary checkpoints.

Layout (all integers little-endian):

    b"ODPG1"                 magic
    uint32                   format version
    uint64                   header length in bytes
    header                   UTF-8 JSON: kind, config snapshot, step, RNG
                             state, Adam hyperparameters, tensor table and
                             the SHA-256 of the payload
    payload                  float32 arrays, concatenated in table order

Adam moment buffers are stored in the tensor table as `adam.m.<name>` and
`adam.v.<name>`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import humanize
import numpy as np

from vestido.errors import DatasetError, IntegrityError
from vestido.nn import Module
from vestido.optim import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"ODPG1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<5sIQ")
_DTYPE = np.dtype("<f4")
_ADAM_M = "adam.m."
_ADAM_V = "adam.v."


@dataclass
class Checkpoint:
    """Decoded checkpoint contents.

    Attributes:
        kind: What the parameters belong to ("vae", "vton", "features")
        config: Snapshot of the effective run configuration
        step: Global optimizer step at save time
        tensors: Parameter name → array
        adam: Optimizer state, or None when saved without one
        rng_state: `bit_generator.state` of the run generator
        extra: Free-form metadata (e.g. loss at save time)
    """

    kind: str
    config: dict[str, Any]
    step: int
    tensors: dict[str, np.ndarray]
    adam: AdamState | None = None
    rng_state: dict[str, Any] | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def restore(self, module: Module) -> Module:
        """Load parameters into `module` and mark it ready."""
        module.load_state_dict(self.tensors)
        module.ready = True
        return module

    def generator(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def save_checkpoint(
    path: Path | str,
    kind: str,
    module: Module,
    config: dict[str, Any],
    step: int = 0,
    adam: AdamState | None = None,
    rng: np.random.Generator | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Serialize `module` (and optionally optimizer and RNG state) to `path`.

    Raises:
        DatasetError: If the file cannot be written
    """
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = list(module.state_dict().items())
    if adam is not None:
        arrays += [(_ADAM_M + k, v) for k, v in sorted(adam.m.items())]
        arrays += [(_ADAM_V + k, v) for k, v in sorted(adam.v.items())]

    table = []
    chunks = []
    offset = 0
    for name, array in arrays:
        data = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        table.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    header = {
        "kind": kind,
        "config": config,
        "step": step,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "adam": adam.hyperparameters() if adam is not None else None,
        "tensors": table,
        "extra": extra or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + payload

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        logger.error("Cannot write checkpoint %s: %s", path, e)
        raise DatasetError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(
        "Saved %s checkpoint at step %d to %s (%s)",
        kind,
        step,
        path,
        humanize.naturalsize(len(blob)),
    )
    return path


def load_checkpoint(path: Path | str, kind: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Args:
        path: Checkpoint file
        kind: If given, the stored kind must match

    Raises:
        DatasetError: If the file is missing or unreadable
        IntegrityError: On a bad magic, version, header, kind or checksum
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"Checkpoint not found: {path}") from e
    except OSError as e:
        logger.error("Cannot read checkpoint %s: %s", path, e)
        raise DatasetError(f"Cannot read checkpoint {path}: {e}") from e

    if len(blob) < _PREFIX.size:
        raise IntegrityError(f"Checkpoint {path} is truncated")
    magic, version, header_length = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start : start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"Checkpoint {path} has a corrupt header: {e}") from e
    payload = blob[start + header_length :]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise IntegrityError(f"Checkpoint {path} payload checksum mismatch")
    if kind is not None and header.get("kind") != kind:
        raise IntegrityError(f"Checkpoint {path} holds '{header.get('kind')}', expected '{kind}'")

    tensors: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    try:
        for item in header["tensors"]:
            raw = payload[item["offset"] : item["offset"] + item["nbytes"]]
            array = np.frombuffer(raw, dtype=_DTYPE).reshape(item["shape"]).astype(np.float32)
            name = item["name"]
            if name.startswith(_ADAM_M):
                m[name[len(_ADAM_M) :]] = array
            elif name.startswith(_ADAM_V):
                v[name[len(_ADAM_V) :]] = array
            else:
                tensors[name] = array
    except (KeyError, ValueError) as e:
        raise IntegrityError(f"Checkpoint {path} has an inconsistent tensor table: {e}") from e

    adam = None
    if header.get("adam") is not None:
        adam = AdamState(**header["adam"], m=m, v=v)
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        step=int(header["step"]),
        tensors=tensors,
        adam=adam,
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
        version=version,
    )
