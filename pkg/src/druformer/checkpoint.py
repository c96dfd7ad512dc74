"""Binary checkpoints: magic, header length, JSON header, then little-endian float64 payloads.

Layout::

    b"DRUFCKPT" | uint64-le header length | header JSON (utf-8) | tensor bytes

The header lists ``{name, shape, offset}`` per tensor (offsets relative to the start
of the payload) together with the stage tag, config hash and model hash.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .exceptions import CheckpointError
from .nn import Module

logger = logging.getLogger(__name__)

MAGIC = b"DRUFCKPT"
FORMAT_VERSION = 1
DTYPE = np.dtype("<f8")
STAGES = ("pe_pretrain", "full")


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    model_hash: str
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix`` with the prefix stripped."""
        return {name[len(prefix) :]: value for name, value in self.tensors.items() if name.startswith(prefix)}


def model_hash(module: Module) -> str:
    """Architecture fingerprint over parameter names and shapes."""
    spec = [[name, list(p.shape)] for name, p in module.named_parameters()]
    return hashlib.sha256(json.dumps(spec, separators=(",", ":")).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """Write ``checkpoint`` atomically (temporary file, then rename).

    Raises:
        CheckpointError: On unknown stage or IO failure
    """
    if checkpoint.stage not in STAGES:
        raise CheckpointError(f"Unknown checkpoint stage {checkpoint.stage!r}")
    entries = []
    chunks = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        array = np.ascontiguousarray(checkpoint.tensors[name], dtype=DTYPE)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps(
        {
            "format": FORMAT_VERSION,
            "stage": checkpoint.stage,
            "config_hash": checkpoint.config_hash,
            "model_hash": checkpoint.model_hash,
            "tensors": entries,
            "metadata": checkpoint.metadata,
        },
        sort_keys=True,
    ).encode("utf-8")

    target = Path(path)
    tmp = target.with_name(target.name + ".tmp")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for chunk in chunks:
                f.write(chunk)
        tmp.replace(target)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {target}: {e}")
        raise CheckpointError(f"Cannot write checkpoint {target}: {e}") from e
    logger.info(f"Saved {checkpoint.stage} checkpoint {target} ({len(entries)} tensors)")


def load_checkpoint(
    path: Union[str, Path], expected_stage: Optional[str] = None, expected_config_hash: Optional[str] = None
) -> Checkpoint:
    """Read a checkpoint, optionally enforcing its stage and config hash.

    Raises:
        CheckpointError: On format errors, truncation or a hash/stage mismatch
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not raw.startswith(MAGIC) or len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}") from e
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format {header.get('format')!r}")

    payload = memoryview(raw)[start + header_len :]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        begin, end = entry["offset"], entry["offset"] + count * DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"Checkpoint {path} is truncated at tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(payload[begin:end], dtype=DTYPE).reshape(shape).astype(np.float64)

    checkpoint = Checkpoint(
        stage=header["stage"],
        config_hash=header["config_hash"],
        model_hash=header["model_hash"],
        tensors=tensors,
        metadata=header.get("metadata", {}),
    )
    if expected_stage is not None and checkpoint.stage != expected_stage:
        raise CheckpointError(f"Expected a {expected_stage} checkpoint, got {checkpoint.stage}")
    if expected_config_hash is not None and checkpoint.config_hash != expected_config_hash:
        raise CheckpointError(
            f"Checkpoint config hash {checkpoint.config_hash} does not match config {expected_config_hash}"
        )
    return checkpoint
