"""Checkpoint files: an 8-byte little-endian manifest length, a JSON manifest
naming every array, then the arrays themselves as little-endian float32."""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

CHECKPOINT_FORMAT = "cbct-toxicity-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: Union[str, Path],
    state: Mapping[str, np.ndarray],
    metadata: Optional[Dict[str, Any]] = None,
):
    tensors = []
    blobs = []
    offset = 0
    for name, array in state.items():
        blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
        tensors.append(
            {"name": name, "shape": list(np.shape(array)), "offset": offset, "length": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": tensors,
        "metadata": metadata or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    (header_length,) = struct.unpack("<Q", raw[:8])
    if 8 + header_length > len(raw):
        raise CheckpointError(f"{path} manifest runs past the end of the file")
    manifest = json.loads(raw[8 : 8 + header_length].decode("utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")

    body = raw[8 + header_length :]
    state: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        start, length = entry["offset"], entry["length"]
        if start + length > len(body):
            raise CheckpointError(f"Tensor `{entry['name']}` runs past the end of {path}")
        array = np.frombuffer(body, dtype="<f4", count=length // 4, offset=start)
        state[entry["name"]] = array.astype(np.float32).reshape(entry["shape"])
    return state, manifest["metadata"]
