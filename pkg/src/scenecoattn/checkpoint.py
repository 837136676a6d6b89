"""Binary checkpoint format.

Layout::

    b"SCATCKPT"                      8-byte magic
    uint64 little-endian             header length in bytes
    header (UTF-8 JSON)              format_version, config, vocab, tensor table
    tensor payloads                  row-major little-endian, in table order

The relation matrix the model was trained with is stored as a non-trainable
buffer so inference does not need the graph file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .frontend import Vocabulary
from .model import ModelConfig, param_shapes

MAGIC = b"SCATCKPT"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
RELATION_BUFFER = "buffer.relation_matrix"


class CheckpointError(ValueError):
    pass


def _tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("=") or arr.dtype == dt:
            return tag
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(path, params: dict[str, np.ndarray], cfg: ModelConfig, vocab: Vocabulary,
                    relation_matrix: np.ndarray | None = None) -> None:
    tensors = dict(params)
    if relation_matrix is not None:
        tensors[RELATION_BUFFER] = np.asarray(relation_matrix, dtype=np.float64)
    table = [{"name": k, "dtype": _tag(a), "shape": list(a.shape)} for k, a in tensors.items()]
    header = json.dumps({"format_version": FORMAT_VERSION, "config": cfg.to_dict(),
                         "vocab": vocab.tokens, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for entry in table:
            arr = tensors[entry["name"]]
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[entry["dtype"]]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, Vocabulary, np.ndarray | None]:
    """Returns ``(params, config, vocab, relation_matrix)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocab"])
    if len(vocab) != cfg.vocab_size:
        raise CheckpointError(f"{path}: vocabulary size {len(vocab)} != config vocab_size {cfg.vocab_size}")
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset) \
            .reshape(shape).astype(dt.newbyteorder("="))
        offset += nbytes
    relation = tensors.pop(RELATION_BUFFER, None)
    expected = param_shapes(cfg)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor table does not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, config implies {shape}")
    params = {name: tensors[name] for name in expected}
    return params, cfg, vocab, relation
