"""Bit-exact checkpoint persistence.

Layout: magic ``MBSL``, u32 LE version, u32 LE JSON length, UTF-8 JSON
{model_cfg, train_cfg, provenance, manifest: ordered [name, shape]
pairs}, then the arrays as row-major float32 little-endian in manifest
order.  load(save(x)) reproduces the parameter bytes exactly.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import model as modelmod
from .config import ModelConfig, TrainConfig
from .errors import CheckpointError

MAGIC = b"MBSL"
VERSION = 1


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    provenance: dict
    params: modelmod.ModelParams


def checkpoint_bytes(model_cfg, train_cfg, params, provenance):
    flat = params.flat()
    manifest = [[name, list(arr.shape)] for name, arr in flat.items()]
    header = {
        "model_cfg": model_cfg.to_dict(),
        "train_cfg": train_cfg.to_dict(),
        "provenance": provenance,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for name, _ in manifest:
        chunks.append(np.ascontiguousarray(flat[name], dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, model_cfg, train_cfg, params, provenance):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model_cfg, train_cfg, params, provenance))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, jlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(raw) < 12 + jlen:
        raise CheckpointError("truncated checkpoint (header cut short)")
    try:
        header = json.loads(raw[12:12 + jlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    model_cfg = ModelConfig.from_dict(header["model_cfg"])
    train_cfg = TrainConfig.from_dict(header["train_cfg"])
    provenance = header["provenance"]
    manifest = header["manifest"]

    if "max_len" not in provenance:
        raise CheckpointError("checkpoint provenance lacks max_len")
    params = modelmod.empty_params(model_cfg, int(provenance["max_len"]),
                                   dtype=np.float32)
    flat = params.flat()
    expected = [[name, list(arr.shape)] for name, arr in flat.items()]
    if manifest != expected:
        raise CheckpointError(
            "checkpoint manifest does not match the embedded config "
            f"(got {manifest[:3]}..., expected {expected[:3]}...)")

    offset = 12 + jlen
    for name, shape in manifest:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"truncated checkpoint (array {name} cut short)")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        flat[name][...] = arr.reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError("trailing bytes after final array")
    return Checkpoint(model_cfg=model_cfg, train_cfg=train_cfg,
                      provenance=provenance, params=params)
