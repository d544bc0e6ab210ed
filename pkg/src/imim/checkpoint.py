"""Checkpoint container format.

Layout: magic "IMIM" | u32 version | u32 header_len | JSON header padded with
spaces to a fixed size | concatenated tensor payloads, each in the IMTN
binary tensor format. The header carries the model config, an encoder_only
flag, free-form extra metadata, and the named-tensor offset table. Keeping
the header at a fixed size makes payload offsets stable and means an
encoder-only export is smaller than its source by exactly the dropped
tensors' bytes.
"""

from __future__ import annotations

import io
import json
import struct

from .model import MimConfig, MimModel
from .tensor import Tensor, dump_tensor, load_tensor, tensor_byte_size

CONTAINER_MAGIC = b"IMIM"
CONTAINER_VERSION = 1
HEADER_SIZE = 32768

ENCODER_TENSOR_PREFIXES = ("pos_embed", "patch_proj.", "enc.", "enc_norm.")


class ExportError(RuntimeError):
    pass


def is_encoder_tensor(name: str) -> bool:
    return name.startswith(ENCODER_TENSOR_PREFIXES)


def save_container(path, meta: dict, tensors: dict[str, Tensor]) -> None:
    table = []
    payload = io.BytesIO()
    for name, t in tensors.items():
        offset = payload.tell()
        dump_tensor(t, payload)
        table.append({"name": name, "offset": offset,
                      "bytes": payload.tell() - offset})
    header = dict(meta)
    header["tensors"] = table
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    if len(blob) > HEADER_SIZE:
        raise ValueError(
            f"checkpoint header of {len(blob)} bytes exceeds the fixed "
            f"{HEADER_SIZE}-byte slot")
    blob = blob + b" " * (HEADER_SIZE - len(blob))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CONTAINER_MAGIC, CONTAINER_VERSION, HEADER_SIZE))
        fh.write(blob)
        fh.write(payload.getvalue())


def load_container(path) -> tuple[dict, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        magic, version, header_len = struct.unpack("<4sII", fh.read(12))
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != CONTAINER_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(header_len))
        payload_start = fh.tell()
        tensors = {}
        for entry in meta.pop("tensors"):
            fh.seek(payload_start + entry["offset"])
            tensors[entry["name"]] = load_tensor(fh)
    return meta, tensors


def model_tensors(model: MimModel) -> dict[str, Tensor]:
    out = {"pos_embed": model.pos_embed}
    out.update(model.params)
    return out


def save_model(model: MimModel, path, extra: dict | None = None) -> None:
    meta = {"config": model.config.to_dict(),
            "encoder_only": model.encoder_only,
            "extra": extra or {}}
    save_container(path, meta, model_tensors(model))


def load_model(path) -> tuple[MimModel, dict]:
    meta, tensors = load_container(path)
    config = MimConfig.from_dict(meta["config"])
    model = MimModel(config, seed=None, encoder_only=bool(meta["encoder_only"]))
    missing = [n for n in model.params if n not in tensors]
    if missing:
        raise ValueError(f"checkpoint missing tensors: {missing}")
    for name, p in model.params.items():
        src = tensors[name]
        if src.data.shape != p.data.shape:
            raise ValueError(
                f"tensor {name} has shape {src.data.shape}, expected {p.data.shape}")
        p.data[...] = src.data
    model.pos_embed = Tensor(tensors["pos_embed"].data)
    return model, meta.get("extra", {})


def export_encoder_file(src_path, dst_path) -> None:
    """Write an encoder-only copy: cross-attention and decoder tensors dropped."""
    meta, tensors = load_container(src_path)
    config = MimConfig.from_dict(meta["config"])
    kept = {n: t for n, t in tensors.items() if is_encoder_tensor(n)}
    skeleton = MimModel(config, seed=None, encoder_only=True)
    required = set(model_tensors(skeleton))
    if not required <= set(kept):
        raise ExportError(
            f"source checkpoint is incomplete, missing {sorted(required - set(kept))}")
    save_container(dst_path, {"config": meta["config"], "encoder_only": True,
                              "extra": {}}, kept)


def checkpoint_bytes(path) -> dict[str, int]:
    """Per-tensor payload byte sizes of a container, for byte accounting."""
    meta, tensors = load_container(path)
    return {n: tensor_byte_size(t.data.shape) for n, t in tensors.items()}
