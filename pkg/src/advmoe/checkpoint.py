"""Binary checkpoint container.

Layout: magic "ADVMOE01", uint32 version, uint32 metadata length, UTF-8
JSON metadata (configs, partition, mask, seed, tensor manifest, optional
extra document), then each parameter tensor as little-endian float32 in
manifest order.
"""

import json
import struct

import numpy as np

from .config import BackboneConfig, ChannelMask, MoEConfig
from .model import MoEModel, build_model
from .tensor import ContractError

MAGIC = b"ADVMOE01"
VERSION = 1


class CheckpointError(ContractError):
    pass


def save_checkpoint(path, model: MoEModel, extra: dict | None = None):
    manifest = [{"name": n, "shape": list(t.data.shape)} for n, t in model.named_parameters()]
    meta = {
        "variant": model.variant,
        "backbone": model.backbone.to_dict(),
        "moe": model.moe.to_dict() if model.moe else None,
        "mask": model.mask.to_dict() if model.mask else None,
        "partitions": [[list(idx) for idx in row] for row in model.partitions]
        if model.partitions else None,
        "seed": model.seed,
        "sdense_scale": getattr(model, "_sdense_scale", None),
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in model.named_parameters():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, metadata dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 12)
    meta = json.loads(raw[16:16 + meta_len].decode("utf-8"))

    backbone = BackboneConfig.from_dict(meta["backbone"])
    moe = MoEConfig.from_dict(meta["moe"]) if meta["moe"] else None
    mask = ChannelMask.from_dict(meta["mask"]) if meta["mask"] else None
    if meta["variant"] == "sdense" and moe is None and meta.get("sdense_scale"):
        moe = MoEConfig(num_experts=1, model_scale=meta["sdense_scale"])
    model = build_model(backbone, meta["variant"], moe=moe, mask=mask, seed=meta["seed"])

    offset = 16 + meta_len
    named = model.named_parameters()
    if [n for n, _ in named] != [m["name"] for m in meta["tensors"]]:
        raise CheckpointError("tensor manifest does not match rebuilt model")
    for (name, t), m in zip(named, meta["tensors"]):
        if list(t.data.shape) != m["shape"]:
            raise CheckpointError(f"{name}: shape {m['shape']} vs model {list(t.data.shape)}")
        n = int(np.prod(m["shape"])) if m["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(m["shape"])
        t.data = arr.astype(model.dtype)
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"trailing bytes: file {len(raw)}, consumed {offset}")
    return model, meta
