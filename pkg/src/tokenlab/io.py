"""Binary artifact formats, all little-endian.

Checkpoint (``.ckpt``):
    magic b"TLCK" | u32 version=1 | u32 json_len | config JSON (model config,
    victim kind, extras) | u32 tensor_count | per tensor: u16 name_len,
    name utf-8, u8 ndim, ndim*u32 dims, float32 data.

Perturbation (``.pert``):
    magic b"TLPB" | u32 version=1 | u32 json_len | header JSON (variant,
    epsilon, lambda, iterations, seed, mechanism set, ids) | u8 ndim,
    ndim*u32 dims, float32 delta.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .attack import Perturbation
from .model import ModelConfig, ModelWeights
from .tensor import Tensor

CKPT_MAGIC = b"TLCK"
PERT_MAGIC = b"TLPB"
VERSION = 1


def _write_array(fh, arr):
    arr = np.asarray(arr, dtype="<f4")
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def _read_array(fh):
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return np.ascontiguousarray(data).astype(np.float32)


def save_checkpoint(path, weights: ModelWeights, kind="backbone", extra=None):
    header = {
        "model": weights.config.to_dict(),
        "kind": kind,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    named = weights.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            _write_array(fh, named[name].data)


def load_checkpoint(path):
    """Returns (weights, kind, extra)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(jlen))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            tensors[name] = Tensor(_read_array(fh))
    config = ModelConfig.from_dict(header["model"])
    return ModelWeights(config, tensors), header.get("kind", "backbone"), header.get("extra", {})


def save_perturbation(path, pert: Perturbation):
    header = {
        "variant": pert.variant,
        "epsilon": pert.epsilon,
        "lam": pert.lam,
        "iterations": pert.iterations,
        "seed": pert.seed,
        "mechanisms": list(pert.mechanisms),
        "image_id": pert.image_id,
        "target_class": pert.target_class,
        "patch_pos": list(pert.patch_pos) if pert.patch_pos is not None else None,
        "curve": [round(float(v), 8) for v in pert.curve],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PERT_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_array(fh, pert.delta)


def load_perturbation(path) -> Perturbation:
    with open(path, "rb") as fh:
        if fh.read(4) != PERT_MAGIC:
            raise ValueError(f"{path}: not a perturbation file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported perturbation version {version}")
        (jlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(jlen))
        delta = _read_array(fh)
    return Perturbation(
        delta=delta,
        variant=header["variant"],
        epsilon=header["epsilon"],
        lam=header["lam"],
        iterations=header["iterations"],
        seed=header["seed"],
        mechanisms=tuple(header["mechanisms"]),
        image_id=header.get("image_id"),
        target_class=header.get("target_class"),
        patch_pos=tuple(header["patch_pos"]) if header.get("patch_pos") else None,
        curve=header.get("curve", []),
    )
