"""Model bundles and the binary checkpoint container.

Layout (little-endian)::

    magic b"CRYP" (CrysFormer) or b"CRYU" (U-Net)   u32 version
    u32 meta_len, meta JSON (utf-8)
    u32 n_tensors, then per tensor:
        u32 name_len, name, u32 ndim, ndim x u32 shape, f32 data (row-major)

A refined model embeds its prior: the prior's metadata sits under
``meta["prior"]`` and its tensors carry a ``prior.`` name prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import CrysFormer, ModelConfig
from .unet import UNet3D, UnetConfig

MAGICS = {"crysformer": b"CRYP", "unet": b"CRYU"}
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelBundle:
    """A network plus what is needed to feed it: architecture, J, refine flag and prior."""

    arch: str
    module: torch.nn.Module
    J: int
    partials: bool
    refine: bool = False
    prior: "ModelBundle | None" = None
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        if self.arch == "crysformer":
            base = "crysformer" if self.partials else "crysformer-nops"
        else:
            base = "unet+ps" if self.partials else "unet"
        return base + ("+r" if self.refine else "")

    @property
    def config(self):
        return self.module.cfg

    def describe(self) -> dict:
        d = {
            "arch": self.arch,
            "kind": self.kind,
            "J": self.J,
            "partials": self.partials,
            "refine": self.refine,
            "config": self.config.to_dict(),
            **self.meta,
        }
        if self.prior is not None:
            d["prior"] = self.prior.describe()
        return d


def build_module(arch: str, config):
    if arch == "crysformer":
        return CrysFormer(config)
    if arch == "unet":
        return UNet3D(config)
    raise ValueError(f"unknown architecture {arch!r}")


def _tensors(bundle: ModelBundle, prefix: str = ""):
    for name, t in bundle.module.state_dict().items():
        yield prefix + name, t
    if bundle.prior is not None:
        yield from _tensors(bundle.prior, prefix + "prior.")


def save_checkpoint(bundle: ModelBundle, path) -> None:
    meta = json.dumps(bundle.describe(), sort_keys=True).encode("utf-8")
    items = list(_tensors(bundle))
    with open(path, "wb") as fh:
        fh.write(MAGICS[bundle.arch])
        fh.write(struct.pack("<II", CKPT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(items)))
        for name, t in items:
            raw = name.encode("utf-8")
            arr = t.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _bundle_from_meta(meta: dict, tensors: dict, prefix: str = "") -> ModelBundle:
    arch = meta["arch"]
    cfg = ModelConfig.from_dict(meta["config"]) if arch == "crysformer" else UnetConfig.from_dict(meta["config"])
    module = build_module(arch, cfg)
    state = module.state_dict()
    loaded = {}
    for name, ref in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"tensor {key!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(loaded)
    module.eval()
    prior = _bundle_from_meta(meta["prior"], tensors, prefix + "prior.") if "prior" in meta else None
    extra = {k: v for k, v in meta.items() if k not in {"arch", "kind", "J", "partials", "refine", "config", "prior"}}
    return ModelBundle(arch, module, int(meta["J"]), bool(meta["partials"]), bool(meta["refine"]), prior, extra)


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path.name}: truncated while reading {what}")
        out = buf[pos : pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic not in MAGICS.values():
        raise CheckpointError(f"{path.name}: bad magic {magic!r}")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported version {version}")
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    if MAGICS.get(meta.get("arch")) != magic:
        raise CheckpointError(f"{path.name}: magic {magic!r} does not match architecture {meta.get('arch')!r}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "name length"))
        name = take(n, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape)
    return _bundle_from_meta(meta, tensors)
