"""On-disk format for backbones and relevance modules.

A checkpoint is a directory holding ``meta.json`` (config, kind, tensor
manifest) and ``tensors.bin`` (little-endian float32, manifest order).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from .encoder import DAM_PREFIX, EncoderBackbone, EncoderConfig, backbone_shapes
from .numerics import ParamSet
from .rem import REM_PREFIX, AssembledModel, RemConfig, RemModule, insert_rem, rem_shapes

FORMAT_VERSION = 1
KINDS = ("dam", "rem", "full")
META_FILE = "meta.json"
BLOB_FILE = "tensors.bin"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


def _kind_of(module) -> str:
    if isinstance(module, RemModule):
        return "rem"
    if isinstance(module, EncoderBackbone):
        return "dam"
    if isinstance(module, AssembledModel):
        if module.rem is not None:
            raise CheckpointKindError("save the backbone and the relevance module as separate checkpoints")
        return "full"
    raise CheckpointKindError(f"cannot checkpoint a {type(module).__name__}")


def save_checkpoint(module, path: str | Path, seed: int | None = None, kind: str | None = None) -> Path:
    kind = kind or _kind_of(module)
    if kind not in KINDS:
        raise CheckpointKindError(f"unknown checkpoint kind {kind!r}")
    if isinstance(module, AssembledModel):
        module = module.backbone
    params: ParamSet = module.params
    prefix = REM_PREFIX if kind == "rem" else DAM_PREFIX
    stray = [n for n in params if not n.startswith(prefix)]
    if stray:
        raise CheckpointKindError(f"a {kind} checkpoint may only hold {prefix}* tensors, found {stray[:3]}")

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, offset = [], 0
    with open(path / BLOB_FILE, "wb") as fh:
        for name, tensor in params.items():
            raw = tensor.detach().contiguous().numpy().astype("<f4", copy=False).tobytes()
            fh.write(raw)
            manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": module.config.to_dict(),
        "seed": seed,
        "tensors": manifest,
    }
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_meta(path: str | Path) -> dict:
    path = Path(path)
    try:
        meta = json.loads((path / META_FILE).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint metadata at {path / META_FILE}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {meta.get('format_version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    if meta.get("kind") not in KINDS:
        raise CheckpointKindError(f"unknown checkpoint kind {meta.get('kind')!r}")
    return meta


def load_checkpoint(path: str | Path, expect_kind: str | None = None):
    """Returns an EncoderBackbone (``dam``), RemModule (``rem``) or AssembledModel (``full``)."""
    path = Path(path)
    meta = read_meta(path)
    kind = meta["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointKindError(f"{path} holds a {kind!r} checkpoint, not {expect_kind!r}")
    blob = (path / BLOB_FILE).read_bytes()
    manifest = meta["tensors"]
    expected = sum(e["nbytes"] for e in manifest)
    if expected != len(blob):
        raise CheckpointCorruptError(f"manifest accounts for {expected} bytes but the blob has {len(blob)}")

    if kind == "rem":
        config = RemConfig.from_dict(meta["config"])
        shapes = rem_shapes(config)
    else:
        config = EncoderConfig.from_dict(meta["config"])
        shapes = backbone_shapes(config)
    names = [e["name"] for e in manifest]
    if names != list(shapes):
        raise CheckpointConfigError("tensor manifest does not match the stored config")

    params = ParamSet()
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != shapes[entry["name"]] or entry["nbytes"] != 4 * math.prod(shape):
            raise CheckpointCorruptError(f"bad manifest entry for {entry['name']}")
        chunk = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        params.add(entry["name"], torch.from_numpy(array.copy()))
    if kind == "rem":
        return RemModule(config, params)
    backbone = EncoderBackbone(config, params)
    return AssembledModel(backbone) if kind == "full" else backbone


def assemble(dam_path: str | Path, rem_path: str | Path | None) -> AssembledModel:
    """Load a backbone and (optionally) a relevance module and insert one into the other."""
    meta = read_meta(dam_path)
    if meta["kind"] == "rem":
        raise CheckpointKindError(f"{dam_path} holds a relevance module, not a backbone")
    loaded = load_checkpoint(dam_path)
    backbone = loaded.backbone if isinstance(loaded, AssembledModel) else loaded
    if rem_path is None:
        return AssembledModel(backbone)
    rem = load_checkpoint(rem_path, expect_kind="rem")
    cfg = backbone.config
    if rem.config.num_layers != cfg.num_layers or rem.config.hidden_dim != cfg.hidden_dim:
        raise CheckpointConfigError(
            f"relevance module (L={rem.config.num_layers}, d={rem.config.hidden_dim}) does not fit "
            f"backbone (L={cfg.num_layers}, d={cfg.hidden_dim})"
        )
    return insert_rem(backbone, rem)
