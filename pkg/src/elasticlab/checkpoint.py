"""Directory checkpoints: ``manifest.json`` plus one raw little-endian blob per tensor."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import LoraAdapter, TransformerParams, param_shapes
from .config import ElasticConfig, ModelConfig
from .numerics import Tensor

FORMAT = "elasticlab-checkpoint"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Manifest unreadable, inconsistent, or a blob of the wrong size."""


@dataclass
class Checkpoint:
    params: TransformerParams
    routers: dict[str, Tensor]
    elastic: Optional[ElasticConfig] = None


def _entries(params: TransformerParams, routers: dict[str, Tensor] | None):
    for name in sorted(params.tensors):
        yield f"backbone/{name}", params.tensors[name].data
    for name, t in sorted(params.lora_tensors().items()):
        yield f"lora/{name}", t.data
    for name in sorted(routers or {}):
        yield f"router/{name}", routers[name].data


def save_checkpoint(params: TransformerParams, routers: dict[str, Tensor] | None, path: str | Path,
                    elastic: ElasticConfig | None = None) -> Path:
    """Write atomically: everything goes to a sibling temp dir that is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        tensors = []
        for idx, (name, arr) in enumerate(_entries(params, routers)):
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fname = f"{idx:04d}.bin"
            blob = le.tobytes(order="C")
            (tmp / fname).write_bytes(blob)
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                            "file": fname, "byte_length": len(blob)})
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "frozen": params.frozen,
            "model_config": params.config.model_dump(mode="json"),
            "elastic_config": elastic.model_dump(mode="json") if elastic else None,
            "lora": [{"key": k, "target": a.target, "layer": a.layer, "rank": a.rank, "alpha": a.alpha}
                     for k, a in sorted(params.lora.items())],
            "tensors": tensors,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if path.exists():
            old = path.with_name(path.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"cannot read manifest in {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointFormatError(f"{path} is not an {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {manifest.get('version')}")
    for key in ("tensors", "model_config", "lora"):
        if key not in manifest:
            raise CheckpointFormatError(f"manifest missing {key!r}")
    return manifest


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read every blob and validate it before building anything."""
    path = Path(path)
    manifest = _read_manifest(path)
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        try:
            name, shape, dtype = entry["name"], tuple(entry["shape"]), np.dtype(entry["dtype"])
            blob_path, nbytes = path / entry["file"], int(entry["byte_length"])
        except (KeyError, TypeError) as exc:
            raise CheckpointFormatError(f"malformed tensor entry {entry!r}") from exc
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != nbytes:
            raise CheckpointFormatError(f"{name}: byte_length {nbytes} != shape {shape} x {dtype}")
        try:
            blob = blob_path.read_bytes()
        except OSError as exc:
            raise CheckpointFormatError(f"{name}: missing blob {entry['file']}") from exc
        if len(blob) != nbytes:
            raise CheckpointFormatError(f"{name}: blob has {len(blob)} bytes, manifest says {nbytes}")
        arrays[name] = np.frombuffer(blob, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    try:
        cfg = ModelConfig(**manifest["model_config"])
        elastic = ElasticConfig(**manifest["elastic_config"]) if manifest.get("elastic_config") else None
    except Exception as exc:
        raise CheckpointFormatError(f"bad config in manifest: {exc}") from exc
    frozen = bool(manifest.get("frozen", False))

    backbone = {k[len("backbone/"):]: v for k, v in arrays.items() if k.startswith("backbone/")}
    expected_shapes = param_shapes(cfg)
    if {k: v.shape for k, v in backbone.items()} != expected_shapes:
        raise CheckpointFormatError("backbone tensors do not match the model config")
    tensors = {k: Tensor(backbone[k].copy(), requires_grad=not frozen, name=k) for k in expected_shapes}

    lora = {}
    for spec in manifest["lora"]:
        key = spec["key"]
        try:
            down, up = arrays[f"lora/{key}.A"], arrays[f"lora/{key}.B"]
        except KeyError as exc:
            raise CheckpointFormatError(f"adapter {key} missing a tensor") from exc
        lora[key] = LoraAdapter(spec["target"], int(spec["layer"]), int(spec["rank"]), float(spec["alpha"]),
                                Tensor(down.copy(), requires_grad=True, name=key + ".A"),
                                Tensor(up.copy(), requires_grad=True, name=key + ".B"))
    routers = {k[len("router/"):]: Tensor(v.copy(), requires_grad=True, name=k[len("router/"):])
               for k, v in arrays.items() if k.startswith("router/")}
    return Checkpoint(TransformerParams(cfg, tensors, frozen, lora), routers, elastic)
