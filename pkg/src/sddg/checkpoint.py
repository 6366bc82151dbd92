"""Checkpoints: a JSON manifest plus one raw little-endian float32 blob.

Manifest entries give each tensor's name, group (F/D/C parameters,
``buffer`` or ``optim``), shape, original dtype and byte offset; the offsets
tile the blob exactly.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .model import PREFIX, SDDGNet

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"


def _entries(net: SDDGNet, optimizer: Optional[torch.optim.Optimizer]) -> list[tuple[str, str, torch.Tensor]]:
    out = [(g, n, t) for g, n, t in net.partition().items()]
    out += [("buffer", n, b) for n, b in net.named_buffers()]
    if optimizer is not None:
        for idx, state in optimizer.state_dict()["state"].items():
            for key, val in state.items():
                if torch.is_tensor(val):
                    out.append(("optim", f"{idx}.{key}", val))
    return out


def save_checkpoint(path: Union[str, Path], net: SDDGNet, step: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    config_hash: str = "", arch_hash: str = "", extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for group, name, t in _entries(net, optimizer):
        data = t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        tensors.append({"name": name, "group": group, "shape": list(t.shape),
                        "dtype": str(t.dtype).replace("torch.", ""), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "rng_state": {"next_step": step},
        "config_hash": config_hash,
        "arch_hash": arch_hash,
        "blob": BLOB,
        "blob_bytes": offset,
        "tensors": tensors,
        **(extra or {}),
    }
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def read_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, tuple[str, torch.Tensor]]]:
    """Manifest and ``{name: (group, tensor)}``; tensors restored to their recorded dtype."""
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    blob = (path / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError("checkpoint blob size does not match manifest")
    out, expect = {}, 0
    for e in manifest["tensors"]:
        if e["offset"] != expect:
            raise ValueError(f"manifest offsets do not tile the blob at {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
        key = e["name"] if e["group"] != "optim" else "optim." + e["name"]
        out[key] = (e["group"], t)
        expect += e["nbytes"]
    if expect != len(blob):
        raise ValueError("manifest offsets do not cover the blob")
    return manifest, out


def load_checkpoint(path: Union[str, Path], net: SDDGNet,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    """Restore parameters, buffers and optimizer state in place; returns the manifest."""
    manifest, tensors = read_checkpoint(path)
    own = dict(net.named_parameters())
    own.update(dict(net.named_buffers()))
    model_keys = {k for k, (g, _) in tensors.items() if g != "optim"}
    if model_keys != set(own):
        missing, unexpected = set(own) - model_keys, model_keys - set(own)
        raise ValueError(f"checkpoint does not match model (missing {sorted(missing)[:3]}, "
                         f"unexpected {sorted(unexpected)[:3]})")
    bad = sorted(k for k in model_keys if own[k].shape != tensors[k][1].shape)
    if bad:
        raise ValueError(f"checkpoint shapes do not match model for {bad[:3]}")
    with torch.no_grad():
        for k in model_keys:
            own[k].copy_(tensors[k][1])
    if optimizer is not None:
        state: dict[int, dict] = {}
        for k, (g, t) in tensors.items():
            if g == "optim":
                idx, key = k[len("optim."):].split(".", 1)
                state.setdefault(int(idx), {})[key] = t
        sd = optimizer.state_dict()
        optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
    return manifest


def load_pretrained_features(net: SDDGNet, path: Union[str, Path], gray_adapt: str = "average") -> int:
    """Copy extractor tensors from a checkpoint whose names and shapes match.

    A 3-channel stem kernel is fitted to the model's input channels by
    averaging over colour channels (``average``) or left at its fresh
    initialisation (``reinit``). Returns the number of tensors loaded.
    """
    _, tensors = read_checkpoint(path)
    own = dict(net.named_parameters())
    own.update(dict(net.named_buffers()))
    loaded = 0
    with torch.no_grad():
        for name, (group, t) in tensors.items():
            if not name.startswith(PREFIX["F"]) or name not in own:
                continue
            target = own[name]
            if t.shape != target.shape:
                if t.dim() == 4 and t.shape[1] == 3 and t.shape[0] == target.shape[0] and gray_adapt == "average":
                    t = t.mean(1, keepdim=True).expand_as(target)
                else:
                    continue
            target.copy_(t)
            loaded += 1
    return loaded
