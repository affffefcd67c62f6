"""Checkpoints: one tensor container file per parameter plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

from ..diffcore import ContractViolation, FormatError, load_tensor, save_tensor
from .model import Architecture, VaeModel, VarianceHead

MANIFEST = "manifest.json"


def save_checkpoint(model: VaeModel, path, config: dict | None = None, epoch: int | None = None,
                    extra: dict | None = None) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, t in model.named_parameters().items():
        save_tensor(root / "params" / f"{name}.glt", t.data)
        names.append(name)
    head = None
    if model.variance_head is not None:
        head = []
        for name, arr in model.variance_head.to_arrays().items():
            save_tensor(root / "params" / f"variance_head.{name}.glt", arr)
            head.append(name)
    manifest = {
        "architecture": model.arch.to_dict(),
        "seed": model.seed,
        "noise_scale": model.noise_scale,
        "epoch": epoch,
        "config": config or {},
        "parameters": names,
        "variance_head": head,
    }
    if extra:
        manifest.update(extra)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(path) -> tuple[VaeModel, dict]:
    root = Path(path)
    mf = root / MANIFEST
    if not mf.is_file():
        raise FormatError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    arch = Architecture.from_dict(manifest["architecture"])
    model = VaeModel(arch, seed=manifest["seed"], noise_scale=manifest.get("noise_scale", 1.0))
    params = model.named_parameters()
    if sorted(params) != sorted(manifest["parameters"]):
        raise ContractViolation("checkpoint parameter names do not match the architecture")
    for name, t in params.items():
        arr = load_tensor(root / "params" / f"{name}.glt")
        if arr.shape != t.shape:
            raise FormatError(f"parameter {name}: stored shape {arr.shape}, expected {t.shape}")
        t.data = arr
    if manifest.get("variance_head"):
        arrays = {n: load_tensor(root / "params" / f"variance_head.{n}.glt") for n in manifest["variance_head"]}
        model.variance_head = VarianceHead.from_arrays(arrays)
    return model, manifest
