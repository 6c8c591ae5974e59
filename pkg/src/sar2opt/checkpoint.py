"""Checkpoints: a safetensors parameter file plus a JSON manifest.

The manifest records the producing config, the step count and the sha256 of
the parameter file; loading refuses files whose checksum does not match.
"""

from __future__ import annotations

from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from . import io
from .errors import UpstreamArtifactError


def save_checkpoint(stem: str | Path, tensors: dict[str, torch.Tensor], manifest: dict) -> dict:
    stem = Path(stem)
    payload = st_save({k: v.detach().contiguous().cpu() for k, v in tensors.items()})
    io.atomic_write_bytes(stem.with_suffix(".safetensors"), payload)
    manifest = dict(manifest, checksum=io.sha256_bytes(payload), params_file=stem.with_suffix(".safetensors").name)
    io.write_json(stem.with_suffix(".json"), manifest)
    return manifest


def load_manifest(stem: str | Path) -> dict:
    path = Path(stem).with_suffix(".json")
    if not path.exists():
        raise UpstreamArtifactError(f"checkpoint manifest {path} not found")
    return io.read_json(path)


def load_checkpoint(stem: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    stem = Path(stem)
    manifest = load_manifest(stem)
    params = stem.with_suffix(".safetensors")
    if not params.exists():
        raise UpstreamArtifactError(f"checkpoint parameters {params} not found")
    data = params.read_bytes()
    if io.sha256_bytes(data) != manifest.get("checksum"):
        raise UpstreamArtifactError(f"checkpoint {params} fails its checksum; re-run the stage that produced it")
    return st_load(data), manifest


def checkpoint_id(stem: str | Path) -> str:
    return load_manifest(stem)["checksum"][:16]
