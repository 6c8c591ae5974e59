"""Optimiser schedule, JSON-lines logging and numeric guards shared by the
training loops."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalError


def cosine_with_warmup(optimizer: torch.optim.Optimizer, warmup: int, total: int) -> torch.optim.lr_scheduler.LambdaLR:
    """Linear warmup over ``warmup`` steps, then cosine decay to zero at ``total``."""

    def factor(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        span = max(1, total - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - warmup) / span)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


class JsonlLogger:
    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def check_finite(value: torch.Tensor | float, what: str, step: int | None = None) -> None:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not np.isfinite(v):
        at = f" at step {step}" if step is not None else ""
        raise NumericalError(f"{what} became non-finite ({v}){at}; lower the learning rate or check the inputs")


def to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def flip_batch(x: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Apply per-sample flips: bit 0 horizontal, bit 1 vertical."""
    out = x.clone()
    for code in range(1, 4):
        mask = codes == code
        if mask.any():
            dims = [d for d, bit in ((-1, 1), (-2, 2)) if code & bit]
            out[mask] = torch.flip(x[mask], dims=dims)
    return out
