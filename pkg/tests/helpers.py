"""Shared test utilities: manifest writers and the finite-difference oracle."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def write_manifest(path: Path, lines: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line))
            fh.write("\n")
    return path


def manifest_line(pid: str, grade: str = "II", t2w: str = "x.vol", **extra) -> dict:
    line = {"patient_id": pid, "institution": "inst", "grade": grade, "paths": {"t2w": t2w}}
    line.update(extra)
    return line


def snapshot_buffers(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: buf.detach().clone() for name, buf in module.named_buffers()}


def restore_buffers(module: torch.nn.Module, snapshot: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, buf in module.named_buffers():
            buf.copy_(snapshot[name])


def _central_difference(param: torch.Tensor, flat_index: int, pure_loss, step: float) -> float:
    with torch.no_grad():
        original = float(param.flatten()[flat_index])
        param.flatten()[flat_index] = original + step
        loss_plus = float(pure_loss())
        param.flatten()[flat_index] = original - step
        loss_minus = float(pure_loss())
        param.flatten()[flat_index] = original
    return (loss_plus - loss_minus) / (2.0 * step)


def finite_difference_check(
    model: torch.nn.Module,
    loss_fn,
    n_params: int,
    step: float,
    rng: np.random.Generator,
    params: list[tuple[str, torch.Tensor]] | None = None,
) -> list[float]:
    """Compare autograd gradients of loss_fn() against central finite differences.

    Batch-norm buffers are snapshotted and restored around every evaluation, so
    the loss is a pure function of the parameters. Sampled coordinates whose
    difference window is contaminated (the estimates at step and step/2
    disagree, i.e. a kink or extreme curvature lies inside the window, so the
    numeric value does not estimate the derivative at the point) are redrawn.
    Returns one relative error per accepted parameter.
    """
    snapshot = snapshot_buffers(model)

    def pure_loss() -> torch.Tensor:
        restore_buffers(model, snapshot)
        return loss_fn()

    model.zero_grad()
    loss = pure_loss()
    loss.backward()
    named = params or [(name, p) for name, p in model.named_parameters() if p.requires_grad]

    errors: list[float] = []
    for _ in range(20 * n_params):
        if len(errors) >= n_params:
            break
        name, param = named[rng.integers(len(named))]
        flat_index = int(rng.integers(param.numel()))
        analytic = float(param.grad.flatten()[flat_index])
        numeric = _central_difference(param, flat_index, pure_loss, step)
        numeric_half = _central_difference(param, flat_index, pure_loss, step / 2.0)
        scale = max(abs(numeric), abs(numeric_half), 1e-8)
        if abs(numeric - numeric_half) / scale > 1e-4:
            continue  # window contaminated; the FD value is not the derivative
        denom = max(abs(analytic), abs(numeric))
        errors.append(abs(analytic - numeric) / denom if denom > 1e-8 else 0.0)
    restore_buffers(model, snapshot)
    if len(errors) < n_params:
        raise AssertionError(f"only {len(errors)} stable finite-difference windows found")
    return errors
