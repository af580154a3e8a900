"""Volumetric residual feature extractor.

The default configuration is the 34-layer residual layout extended to 3D:
one stem conv, sixteen basic blocks of two 3x3x3 convs, and a final
fully-connected projection (1 + 2*16 + 1 = 34 parameterized layers; shortcut
projections and norms are uncounted). Depth-axis strides are reduced in the
stem because input cubes carry only 25 slices.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ingest import CategorizedGrade
from .volumizer import StandardCube

_CLASS_INDEX = {CategorizedGrade.LOW_INTERMEDIATE: 0, CategorizedGrade.HIGH: 1}


@dataclass
class BackboneConfig:
    block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    input_channels: int = 1
    feature_dim: int = 512
    seed: int = 0

    def validate(self) -> "BackboneConfig":
        if len(self.block_counts) != 4 or any(n < 1 for n in self.block_counts):
            raise ValueError(f"block_counts must be 4 positive ints, got {self.block_counts}")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.feature_dim != self.stage_channels[-1]:
            raise ValueError(
                f"feature_dim ({self.feature_dim}) must equal the last stage width "
                f"({self.stage_channels[-1]})"
            )
        return self

    @property
    def parameterized_layers(self) -> int:
        # stem conv + 2 convs per basic block + final projection
        return 1 + 2 * sum(self.block_counts) + 1

    def structural_dict(self) -> dict:
        d = asdict(self)
        d.pop("seed")
        d["block_counts"] = list(self.block_counts)
        d["stage_channels"] = list(self.stage_channels)
        return d


@dataclass
class FeatureVector:
    values: np.ndarray
    patient_id: str

    def validate(self) -> "FeatureVector":
        if self.values.ndim != 1:
            raise ValueError("feature vector must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector contains non-finite values")
        return self


class BasicBlock3D(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: tuple[int, int, int]):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != (1, 1, 1) or in_channels != out_channels:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        out = out + self.shortcut(x)
        return self.relu(out)


class Backbone(nn.Module):
    """3D residual network mapping (B, 1, W, H, D) to (B, feature_dim)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        channels = config.stage_channels
        self.stem = nn.Sequential(
            nn.Conv3d(
                config.input_channels,
                channels[0],
                kernel_size=(7, 7, 3),
                stride=(2, 2, 1),
                padding=(3, 3, 1),
                bias=False,
            ),
            nn.BatchNorm3d(channels[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(kernel_size=3, stride=(2, 2, 1), padding=1),
        )
        stages = []
        in_ch = channels[0]
        for stage_idx, (out_ch, n_blocks) in enumerate(zip(channels, config.block_counts)):
            stride = (1, 1, 1) if stage_idx == 0 else (2, 2, 2)
            blocks = [BasicBlock3D(in_ch, out_ch, stride)]
            blocks += [BasicBlock3D(out_ch, out_ch, (1, 1, 1)) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.projection = nn.Linear(channels[-1], config.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.stages(x)
        x = self.pool(x).flatten(1)
        return self.projection(x)


def _he_init(module: nn.Module, generator: torch.Generator) -> None:
    # Deterministic He fan-in normal, walked in module definition order.
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv3d, nn.Linear)):
                weight = m.weight
                if isinstance(m, nn.Conv3d):
                    fan_in = m.in_channels // m.groups * int(np.prod(m.kernel_size))
                else:
                    fan_in = m.in_features
                weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm3d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


def _seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed % (2**64))
    return gen


def build_backbone(config: BackboneConfig | None = None) -> Backbone:
    if config is None:
        config = BackboneConfig()
    net = Backbone(config)
    _he_init(net, _seeded_generator(config.seed))
    net.eval()
    return net


def _cube_tensor(cube: StandardCube, dtype: torch.dtype) -> torch.Tensor:
    data = cube.data
    if data.ndim != 3:
        raise ValueError(f"cube {cube.source_id!r} is not 3-D: shape {data.shape}")
    return torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32)).to(dtype)


def extract_features(
    net: Backbone, cubes: list[StandardCube], batch_size: int = 4
) -> list[FeatureVector]:
    """Evaluation-mode forward per cube; output independent of batch partitioning."""
    net.eval()
    results: list[FeatureVector] = []
    with torch.no_grad():
        for start in range(0, len(cubes), batch_size):
            chunk = cubes[start : start + batch_size]
            batch = torch.stack([_cube_tensor(c, torch.float32) for c in chunk]).unsqueeze(1)
            out = net(batch).cpu().numpy()
            for cube, row in zip(chunk, out):
                results.append(FeatureVector(values=row.copy(), patient_id=cube.source_id).validate())
    return results


def pretrain_backbone(
    net: Backbone,
    cubes: list[StandardCube],
    labels: list[CategorizedGrade],
    epochs: int,
    learning_rate: float = 1e-4,
    batch_size: int = 4,
    seed: int = 0,
) -> list[float]:
    """Supervised warm-up with a temporary 2-class head; returns the loss curve.

    The head is discarded afterwards; the backbone is trained in place.
    Deterministic for a fixed seed (init, shuffling, and batching all flow
    from one generator).
    """
    if len(cubes) != len(labels):
        raise ValueError(f"{len(cubes)} cubes but {len(labels)} labels")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return []
    if len(set(labels)) < 2:
        raise ValueError("pretraining needs both classes present")

    gen = _seeded_generator(seed)
    head = nn.Linear(net.config.feature_dim, 2)
    with torch.no_grad():
        head.weight.normal_(0.0, (2.0 / net.config.feature_dim) ** 0.5, generator=gen)
        head.bias.zero_()

    targets = torch.tensor([_CLASS_INDEX[lab] for lab in labels], dtype=torch.long)
    tensors = [_cube_tensor(c, torch.float32) for c in cubes]
    optimizer = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=learning_rate)
    loss_fn = nn.CrossEntropyLoss()

    net.train()
    curve: list[float] = []
    for _ in range(epochs):
        order = torch.randperm(len(tensors), generator=gen)
        epoch_loss = 0.0
        for start in range(0, len(tensors), batch_size):
            idx = order[start : start + batch_size]
            batch = torch.stack([tensors[i] for i in idx]).unsqueeze(1)
            optimizer.zero_grad()
            loss = loss_fn(head(net(batch)), targets[idx])
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
        curve.append(epoch_loss / len(tensors))
    net.eval()
    return curve


def save_weights(net: Backbone, path: str | Path) -> str:
    """Persist all parameters and buffers; returns the checkpoint digest."""
    tensors = {name: value.detach().cpu().numpy() for name, value in net.state_dict().items()}
    config = net.config.structural_dict()
    config["seed"] = net.config.seed
    return save_checkpoint(path, "backbone", config, tensors)


def load_weights(path: str | Path, config: BackboneConfig | None = None) -> Backbone:
    """Rebuild a backbone from a checkpoint; structural config must match."""
    stored_config, tensors = load_checkpoint(path, "backbone")
    stored = BackboneConfig(
        block_counts=tuple(stored_config["block_counts"]),
        stage_channels=tuple(stored_config["stage_channels"]),
        input_channels=stored_config["input_channels"],
        feature_dim=stored_config["feature_dim"],
        seed=stored_config.get("seed", 0),
    )
    if config is not None and config.structural_dict() != stored.structural_dict():
        raise CheckpointError(
            f"{path}: config mismatch (stored {stored.structural_dict()}, "
            f"requested {config.structural_dict()})"
        )
    net = Backbone(stored)
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in tensors.items()}
    net.load_state_dict(state)
    net.eval()
    return net
