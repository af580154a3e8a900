"""Fully-connected grade predictor over deep radiomic feature vectors.

Training runs in torch (float64, full batch, Adam) with seeded init and
dropout; inference is a pure numpy forward, so predict_proba is a
deterministic function of (parameters, input). Positive class = High.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .backbone import FeatureVector
from .checkpoint import load_checkpoint, save_checkpoint
from .ingest import CategorizedGrade


class ClassWeighting(Enum):
    NONE = "None"
    INVERSE_FREQUENCY = "InverseFrequency"


@dataclass
class HeadConfig:
    layer_dims: tuple[int, ...] = (512, 128, 1)
    dropout_rate: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 100
    class_weighting: ClassWeighting = ClassWeighting.INVERSE_FREQUENCY
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> "HeadConfig":
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"layer_dims must be >= 2 positive ints, got {self.layer_dims}")
        if self.layer_dims[-1] != 1:
            raise ValueError("last layer dim must be 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self

    def as_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "dropout_rate": self.dropout_rate,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "class_weighting": self.class_weighting.value,
            "threshold": self.threshold,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "HeadConfig":
        return HeadConfig(
            layer_dims=tuple(d["layer_dims"]),
            dropout_rate=d["dropout_rate"],
            learning_rate=d["learning_rate"],
            epochs=d["epochs"],
            class_weighting=ClassWeighting(d["class_weighting"]),
            threshold=d["threshold"],
            seed=d["seed"],
        )


@dataclass
class TrainedHead:
    parameters: dict[str, np.ndarray]  # layer{i}.weight / layer{i}.bias, float64
    config: HeadConfig
    training_loss_curve: list[float] = field(default_factory=list)


def class_weights(labels: list[CategorizedGrade]) -> dict[CategorizedGrade, float]:
    """Inverse-frequency weights N / (2 * N_class); requires both classes."""
    n = len(labels)
    counts = {c: labels.count(c) for c in CategorizedGrade}
    if any(v == 0 for v in counts.values()):
        raise ValueError("inverse-frequency weighting needs both classes present")
    return {c: n / (2.0 * counts[c]) for c in CategorizedGrade}


def _feature_matrix(features: list[FeatureVector]) -> np.ndarray:
    return np.stack([np.asarray(f.values, dtype=np.float64) for f in features])


def _targets(labels: list[CategorizedGrade]) -> np.ndarray:
    return np.array([1.0 if lab is CategorizedGrade.HIGH else 0.0 for lab in labels])


def sample_weights(labels: list[CategorizedGrade], weighting: ClassWeighting) -> np.ndarray:
    if weighting is ClassWeighting.NONE:
        return np.ones(len(labels))
    per_class = class_weights(labels)
    return np.array([per_class[lab] for lab in labels])


def train_head(
    features: list[FeatureVector],
    labels: list[CategorizedGrade],
    config: HeadConfig | None = None,
) -> TrainedHead:
    """Minimize weighted binary cross-entropy with full-batch Adam."""
    if config is None:
        config = HeadConfig()
    config.validate()
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} features but {len(labels)} labels")
    if len(features) < 2:
        raise ValueError("need >= 2 training points")
    X_np = _feature_matrix(features)
    if X_np.shape[1] != config.layer_dims[0]:
        raise ValueError(
            f"feature dim {X_np.shape[1]} does not match head input dim {config.layer_dims[0]}"
        )
    weights = sample_weights(labels, config.class_weighting)

    gen = torch.Generator()
    gen.manual_seed(config.seed % (2**64))
    params: list[torch.Tensor] = []
    for d_in, d_out in zip(config.layer_dims, config.layer_dims[1:]):
        w = torch.empty(d_out, d_in, dtype=torch.float64)
        w.normal_(0.0, (2.0 / d_in) ** 0.5, generator=gen)
        b = torch.zeros(d_out, dtype=torch.float64)
        w.requires_grad_(True)
        b.requires_grad_(True)
        params.extend([w, b])

    X = torch.from_numpy(X_np)
    y = torch.from_numpy(_targets(labels))
    w_sample = torch.from_numpy(weights)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    n_linear = len(config.layer_dims) - 1

    def forward_train(x: torch.Tensor) -> torch.Tensor:
        h = x
        for i in range(n_linear - 1):
            h = torch.relu(h @ params[2 * i].T + params[2 * i + 1])
            if config.dropout_rate > 0.0:
                keep = (
                    torch.rand(h.shape, generator=gen, dtype=h.dtype) >= config.dropout_rate
                ).to(h.dtype)
                h = h * keep / (1.0 - config.dropout_rate)
        return (h @ params[-2].T + params[-1]).squeeze(-1)

    curve: list[float] = []
    for _ in range(config.epochs):
        optimizer.zero_grad()
        logits = forward_train(X)
        loss = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, y, weight=w_sample, reduction="mean"
        )
        loss.backward()
        optimizer.step()
        curve.append(float(loss.detach()))

    parameters = {}
    for i in range(n_linear):
        parameters[f"layer{i}.weight"] = params[2 * i].detach().numpy().copy()
        parameters[f"layer{i}.bias"] = params[2 * i + 1].detach().numpy().copy()
    return TrainedHead(parameters=parameters, config=config, training_loss_curve=curve)


def _n_linear(parameters: dict[str, np.ndarray]) -> int:
    return sum(1 for name in parameters if name.endswith(".weight"))


def _forward_logits(parameters: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    """Inference forward (dropout off); X is (n, d)."""
    h = X
    n_linear = _n_linear(parameters)
    for i in range(n_linear - 1):
        h = np.maximum(h @ parameters[f"layer{i}.weight"].T + parameters[f"layer{i}.bias"], 0.0)
    last = n_linear - 1
    return (h @ parameters[f"layer{last}.weight"].T + parameters[f"layer{last}.bias"]).squeeze(-1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_proba(head: TrainedHead, feature: FeatureVector | np.ndarray) -> float:
    values = feature.values if isinstance(feature, FeatureVector) else feature
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (head.config.layer_dims[0],):
        raise ValueError(
            f"feature length {values.shape} does not match head input dim "
            f"{head.config.layer_dims[0]}"
        )
    logit = _forward_logits(head.parameters, values[None, :])[0]
    return float(_sigmoid(np.array([logit]))[0])


def predict_grade(head: TrainedHead, feature: FeatureVector | np.ndarray) -> CategorizedGrade:
    """High iff probability >= threshold (ties go to High)."""
    p = predict_proba(head, feature)
    return CategorizedGrade.HIGH if p >= head.config.threshold else CategorizedGrade.LOW_INTERMEDIATE


def training_loss(
    parameters: dict[str, np.ndarray],
    X: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
) -> float:
    """Weighted BCE evaluated in numpy (dropout off); the finite-difference
    oracle in the tests differentiates this function numerically."""
    z = _forward_logits(parameters, X)
    # stable: max(z,0) - z*y + log(1 + exp(-|z|))
    per_sample = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(weights * per_sample))


def training_loss_gradients(
    parameters: dict[str, np.ndarray],
    X: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
) -> dict[str, np.ndarray]:
    """Analytic gradients of training_loss via autograd (dropout off)."""
    tensors = {
        name: torch.from_numpy(np.ascontiguousarray(arr)).requires_grad_(True)
        for name, arr in parameters.items()
    }
    h = torch.from_numpy(np.asarray(X, dtype=np.float64))
    n_linear = _n_linear(parameters)
    for i in range(n_linear - 1):
        h = torch.relu(h @ tensors[f"layer{i}.weight"].T + tensors[f"layer{i}.bias"])
    last = n_linear - 1
    logits = (h @ tensors[f"layer{last}.weight"].T + tensors[f"layer{last}.bias"]).squeeze(-1)
    loss = torch.nn.functional.binary_cross_entropy_with_logits(
        logits,
        torch.from_numpy(np.asarray(targets, dtype=np.float64)),
        weight=torch.from_numpy(np.asarray(weights, dtype=np.float64)),
        reduction="mean",
    )
    loss.backward()
    return {name: t.grad.numpy().copy() for name, t in tensors.items()}


def save_head(path: str | Path, head: TrainedHead) -> str:
    tensors = dict(head.parameters)
    tensors["training_loss_curve"] = np.asarray(head.training_loss_curve, dtype=np.float64)
    return save_checkpoint(path, "head", head.config.as_dict(), tensors)


def load_head(path: str | Path) -> TrainedHead:
    config_dict, tensors = load_checkpoint(path, "head")
    curve = tensors.pop("training_loss_curve", np.zeros(0)).tolist()
    return TrainedHead(
        parameters=tensors, config=HeadConfig.from_dict(config_dict), training_loss_curve=curve
    )


def derive_fold_config(config: HeadConfig, run_seed: int, fold_index: int) -> HeadConfig:
    """Per-fold head config: seed = run seed XOR fold index."""
    return replace(config, seed=(run_seed ^ fold_index) % (2**64))
