import numpy as np
import pytest
import torch

from diffgrade.backbone import (
    Backbone,
    BackboneConfig,
    build_backbone,
    extract_features,
    load_weights,
    pretrain_backbone,
    save_weights,
)
from diffgrade.checkpoint import CheckpointError
from diffgrade.ingest import CategorizedGrade
from diffgrade.volumizer import StandardCube
from helpers import finite_difference_check

SMALL_CONFIG = BackboneConfig(
    block_counts=(1, 1, 1, 1), stage_channels=(4, 8, 16, 32), feature_dim=32, seed=11
)


def small_cubes(n, dims=(12, 12, 6), seed=0):
    rng = np.random.default_rng(seed)
    return [StandardCube(rng.uniform(size=dims), source_id=f"P{i:03d}") for i in range(n)]


def test_default_config_counts_34_layers():
    assert BackboneConfig().parameterized_layers == 34


def test_reduced_config_counts_10_layers():
    assert BackboneConfig(block_counts=(1, 1, 1, 1)).parameterized_layers == 10


def test_feature_dim_must_match_last_stage():
    with pytest.raises(ValueError):
        BackboneConfig(feature_dim=256).validate()


def test_init_deterministic_per_seed():
    a = build_backbone(SMALL_CONFIG)
    b = build_backbone(SMALL_CONFIG)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb)
    other = build_backbone(
        BackboneConfig(block_counts=(1, 1, 1, 1), stage_channels=(4, 8, 16, 32), feature_dim=32, seed=12)
    )
    assert not torch.equal(a.stem[0].weight, other.stem[0].weight)


def test_extract_zero_cube_repeatable():
    net = build_backbone(SMALL_CONFIG)
    cube = StandardCube(np.zeros((12, 12, 6)), source_id="zero")
    one = extract_features(net, [cube])[0]
    two = extract_features(net, [cube])[0]
    assert one.values.shape == (32,)
    assert np.all(np.isfinite(one.values))
    assert np.array_equal(one.values, two.values)


def test_extract_shape_contract_default_architecture():
    net = build_backbone(BackboneConfig(seed=3))
    feats = extract_features(net, small_cubes(2, dims=(24, 24, 12)))
    assert len(feats) == 2
    assert all(f.values.shape == (512,) for f in feats)
    assert all(np.all(np.isfinite(f.values)) for f in feats)
    assert feats[0].patient_id == "P000"


def test_extract_batching_independence():
    net = build_backbone(SMALL_CONFIG)
    cubes = small_cubes(5, seed=4)
    batched = extract_features(net, cubes, batch_size=4)
    singles = [extract_features(net, [c], batch_size=1)[0] for c in cubes]
    for b, s in zip(batched, singles):
        assert np.max(np.abs(b.values - s.values)) < 1e-5


def test_save_load_round_trip(tmp_path):
    net = build_backbone(SMALL_CONFIG)
    cube = small_cubes(1, seed=6)[0]
    before = extract_features(net, [cube])[0]
    path = tmp_path / "bb.ckpt"
    save_weights(net, path)
    restored = load_weights(path, SMALL_CONFIG)
    after = extract_features(restored, [cube])[0]
    assert np.array_equal(before.values, after.values)


def test_load_config_mismatch(tmp_path):
    net = build_backbone(SMALL_CONFIG)
    path = tmp_path / "bb.ckpt"
    save_weights(net, path)
    wrong = BackboneConfig(
        block_counts=(2, 1, 1, 1), stage_channels=(4, 8, 16, 32), feature_dim=32, seed=11
    )
    with pytest.raises(CheckpointError, match="config mismatch"):
        load_weights(path, wrong)


def test_load_truncated_checkpoint(tmp_path):
    net = build_backbone(SMALL_CONFIG)
    path = tmp_path / "bb.ckpt"
    save_weights(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(CheckpointError, match="checksum"):
        load_weights(path, SMALL_CONFIG)


def _toy_training_set(n=8, dims=(12, 12, 6), seed=2):
    rng = np.random.default_rng(seed)
    cubes, labels = [], []
    for i in range(n):
        data = rng.uniform(0.0, 0.4, size=dims)
        if i % 2 == 0:
            data[3:9, 3:9, 2:4] += 0.6  # bright block marks the positive class
            labels.append(CategorizedGrade.HIGH)
        else:
            labels.append(CategorizedGrade.LOW_INTERMEDIATE)
        cubes.append(StandardCube(np.clip(data, 0, 1), source_id=f"T{i:02d}"))
    return cubes, labels


def test_pretrain_loss_decreases():
    net = build_backbone(SMALL_CONFIG)
    cubes, labels = _toy_training_set()
    curve = pretrain_backbone(net, cubes, labels, epochs=10, learning_rate=1e-3, seed=5)
    assert len(curve) == 10
    assert curve[-1] < curve[0]


def test_pretrain_zero_epochs_is_noop():
    net = build_backbone(SMALL_CONFIG)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    cubes, labels = _toy_training_set(4)
    assert pretrain_backbone(net, cubes, labels, epochs=0) == []
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])


def test_pretrain_deterministic():
    cubes, labels = _toy_training_set(6)
    nets = []
    for _ in range(2):
        net = build_backbone(SMALL_CONFIG)
        pretrain_backbone(net, cubes, labels, epochs=2, learning_rate=1e-3, seed=9)
        nets.append(net)
    for a, b in zip(nets[0].state_dict().values(), nets[1].state_dict().values()):
        assert torch.equal(a, b)


def test_pretrain_single_class_rejected():
    net = build_backbone(SMALL_CONFIG)
    cubes, _ = _toy_training_set(4)
    with pytest.raises(ValueError, match="both classes"):
        pretrain_backbone(net, cubes, [CategorizedGrade.HIGH] * 4, epochs=1)


def backbone_gradient_errors(n_params=20, seed=1234):
    """Train-mode cross-entropy loss on the reduced backbone, float64."""
    config = BackboneConfig(block_counts=(1, 1, 1, 1), seed=17)
    net = build_backbone(config).double()
    gen = torch.Generator()
    gen.manual_seed(99)
    head = torch.nn.Linear(config.feature_dim, 2).double()
    with torch.no_grad():
        head.weight.normal_(0.0, (2.0 / config.feature_dim) ** 0.5, generator=gen)
        head.bias.zero_()
    x = torch.rand((2, 1, 16, 16, 8), generator=gen, dtype=torch.float64)
    targets = torch.tensor([0, 1])
    loss_fn = torch.nn.CrossEntropyLoss()
    net.train()

    wrapper = torch.nn.ModuleDict({"net": net, "head": head})
    rng = np.random.default_rng(seed)
    return finite_difference_check(
        wrapper,
        lambda: loss_fn(head(net(x)), targets),
        n_params=n_params,
        step=1e-3,
        rng=rng,
        params=[(n, p) for n, p in net.named_parameters() if p.requires_grad],
    )


def test_gradient_check_reduced_backbone():
    errors = backbone_gradient_errors()
    assert len(errors) >= 20
    assert max(errors) < 1e-3
