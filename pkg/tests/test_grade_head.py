import numpy as np
import pytest

from diffgrade.backbone import FeatureVector
from diffgrade.grade_head import (
    ClassWeighting,
    HeadConfig,
    TrainedHead,
    class_weights,
    load_head,
    predict_grade,
    predict_proba,
    sample_weights,
    save_head,
    train_head,
    training_loss,
    training_loss_gradients,
)
from diffgrade.ingest import CategorizedGrade

LOW = CategorizedGrade.LOW_INTERMEDIATE
HIGH = CategorizedGrade.HIGH


def gaussian_blobs(n_per_class=50, dim=16, separation=10.0, seed=0):
    """Two unit-variance blobs separated by `separation` sigma along a random axis."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    features, labels = [], []
    for i in range(2 * n_per_class):
        label = HIGH if i % 2 == 0 else LOW
        center = direction * (separation / 2.0 if label is HIGH else -separation / 2.0)
        values = center + rng.normal(size=dim)
        features.append(FeatureVector(values=values.astype(np.float64), patient_id=f"P{i:03d}"))
        labels.append(label)
    return features, labels, direction


def small_config(dim=16, **kw):
    defaults = dict(layer_dims=(dim, 8, 1), epochs=100, seed=3)
    defaults.update(kw)
    return HeadConfig(**defaults)


def test_class_weights_cohort_arithmetic():
    labels = [LOW] * 77 + [HIGH] * 175
    weights = class_weights(labels)
    assert weights[LOW] == pytest.approx(252 / (2 * 77))  # ~1.636
    assert weights[HIGH] == pytest.approx(252 / (2 * 175))  # 0.72
    # w_pos*N_pos + w_neg*N_neg = N
    assert weights[HIGH] * 175 + weights[LOW] * 77 == pytest.approx(252.0)


def test_class_weights_property_random_cohorts():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n_low, n_high = rng.integers(1, 200, size=2)
        labels = [LOW] * int(n_low) + [HIGH] * int(n_high)
        weights = class_weights(labels)
        total = weights[HIGH] * n_high + weights[LOW] * n_low
        assert total == pytest.approx(len(labels))


def test_separable_blobs_reach_perfect_training_accuracy():
    features, labels, direction = gaussian_blobs()
    # independent separability check: projection onto the class axis
    projections = np.array([f.values @ direction for f in features])
    is_high = np.array([lab is HIGH for lab in labels])
    assert projections[is_high].min() > projections[~is_high].max()

    head = train_head(features, labels, small_config())
    predictions = [predict_grade(head, f) for f in features]
    assert predictions == labels


def test_degenerate_all_high_fit():
    rng = np.random.default_rng(7)
    features = [
        FeatureVector(values=rng.normal(size=8), patient_id=f"P{i}") for i in range(12)
    ]
    labels = [HIGH] * 12
    head = train_head(
        features, labels, small_config(dim=8, class_weighting=ClassWeighting.NONE)
    )
    assert all(predict_proba(head, f) > 0.5 for f in features)


def test_single_class_rejected_under_inverse_frequency():
    rng = np.random.default_rng(8)
    features = [FeatureVector(values=rng.normal(size=8), patient_id=f"P{i}") for i in range(4)]
    with pytest.raises(ValueError, match="both classes"):
        train_head(features, [HIGH] * 4, small_config(dim=8))


def test_length_mismatch_rejected():
    rng = np.random.default_rng(9)
    features = [FeatureVector(values=rng.normal(size=8), patient_id=f"P{i}") for i in range(4)]
    with pytest.raises(ValueError, match="labels"):
        train_head(features, [HIGH, LOW], small_config(dim=8))


def test_loss_curve_length_and_decrease():
    features, labels, _ = gaussian_blobs(n_per_class=20, dim=8, separation=4.0, seed=5)
    head = train_head(features, labels, small_config(dim=8, epochs=60))
    assert len(head.training_loss_curve) == 60
    assert head.training_loss_curve[-1] <= head.training_loss_curve[0]


def test_training_deterministic():
    features, labels, _ = gaussian_blobs(n_per_class=10, dim=8, seed=6)
    a = train_head(features, labels, small_config(dim=8, epochs=30))
    b = train_head(features, labels, small_config(dim=8, epochs=30))
    for name in a.parameters:
        assert np.array_equal(a.parameters[name], b.parameters[name])


def zero_head(dim=8):
    params = {
        "layer0.weight": np.zeros((4, dim)),
        "layer0.bias": np.zeros(4),
        "layer1.weight": np.zeros((1, 4)),
        "layer1.bias": np.zeros(1),
    }
    return TrainedHead(parameters=params, config=HeadConfig(layer_dims=(dim, 4, 1)))


def test_zero_parameters_give_half_probability():
    head = zero_head()
    assert predict_proba(head, np.zeros(8)) == 0.5


def test_predict_proba_deterministic_and_bounded():
    features, labels, _ = gaussian_blobs(n_per_class=10, dim=8, seed=10)
    head = train_head(features, labels, small_config(dim=8, epochs=20))
    for f in features:
        p1 = predict_proba(head, f)
        p2 = predict_proba(head, f)
        assert p1 == p2
        assert 0.0 <= p1 <= 1.0


def test_predict_grade_threshold_rules():
    head = zero_head()
    # proba exactly 0.5 at threshold 0.5: tie goes to High
    assert predict_grade(head, np.zeros(8)) is HIGH
    biased = zero_head()
    biased.parameters["layer1.bias"] = np.array([2.0])
    assert predict_proba(biased, np.zeros(8)) > 0.5
    assert predict_grade(biased, np.zeros(8)) is HIGH
    negative = zero_head()
    negative.parameters["layer1.bias"] = np.array([-2.0])
    assert predict_grade(negative, np.zeros(8)) is LOW


def test_dimension_mismatch_rejected():
    head = zero_head(dim=8)
    with pytest.raises(ValueError):
        predict_proba(head, np.zeros(9))


def test_gradient_check_two_layer_head():
    # analytic side: torch autograd; oracle side: central differences of the
    # independent numpy loss implementation
    rng = np.random.default_rng(12)
    dim, hidden, n = 8, 4, 6
    parameters = {
        "layer0.weight": rng.normal(size=(hidden, dim)) * 0.5,
        "layer0.bias": rng.normal(size=hidden) * 0.1,
        "layer1.weight": rng.normal(size=(1, hidden)) * 0.5,
        "layer1.bias": rng.normal(size=1) * 0.1,
    }
    X = rng.normal(size=(n, dim))
    targets = (np.arange(n) % 2).astype(np.float64)
    weights = sample_weights(
        [HIGH if t else LOW for t in targets], ClassWeighting.INVERSE_FREQUENCY
    )
    grads = training_loss_gradients(parameters, X, targets, weights)

    step = 1e-3
    checked = 0
    for name, array in parameters.items():
        for flat_index in range(array.size):
            original = array.flat[flat_index]
            array.flat[flat_index] = original + step
            plus = training_loss(parameters, X, targets, weights)
            array.flat[flat_index] = original - step
            minus = training_loss(parameters, X, targets, weights)
            array.flat[flat_index] = original
            numeric = (plus - minus) / (2 * step)
            analytic = grads[name].flat[flat_index]
            denom = max(abs(analytic), abs(numeric), 1e-10)
            assert abs(analytic - numeric) / denom < 1e-4, (name, flat_index)
            checked += 1
    assert checked >= 20


def test_head_save_load_round_trip(tmp_path):
    features, labels, _ = gaussian_blobs(n_per_class=8, dim=8, seed=13)
    head = train_head(features, labels, small_config(dim=8, epochs=15))
    path = tmp_path / "head.ckpt"
    save_head(path, head)
    loaded = load_head(path)
    assert loaded.config == head.config
    assert loaded.training_loss_curve == pytest.approx(head.training_loss_curve)
    for f in features:
        assert predict_proba(loaded, f) == predict_proba(head, f)
