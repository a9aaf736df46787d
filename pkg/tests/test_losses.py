import numpy as np
import pytest
import torch

from slabscan.errors import ConfigError
from slabscan.losses import (LossConfig, attention_loss, binary_cross_entropy,
                             categorical_cross_entropy, continuous_dice,
                             total_loss)


def cdc_oracle(attention, mask, eps):
    """Definitional continuous-dice oracle computed with plain floats."""
    a = np.asarray(attention, dtype=float)
    m = (np.asarray(mask) > 0).astype(float)
    overlap = float((a * m).sum())
    support = float((m * (a > 0)).sum())
    c = overlap / support if support > 0 else 1.0
    num = 2.0 * overlap + eps
    den = c * m.sum() + a.sum() + eps
    if den == 0:
        return 1.0
    return num / den


def random_pair(rng, soft=True):
    u, v = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    if soft:
        a = np.maximum(rng.standard_normal((u, v)), 0.0)
        if rng.random() < 0.5 and a.max() > 0:
            a = a / a.max()
    else:
        a = rng.integers(0, 2, size=(u, v)).astype(float)
    m = rng.integers(0, 2, size=(u, v))
    if rng.random() < 0.15:
        m = np.zeros((u, v), dtype=int)
    if rng.random() < 0.1:
        a = np.zeros((u, v))
    return a, m


# ------------------------------------------------------- continuous dice


def test_cdc_matches_definitional_oracle(rng):
    for _ in range(100):
        a, m = random_pair(rng)
        eps = float(rng.choice([0.0, 0.5, 1.0]))
        got = float(continuous_dice(a, m, eps))
        assert got == pytest.approx(cdc_oracle(a, m, eps), abs=1e-9)


def test_cdc_equals_classical_dice_on_binary(rng):
    for _ in range(50):
        a, m = random_pair(rng, soft=False)
        inter = float((a * (m > 0)).sum())
        denom = float(a.sum() + (m > 0).sum())
        expected = 1.0 if denom == 0 else 2.0 * inter / denom
        assert float(continuous_dice(a, m, 0.0)) == pytest.approx(
            expected, abs=1e-12)


def test_cdc_perfect_match_is_one():
    m = np.zeros((4, 4), dtype=int)
    m[1:3, 1:3] = 1
    assert float(continuous_dice(m.astype(float), m, 0.0)) == 1.0
    assert float(attention_loss(m.astype(float), m, 0.0)) == 0.0


def test_cdc_both_empty_convention():
    zero = np.zeros((3, 3))
    assert float(continuous_dice(zero, zero, 0.0)) == 1.0
    assert float(attention_loss(zero, zero, 0.0)) == 0.0


def test_cdc_negative_sample_epsilon_penalty():
    # empty mask, attention mass s: loss = 1 - 1/(s + 1) at eps = 1
    m = np.zeros((4, 4))
    for s in (0.0, 0.5, 2.0, 7.0):
        a = np.zeros((4, 4))
        a[0, 0] = s
        loss = float(attention_loss(a, m, 1.0))
        assert loss == pytest.approx(1.0 - 1.0 / (s + 1.0), abs=1e-12)


def test_cdc_scaling_invariance_at_zero_eps(rng):
    for _ in range(20):
        a, m = random_pair(rng)
        if m.sum() == 0 or a.sum() == 0:
            continue
        base = float(continuous_dice(a, m, 0.0))
        for t in (0.1, 3.0, 40.0):
            assert float(continuous_dice(t * a, m, 0.0)) == pytest.approx(
                base, rel=1e-9)


def test_cdc_mass_inside_beats_mass_outside():
    m = np.zeros((4, 4), dtype=int)
    m[:2, :2] = 1
    inside = np.zeros((4, 4))
    inside[0, 0] = 1.0
    outside = np.zeros((4, 4))
    outside[3, 3] = 1.0
    assert float(continuous_dice(inside, m)) > float(continuous_dice(outside, m))


def test_cdc_batched_matches_per_sample():
    maps = np.maximum(np.random.default_rng(3).standard_normal((5, 4, 4)), 0)
    masks = np.random.default_rng(4).integers(0, 2, size=(5, 4, 4))
    batched = continuous_dice(maps, masks, 0.5)
    assert batched.shape == (5,)
    for i in range(5):
        assert float(batched[i]) == pytest.approx(
            cdc_oracle(maps[i], masks[i], 0.5), abs=1e-9)


def test_cdc_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        continuous_dice(np.ones((3, 3)), np.ones((4, 4)))


def test_cdc_differentiable():
    a = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
    m = torch.zeros(4, 4)
    m[1:3, 1:3] = 1
    loss = attention_loss(a, m, 1.0)
    loss.backward()
    assert a.grad is not None
    assert torch.isfinite(a.grad).all()


# ------------------------------------------------------- cross entropies


def test_ce_matches_log_oracle(rng):
    for _ in range(30):
        p1 = float(rng.uniform(0.01, 0.99))
        p = np.array([1.0 - p1, p1])
        y = int(rng.integers(0, 2))
        assert float(categorical_cross_entropy(p, y)) == pytest.approx(
            -np.log(p[y]), abs=1e-12)


def test_ce_batch_is_mean(rng):
    probs = rng.uniform(0.05, 0.95, size=8)
    batch = np.stack([1.0 - probs, probs], axis=1)
    labels = rng.integers(0, 2, size=8)
    singles = [float(categorical_cross_entropy(batch[i], labels[i]))
               for i in range(8)]
    assert float(categorical_cross_entropy(batch, labels)) == pytest.approx(
        np.mean(singles))


def test_ce_rejects_bad_distributions():
    with pytest.raises(ValueError):
        categorical_cross_entropy(np.array([0.7, 0.7]), 1)
    with pytest.raises(ValueError):
        categorical_cross_entropy(np.array([1.0, 0.0]), 0)
    with pytest.raises(ValueError):
        categorical_cross_entropy(np.array([0.2, 0.3, 0.5]), 1)


def test_bce_basics():
    assert float(binary_cross_entropy(0.5, 1)) == pytest.approx(np.log(2))
    assert float(binary_cross_entropy(1.0, 1)) < 1e-6
    assert np.isfinite(float(binary_cross_entropy(0.0, 1)))
    with pytest.raises(ValueError):
        binary_cross_entropy(1.5, 1)


# ------------------------------------------------------- total loss


def test_total_loss_reduces_to_ce_at_zero_lambda():
    config = LossConfig(lambda_attention=0.0)
    p = np.array([0.3, 0.7])
    a = np.ones((4, 4))
    m = np.zeros((4, 4))
    got = float(total_loss(p, 1, a, m, config))
    assert got == pytest.approx(float(categorical_cross_entropy(p, 1)),
                                abs=1e-15)


def test_total_loss_adds_weighted_attention(rng):
    config = LossConfig(lambda_attention=2.0, smoothing_epsilon=1.0)
    p = np.array([0.4, 0.6])
    a = np.maximum(rng.standard_normal((4, 4)), 0)
    m = rng.integers(0, 2, size=(4, 4))
    expected = float(categorical_cross_entropy(p, 0)) + \
        2.0 * float(attention_loss(a, m, 1.0))
    assert float(total_loss(p, 0, a, m, config)) == pytest.approx(expected)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(lambda_attention=-1.0).validate()
    with pytest.raises(ConfigError):
        LossConfig(smoothing_epsilon=-0.1).validate()
    with pytest.raises(ConfigError):
        LossConfig(attention_mode="sideways").validate()
    round_tripped = LossConfig.from_dict(LossConfig().to_dict())
    assert round_tripped == LossConfig()
