import numpy as np
import pytest

from slabscan.metrics import (EvalResult, accuracy_at, attention_localization,
                              auc, delong_ci, evaluate, roc_points,
                              trapezoid_area)


def brute_force_auc(scores, labels):
    """Definitional Mann-Whitney oracle: loop over every pos/neg pair."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def random_dataset(rng, n_max=50, tie_prone=True):
    n = int(rng.integers(4, n_max + 1))
    while True:
        labels = rng.integers(0, 2, size=n)
        if 0 < labels.sum() < n:
            break
    if tie_prone:
        scores = rng.integers(0, 6, size=n) / 5.0
    else:
        scores = rng.standard_normal(n)
    return scores, labels


# ---------------------------------------------------------------- auc


def test_auc_perfect_ranking():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_all_ties():
    assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_auc_worked_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_oracle(rng):
    for _ in range(100):
        scores, labels = random_dataset(rng)
        assert auc(scores, labels) == pytest.approx(
            brute_force_auc(scores, labels), abs=1e-12)


def test_auc_monotone_transform_invariant(rng):
    for _ in range(20):
        scores, labels = random_dataset(rng, tie_prone=False)
        reference = auc(scores, labels)
        for transform in (lambda s: 3 * s + 2, np.tanh,
                          lambda s: np.exp(s / 4)):
            assert auc(transform(scores), labels) == pytest.approx(reference)


def test_auc_negation_complement(rng):
    for _ in range(20):
        scores, labels = random_dataset(rng, tie_prone=False)
        assert auc(scores, labels) + auc(-scores, labels) == \
            pytest.approx(1.0)


# ---------------------------------------------------------------- roc


def test_roc_endpoints_and_monotonicity(rng):
    for _ in range(30):
        scores, labels = random_dataset(rng)
        pts = roc_points(scores, labels)
        assert pts[0] == (0.0, 0.0)
        assert pts[-1] == (1.0, 1.0)
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        assert all(b >= a for a, b in zip(xs, xs[1:]))
        assert all(b >= a for a, b in zip(ys, ys[1:]))


def test_roc_area_equals_auc(rng):
    for _ in range(50):
        scores, labels = random_dataset(rng, tie_prone=False)
        pts = roc_points(scores, labels)
        assert trapezoid_area(pts) == pytest.approx(auc(scores, labels),
                                                    abs=1e-9)


def test_roc_area_equals_auc_with_ties(rng):
    for _ in range(50):
        scores, labels = random_dataset(rng, tie_prone=True)
        pts = roc_points(scores, labels)
        assert trapezoid_area(pts) == pytest.approx(auc(scores, labels),
                                                    abs=1e-9)


# ---------------------------------------------------------------- delong


def bootstrap_ci(scores, labels, draws=10000, alpha=0.05, seed=7):
    rng = np.random.default_rng(seed)
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    stats = []
    n = len(s)
    while len(stats) < draws:
        idx = rng.integers(0, n, size=n)
        if 0 < y[idx].sum() < n:
            stats.append(auc(s[idx], y[idx]))
    return (float(np.quantile(stats, alpha / 2)),
            float(np.quantile(stats, 1 - alpha / 2)))


def test_delong_midpoint_is_auc(rng):
    for _ in range(20):
        scores, labels = random_dataset(rng, tie_prone=False)
        lo, hi = delong_ci(scores, labels)
        if lo > 0.0 and hi < 1.0:  # unclipped
            assert (lo + hi) / 2 == pytest.approx(auc(scores, labels),
                                                  abs=1e-12)


def test_delong_perfect_separation_point_interval():
    scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.05]
    labels = [1, 1, 1, 0, 0, 0]
    with pytest.warns(UserWarning):
        lo, hi = delong_ci(scores, labels)
    assert (lo, hi) == (1.0, 1.0)


def test_delong_width_close_to_bootstrap():
    rng = np.random.default_rng(99)
    n = 200
    labels = np.r_[np.ones(100, dtype=int), np.zeros(100, dtype=int)]
    scores = np.r_[rng.normal(0.6, 0.25, 100), rng.normal(0.4, 0.25, 100)]
    lo, hi = delong_ci(scores, labels)
    blo, bhi = bootstrap_ci(scores, labels, draws=4000)
    assert abs((hi - lo) - (bhi - blo)) < 0.01


def test_delong_width_shrinks_with_n():
    rng = np.random.default_rng(5)
    full_pos = rng.normal(0.65, 0.2, 400)
    full_neg = rng.normal(0.35, 0.2, 400)
    widths = []
    for n in (25, 100, 400):
        scores = np.r_[full_pos[:n], full_neg[:n]]
        labels = np.r_[np.ones(n, dtype=int), np.zeros(n, dtype=int)]
        lo, hi = delong_ci(scores, labels)
        widths.append(hi - lo)
    assert widths[0] > widths[1] > widths[2]


def test_delong_interval_clipped_and_contains_auc(rng):
    for _ in range(20):
        scores, labels = random_dataset(rng)
        if labels.sum() < 2 or (1 - labels).sum() < 2:
            continue
        estimate = auc(scores, labels)
        if estimate in (0.0, 1.0):
            continue
        lo, hi = delong_ci(scores, labels)
        assert 0.0 <= lo <= estimate <= hi <= 1.0


# ---------------------------------------------------------------- accuracy


def test_accuracy_exact_predictions():
    assert accuracy_at([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy_at([0, 1, 0], [1, 0, 1]) == 0.0


def test_accuracy_boundary_counts_positive():
    assert accuracy_at([0.6, 0.4, 0.5], [1, 0, 0]) == pytest.approx(2 / 3)


# ---------------------------------------------------------------- localization


def test_localization_all_inside():
    a = np.zeros((6, 6))
    a[2, 2] = 1.0
    m = np.zeros((6, 6), dtype=bool)
    m[2, 2] = True
    assert attention_localization(a, m) == (1.0, 1)


def test_localization_disjoint():
    a = np.zeros((6, 6))
    a[0, 0] = 1.0
    m = np.zeros((6, 6), dtype=bool)
    m[5, 5] = True
    assert attention_localization(a, m) == (0.0, 0)


def test_localization_uniform_map_proportionality():
    a = np.ones((4, 5))
    m = np.zeros((4, 5), dtype=bool)
    m[0, :3] = True
    inside, hit = attention_localization(a, m)
    assert inside == pytest.approx(3 / 20)
    assert hit == 1  # every pixel ties for the argmax


def test_localization_zero_map():
    a = np.zeros((4, 4))
    m = np.zeros((4, 4), dtype=bool)
    m[1, 1] = True
    inside, hit = attention_localization(a, m)
    assert inside == 0.0
    assert hit == 1  # all-tied argmax overlaps the mask


def test_localization_tied_argmax_inside_counts():
    a = np.zeros((3, 3))
    a[0, 0] = a[2, 2] = 5.0
    m = np.zeros((3, 3), dtype=bool)
    m[2, 2] = True
    assert attention_localization(a, m)[1] == 1


def test_localization_empty_mask_rejected():
    with pytest.raises(ValueError):
        attention_localization(np.ones((3, 3)), np.zeros((3, 3), dtype=bool))


def test_localization_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        attention_localization(np.ones((3, 3)), np.ones((4, 4), dtype=bool))


# ---------------------------------------------------------------- evaluate


def test_evaluate_bundles_consistent_fields(rng):
    scores, labels = random_dataset(rng, n_max=40)
    result = evaluate(scores, labels)
    assert isinstance(result, EvalResult)
    assert result.auc == pytest.approx(brute_force_auc(scores, labels))
    assert result.n_pos == int(np.sum(np.asarray(labels) == 1))
    assert result.n_neg == int(np.sum(np.asarray(labels) == 0))
    assert result.roc_points[0] == (0.0, 0.0)
    d = result.to_dict()
    assert d["auc"] == result.auc
    assert len(d["ci"]) == 2
