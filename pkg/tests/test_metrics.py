import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saidnerf.errors import DomainError
from saidnerf.metrics import DepthMetrics, aggregate_metrics, compute_metrics


def scalar_metrics(pred, gt):
    """Plain loops over the valid pixels."""
    pairs = [(p, g) for p, g in zip(pred, gt) if g > 0]
    n = len(pairs)
    sq = sum((p - g) ** 2 for p, g in pairs)
    ab = sum(abs(p - g) for p, g in pairs)
    rels = sorted(abs(p - g) / g for p, g in pairs)
    mid = n // 2
    rel = rels[mid] if n % 2 else 0.5 * (rels[mid - 1] + rels[mid])
    deltas = [100.0 * sum(1 for p, g in pairs if abs(p - g) / g <= x - 1) / n for x in (1.05, 1.10, 1.25)]
    return math.sqrt(sq / n), ab / n, rel, deltas


@pytest.mark.parametrize("seed", range(100))
def test_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.3, 1.5, 500)
    gt[::7] = 0.0
    pred = gt * rng.uniform(0.8, 1.2, 500)
    m = compute_metrics(pred, gt)
    rmse, mae, rel, deltas = scalar_metrics(pred, gt)
    assert m.rmse == pytest.approx(rmse, abs=1e-12)
    assert m.mae == pytest.approx(mae, abs=1e-12)
    assert m.rel == pytest.approx(rel, abs=1e-12)
    for got, want in zip((m.delta_105, m.delta_110, m.delta_125), deltas):
        assert got == pytest.approx(want, abs=1e-12)


def test_delta_boundary_is_inclusive():
    gt = np.array([1.0, 2.0, 4.0, 1.0])
    pred = np.array([1.05, 2.1, 4.0 * 0.95, 1.0500001])
    m = compute_metrics(pred, gt)
    assert m.delta_105 == 75.0
    assert m.delta_110 == 100.0


def test_uniform_five_percent_overshoot():
    gt = np.random.default_rng(1).uniform(0.2, 3.0, 64)
    m = compute_metrics(1.05 * gt, gt)
    assert m.rel == pytest.approx(0.05, abs=1e-12)
    assert (m.delta_105, m.delta_110, m.delta_125) == (100.0, 100.0, 100.0)


def test_perfect_prediction():
    gt = np.array([[0.5, 1.0], [0.0, 2.0]])
    m = compute_metrics(gt, gt)
    assert (m.rmse, m.mae, m.rel) == (0.0, 0.0, 0.0)
    assert (m.delta_105, m.delta_110, m.delta_125) == (100.0, 100.0, 100.0)


def test_explicit_mask_and_errors():
    gt = np.array([1.0, 1.0, 1.0])
    pred = np.array([1.0, 2.0, 1.5])
    m = compute_metrics(pred, gt, valid=np.array([True, False, False]))
    assert m.rmse == 0.0
    with pytest.raises(DomainError):
        compute_metrics(pred, np.zeros(3))
    with pytest.raises(DomainError):
        compute_metrics(pred, gt, valid=np.zeros(3, dtype=bool))
    with pytest.raises(DomainError):
        compute_metrics(pred[:2], gt)


def test_aggregate_is_unweighted_mean():
    a = DepthMetrics(1.0, 2.0, 0.1, 50.0, 60.0, 70.0)
    b = DepthMetrics(3.0, 4.0, 0.3, 100.0, 80.0, 90.0)
    assert aggregate_metrics([a, b]) == DepthMetrics(2.0, 3.0, 0.2, 75.0, 70.0, 80.0)
    assert aggregate_metrics([a]) == a
    with pytest.raises(DomainError):
        aggregate_metrics([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 10), st.floats(0.01, 10)), min_size=1, max_size=40))
def test_metric_properties(pairs):
    pred, gt = np.array(pairs).T
    m = compute_metrics(pred, gt)
    assert 0 <= m.mae <= m.rmse + 1e-12
    assert 0 <= m.delta_105 <= m.delta_110 <= m.delta_125 <= 100
    assert m.rel >= 0
