import math

import numpy as np
import pytest

from fedpoint.metrics import EvalReport, auc, repeat_stats, spread
from oracles import pairwise_auc


def test_perfect_and_inverted():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0


def test_tie_example():
    assert auc([0.5, 0.5, 0.8], [0, 1, 1]) == 0.75


def test_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 5, n) / 4.0  # plenty of ties
        assert abs(auc(s, y) - pairwise_auc(s, y)) <= 1e-12


def test_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_nan_scores_rejected():
    with pytest.raises(ValueError):
        auc([0.1, math.nan], [0, 1])


def test_repeat_stats():
    assert repeat_stats([0.8, 0.8]) == (0.8, 0.0)
    mean, std = repeat_stats([0.7, 0.9])
    assert mean == pytest.approx(0.8) and std == pytest.approx(0.141421356, abs=1e-9)
    with pytest.raises(ValueError):
        repeat_stats([0.5])


def test_spread_columns():
    s = spread([0.7, 0.9, 0.8])
    assert set(s) == {"mean", "std", "min", "max", "max_min"}
    assert s["max_min"] == pytest.approx(0.2)


def test_report_skips_missing_sites(tmp_path):
    r = EvalReport()
    r.add("A", 0.8)
    r.add("B", math.nan)
    r.add("A", 0.6)
    r.add("B", 0.9)
    assert r.per_run_means() == [0.8, 0.75]
    r.to_csv(tmp_path / "r.csv")
    assert "N/A" in (tmp_path / "r.csv").read_text()


def test_monotone_invariance_and_label_flip():
    rng = np.random.default_rng(1)
    s = rng.random(30)
    y = np.array([0, 1] * 15)
    assert auc(np.exp(3 * s) - 7, y) == auc(s, y)
    assert auc(s, y) + auc(s, 1 - y) == pytest.approx(1.0, abs=1e-15)
