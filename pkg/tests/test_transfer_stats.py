"""
Tests for transfer scores, CIS and correlation statistics
"""
import math
import os
import sys

import numpy as np
import pytest
from scipy.stats import rankdata

# Add parent directory to path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from divscan.errors import ValidationError
from divscan.tensor_io import AccuracyTable
from divscan.transfer_stats import (
    TransferScores,
    cis,
    correlate,
    logit,
    rank_models,
    transfer_scores,
)


def tau_b_oracle(x, y) -> float:
    n = len(x)
    concordant = discordant = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0:
                ties_x += 1
            if dy == 0:
                ties_y += 1
            if dx * dy > 0:
                concordant += 1
            elif dx * dy < 0:
                discordant += 1
    n0 = n * (n - 1) // 2
    return (concordant - discordant) / math.sqrt((n0 - ties_x) * (n0 - ties_y))


def test_logit_fixtures():
    assert logit(0.5) == 0.0
    assert logit(0.8) == pytest.approx(math.log(4.0), abs=1e-12)
    with pytest.raises(ValidationError):
        logit(1.0)


def test_worked_example():
    table = AccuracyTable(models=("a", "b"), datasets=("d",), acc=[[0.8], [0.6]])
    scores = transfer_scores(table)
    scores.validate()
    assert scores.score_of("a") == pytest.approx(0.4904, abs=1e-4)
    assert scores.score_of("b") == pytest.approx(-0.4904, abs=1e-4)
    assert [s.stderr for s in scores.per_model] == [0.0, 0.0]
    assert [s.model_id for s in rank_models(scores)] == ["a", "b"]


def test_identical_models():
    table = AccuracyTable(models=("a", "b", "c"), datasets=("d1", "d2"), acc=np.full((3, 2), 0.7))
    scores = transfer_scores(table)
    for s in scores.per_model:
        assert s.mean_adjusted == pytest.approx(0.0, abs=1e-12)
        assert s.stderr == pytest.approx(0.0, abs=1e-12)


def test_centering_and_stderr():
    rng = np.random.default_rng(0)
    acc = rng.uniform(0.05, 0.95, size=(5, 4))
    table = AccuracyTable(models=tuple("abcde"), datasets=("w", "x", "y", "z"), acc=acc)
    scores = transfer_scores(table)
    adjusted = np.asarray(scores.adjusted)
    assert np.all(np.abs(adjusted.sum(axis=0)) < 1e-9)

    y = np.log(acc / (1 - acc))
    expected = y - y.mean(axis=0)
    row = expected[2]
    se = row.std(ddof=1) / math.sqrt(4) * 5 / 4
    assert scores.per_model[2].mean_adjusted == pytest.approx(row.mean(), abs=1e-12)
    assert scores.per_model[2].stderr == pytest.approx(se, abs=1e-12)

    frame = scores.to_frame()
    assert list(frame.index) == list("abcde")
    assert TransferScores.from_dict(scores.to_dict()) == scores


def test_model_order_invariance():
    rng = np.random.default_rng(1)
    acc = rng.uniform(0.1, 0.9, size=(4, 3))
    models = ("a", "b", "c", "d")
    perm = [2, 0, 3, 1]
    base = transfer_scores(AccuracyTable(models, ("x", "y", "z"), acc))
    permuted = transfer_scores(AccuracyTable(tuple(models[i] for i in perm), ("x", "y", "z"), acc[perm]))
    for m in models:
        assert permuted.score_of(m) == pytest.approx(base.score_of(m), abs=1e-12)


def test_single_model_rejected():
    with pytest.raises(ValidationError):
        transfer_scores(AccuracyTable(("a",), ("d",), [[0.5]]))


def test_cis_product():
    assert cis(0.756, 0.5) == pytest.approx(0.378)
    assert cis(0.42, 1.0) == 0.42
    with pytest.raises(ValidationError):
        cis(1.1, 0.5)
    # equal accuracy: higher diversity wins
    assert cis(0.7, 0.6) > cis(0.7, 0.5)


def test_correlate_monotone():
    x = np.array([0.1, 0.4, 0.5, 0.9, 1.3])
    same = correlate(x, x)
    assert same.pearson == pytest.approx(1.0)
    assert same.spearman == pytest.approx(1.0)
    assert same.kendall == pytest.approx(1.0)
    assert same.r_squared == pytest.approx(1.0)

    reverse = correlate(x, -x)
    assert reverse.spearman == pytest.approx(-1.0)
    assert reverse.kendall == pytest.approx(-1.0)


def test_r_squared_equals_pearson_squared():
    rng = np.random.default_rng(2)
    x = rng.normal(size=30)
    y = 2 * x + rng.normal(size=30)
    report = correlate(x, y)
    assert report.r_squared == pytest.approx(report.pearson ** 2, abs=1e-12)


def test_kendall_with_ties_matches_pair_counting():
    x = [1.0, 2.0, 2.0, 3.0, 5.0, 4.0]
    y = [2.0, 1.0, 3.0, 3.0, 6.0, 5.0]
    assert correlate(x, y).kendall == pytest.approx(tau_b_oracle(x, y), abs=1e-12)

    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(3, 25))
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert correlate(x, y).kendall == pytest.approx(tau_b_oracle(x.tolist(), y.tolist()), abs=1e-12)


def test_spearman_is_pearson_of_average_ranks():
    x = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0])
    y = np.array([2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0])
    expected = np.corrcoef(rankdata(x), rankdata(y))[0, 1]
    report = correlate(x, y)
    assert report.spearman == pytest.approx(expected, abs=1e-12)
    assert report.pearson == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


def test_correlate_errors():
    with pytest.raises(ValidationError, match="length"):
        correlate([1, 2, 3], [1, 2])
    with pytest.raises(ValidationError):
        correlate([1, 2], [1, 2])
    with pytest.raises(ValidationError, match="constant"):
        correlate([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValidationError, match="constant"):
        correlate([1, 2, 3], [4, 4, 4])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
