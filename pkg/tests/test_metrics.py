import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bameta.metrics import bin_index, calibration_report, mse, ser


def _brute_ece(conf, ok, M):
    """Enumerate bins by their interval definition."""
    n, total = len(conf), 0.0
    for m in range(1, M + 1):
        lo, hi = (m - 1) / M, m / M
        members = [i for i, c in enumerate(conf) if (lo < c <= hi) or (m == 1 and c == 0.0)]
        if members:
            acc = np.mean([ok[i] for i in members])
            cf = np.mean([conf[i] for i in members])
            total += len(members) * abs(acc - cf)
    return total / n


def test_ser_counts():
    assert ser([1, 2, 3], [1, 2, 3]) == 0.0
    assert ser([0, 0], [1, 1]) == 1.0
    truth = np.arange(12)
    pred = truth.copy()
    pred[:3] += 1
    assert ser(pred, truth) == 0.25


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse(np.arange(5) + 1.0, np.arange(5)) == 1.0
    assert mse([0.0, 0.0], [1.0, 3.0]) == 5.0


def test_length_mismatch_is_rejected():
    with pytest.raises(ValueError):
        ser([1, 2], [1])
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        calibration_report([0.5], [1, 0])


def test_hand_computed_ece():
    conf = [0.95, 0.95, 0.65, 0.55]
    ok = [1, 0, 1, 1]
    rep = calibration_report(conf, ok, 10)
    assert abs(rep.ece - 0.425) <= 1e-12
    assert abs(_brute_ece(conf, ok, 10) - 0.425) <= 1e-12


def test_perfect_confident_predictions():
    rep = calibration_report(np.ones(50), np.ones(50))
    assert rep.ece == 0.0


def test_calibrated_predictor_has_small_ece():
    rng = np.random.default_rng(0)
    conf = rng.uniform(size=10**5)
    ok = rng.uniform(size=conf.size) < conf
    assert calibration_report(conf, ok).ece < 0.01


def test_bin_edges_are_right_closed():
    assert list(bin_index([0.0, 0.1, 0.1000001, 0.5, 1.0], 10)) == [0, 0, 1, 4, 9]


def test_out_of_range_confidence_is_rejected():
    for bad in ([1.5], [-0.1], [np.nan]):
        with pytest.raises(ValueError):
            calibration_report(bad, [1])


_samples = st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=60)


@settings(max_examples=100, deadline=None)
@given(_samples, st.integers(1, 15))
def test_report_matches_brute_force(samples, M):
    conf = [c for c, _ in samples]
    ok = [int(b) for _, b in samples]
    rep = calibration_report(conf, ok, M)
    assert rep.bin_counts.sum() == rep.n == len(samples)
    assert abs(rep.ece - _brute_ece(conf, ok, M)) <= 1e-12
    assert 0.0 <= rep.ece <= 1.0
    gaps = np.abs(rep.bin_acc - rep.bin_conf)[rep.bin_counts > 0]
    assert rep.ece <= gaps.max() + 1e-15


@settings(max_examples=50, deadline=None)
@given(_samples, st.randoms(use_true_random=False))
def test_report_is_permutation_invariant(samples, rnd):
    conf = np.array([c for c, _ in samples])
    ok = np.array([b for _, b in samples], dtype=float)
    perm = list(range(len(samples)))
    rnd.shuffle(perm)
    a = calibration_report(conf, ok)
    b = calibration_report(conf[perm], ok[perm])
    np.testing.assert_array_equal(a.bin_counts, b.bin_counts)
    np.testing.assert_allclose(a.bin_acc, b.bin_acc, atol=1e-15)
    assert abs(a.ece - b.ece) <= 1e-15


@settings(max_examples=50, deadline=None)
@given(_samples, _samples)
def test_merging_equals_concatenation(s1, s2):
    from bameta.experiments import _pool_reports

    def rep(s):
        return calibration_report([c for c, _ in s], [int(b) for _, b in s])

    pooled = _pool_reports([rep(s1), rep(s2)])
    direct = rep(s1 + s2)
    np.testing.assert_array_equal(pooled.bin_counts, direct.bin_counts)
    np.testing.assert_allclose(pooled.bin_acc, direct.bin_acc, atol=1e-12)
    assert abs(pooled.ece - direct.ece) <= 1e-12


def test_frequency_sums_to_one():
    rng = np.random.default_rng(3)
    rep = calibration_report(rng.uniform(size=333), rng.integers(0, 2, 333))
    assert abs(rep.frequency.sum() - 1.0) <= 1e-12
