import warnings

import numpy as np
import pytest

import oracles
from uad import calibration as cal
from uad.calibration import (
    CalibrationConfig,
    Temperature,
    apply_temperature,
    assign_bins,
    calibrate_zoo,
    compute_ece,
    fit_temperature,
)
from uad.core_math import margin_matrix
from uad.errors import InvalidConfig, InvalidInput, InvalidTemperature
from uad.selection import ModelZoo


def test_temperature_log_parametrisation():
    t = Temperature.from_log(np.log(1 / 1.5))
    assert t.value == pytest.approx(2 / 3, abs=1e-12)
    assert np.exp(t.log_value) == pytest.approx(t.value, abs=1e-12)
    for bad in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(InvalidTemperature):
            Temperature(bad)


def test_apply_temperature():
    z = apply_temperature([[2.0, 1.0, 0.0]], Temperature(2.0))
    np.testing.assert_array_equal(z, [[1.0, 0.5, 0.0]])
    # mpmath: (e - e^0.5) / (e + e^0.5 + 1)
    assert margin_matrix(z)[0] == pytest.approx(0.199284505, abs=1e-5)


def test_apply_temperature_identity_is_bitwise(rng):
    l = rng.normal(size=(20, 3)) * 1e3
    assert apply_temperature(l, Temperature(1.0)).tobytes() == l.tobytes()


def test_huge_temperature_flattens_margin():
    assert margin_matrix(apply_temperature([[4.0, -4.0]], Temperature(1e6)))[0] < 1e-5


def test_apply_temperature_rejects_non_positive():
    with pytest.raises(InvalidTemperature):
        apply_temperature([[1.0, 0.0]], 0.0)


@pytest.mark.parametrize(
    "conf, expected_bin",
    [([0.95, 0.95], [10, 10]), ([0.0], [1]), ([0.1, 0.1000001], [1, 2]), ([0.3], [3]), ([1.0], [10])],
)
def test_assign_bins_membership(conf, expected_bin):
    b = assign_bins(conf, [True] * len(conf), 10)
    expected = np.zeros(10, dtype=int)
    for e in expected_bin:
        expected[e - 1] += 1
    np.testing.assert_array_equal(b.counts, expected)


def test_assign_bins_edges_are_closed_on_the_right():
    # every float edge m/M belongs to bin m
    for m_bins in (3, 7, 10, 15):
        conf = np.array([m / m_bins for m in range(1, m_bins + 1)])
        b = assign_bins(conf, np.ones_like(conf), m_bins)
        np.testing.assert_array_equal(b.counts, np.ones(m_bins, dtype=int))


def test_assign_bins_rejects_out_of_range():
    with pytest.raises(InvalidInput):
        assign_bins([1.2], [True], 10)
    with pytest.raises(InvalidInput):
        assign_bins([-0.1], [True], 10)


@pytest.mark.parametrize("m_bins", [1, 2, 10, 37])
def test_bin_counts_conserve_n(rng, m_bins):
    c = rng.random(1000)
    assert assign_bins(c, c > 0.5, m_bins).n == 1000


def test_ece_hand_values():
    assert compute_ece(assign_bins([0.95, 0.95], [True, False], 10)) == pytest.approx(0.45, abs=1e-9)
    four = assign_bins([0.75, 0.75, 0.55, 0.55], [True, True, False, False], 10)
    assert compute_ece(four) == pytest.approx(0.40, abs=1e-9)
    assert compute_ece(assign_bins([1.0, 1.0], [True, True], 10)) == 0.0
    with pytest.raises(InvalidInput):
        compute_ece(assign_bins([], [], 10))


def test_ece_matches_oracle_and_is_permutation_invariant(rng):
    l = rng.normal(scale=2, size=(300, 4))
    y = rng.integers(0, 4, 300)
    for t in (0.3, 1.0, 2.5):
        e = cal.ece(l, y, Temperature(t))
        assert e == pytest.approx(oracles.ece(l.tolist(), y.tolist(), t, 10), abs=1e-12)
        assert 0.0 <= e <= 1.0
        perm = rng.permutation(300)
        assert cal.ece(l[perm], y[perm], Temperature(t)) == pytest.approx(e, abs=1e-12)


def _overconfident(rng, n=400, k=3):
    """Confidence ~0.99 everywhere, accuracy 0.5 against the returned labels."""
    pred = rng.integers(0, k, n)
    l = np.zeros((n, k))
    l[np.arange(n), pred] = 6.0
    y = pred.copy()
    flip = rng.permutation(n)[: n // 2]
    y[flip] = (pred[flip] + 1) % k
    return l, y


def test_fit_softens_overconfident_model(rng):
    l, y = _overconfident(rng)
    assert cal.ece(l, y) > 0.45
    t = fit_temperature(l, y)
    assert t.value > 1.0
    # exhaustive grid check: ECE decreases when moving from T=1 towards the fit
    grid = np.geomspace(1.0, t.value, 20)
    eces = [oracles.ece(l.tolist(), y.tolist(), g, 10) for g in grid]
    assert eces[-1] < eces[0]
    assert cal.ece(l, y, t) < 0.05


def test_fit_zero_ece_fixed_point_prefers_one():
    l = np.array([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0], [0.0, 0.0, 50.0]])
    y = np.array([0, 1, 2])
    assert cal.ece(l, y) == 0.0
    assert fit_temperature(l, y).value == 1.0


def test_fit_never_worse_than_identity(rng):
    for _ in range(10):
        l = rng.normal(scale=rng.uniform(0.5, 4), size=(500, 4))
        y = rng.integers(0, 4, 500)
        t = fit_temperature(l, y)
        assert cal.ece(l, y, t) <= cal.ece(l, y) + 1e-12


def test_fit_matches_brute_force_grid(rng):
    l = rng.normal(scale=2, size=(200, 3))
    y = np.where(rng.random(200) < 0.7, l.argmax(1), rng.integers(0, 3, 200))
    cfg = CalibrationConfig()
    grid = cfg.build_grid()
    brute = min(oracles.ece(l.tolist(), y.tolist(), g, 10) for g in grid)
    assert cal.ece(l, y, fit_temperature(l, y, cfg)) <= brute + 1e-12


def test_grid_contains_identity_and_anchors():
    g = CalibrationConfig().build_grid()
    assert 1.0 in g and 1.5 in g
    assert np.any(np.isclose(g, 2 / 3, atol=1e-15))
    assert g.min() == pytest.approx(0.05) and g.max() == pytest.approx(10.0)


def test_fit_config_errors(rng):
    l = rng.normal(size=(10, 3))
    y = rng.integers(0, 3, 10)
    with pytest.raises(InvalidConfig):
        fit_temperature(l, y, CalibrationConfig(grid=()))
    with pytest.raises(InvalidTemperature):
        fit_temperature(l, y, CalibrationConfig(grid=(1.0, -2.0)))
    with pytest.raises(InvalidInput):
        fit_temperature(l, np.full(10, 3), CalibrationConfig())


def test_argmax_invariant_under_temperature(rng):
    l = rng.normal(scale=5, size=(1000, 5))
    for t in (1e-3, 0.05, 0.7, 1.0, 3.0, 1e4):
        np.testing.assert_array_equal(np.argmax(apply_temperature(l, t), 1), np.argmax(l, 1))


def test_margin_limits_in_temperature(rng):
    l = rng.normal(size=(50, 4))
    assert margin_matrix(apply_temperature(l, 1e6)).max() < 1e-5
    assert margin_matrix(apply_temperature(l, 1e-4)).min() > 1 - 1e-6


def test_calibrate_single_model_oracle_delegates(rng):
    l = rng.normal(scale=2, size=(300, 4))
    y = rng.integers(0, 4, 300)
    [r] = calibrate_zoo(ModelZoo.from_logits({"a": l}), "oracle", y)
    assert r.temperature == fit_temperature(l, y)
    assert r.label_source == "oracle" and r.warning is None
    assert r.ece_after <= r.ece_before + 1e-12


def test_calibrate_identical_models_symmetric(rng):
    l = rng.normal(scale=2, size=(300, 4))
    reports = calibrate_zoo(ModelZoo.from_logits({"a": l, "b": l.copy(), "c": l.copy()}))
    assert len({r.temperature.value for r in reports}) == 1


def test_calibrate_single_model_consensus_is_flagged(rng):
    l = rng.normal(size=(50, 3))
    with pytest.warns(RuntimeWarning, match="degenerate"):
        [r] = calibrate_zoo(ModelZoo.from_logits({"a": l}))
    assert "degenerate" in r.warning
    assert r.to_dict()["warning"] == r.warning


def test_consensus_with_permuted_second_model(rng):
    n, k = 120, 4
    a = rng.normal(scale=2, size=(n, k))
    perm = np.array([2, 0, 3, 1])
    b = np.empty_like(a)
    b[:, perm] = a  # b predicts perm[argmax a]
    y = cal.consensus_labels([a, b])
    # scalar reference: two votes, ties to the smaller class
    pa, pb = a.argmax(1), b.argmax(1)
    expected = [min(u, v) if u != v else u for u, v in zip(pa, pb)]
    np.testing.assert_array_equal(y, expected)
    reports = calibrate_zoo(ModelZoo.from_logits({"a": a, "b": b}))
    assert [r.model_id for r in reports] == ["a", "b"]
    for r in reports:
        assert 0 <= r.ece_after <= r.ece_before + 1e-12 <= 1 + 1e-12


def test_calibrate_requires_labels_for_oracle(rng):
    zoo = ModelZoo.from_logits({"a": rng.normal(size=(5, 2))})
    with pytest.raises(InvalidInput):
        calibrate_zoo(zoo, "oracle")
    with pytest.raises(InvalidConfig):
        calibrate_zoo(zoo, "nonsense")
