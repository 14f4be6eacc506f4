import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhrtwin.sensitivity import (EmptySelectionError, SobolStudy, ZeroVarianceError, default_study_params, ishigami,
                                 ishigami_indices, run_study, saltelli_sample, select_theta_A, sobol_indices,
                                 write_report)

PI_BOX = [[-np.pi, np.pi]] * 3


def _ishigami_run(N, seed=0):
    X = saltelli_sample(3, N, PI_BOX, seed=seed)
    return sobol_indices(ishigami(X), 3, n_boot=50, seed=seed)


def test_ishigami_closed_form_values():
    S, ST = ishigami_indices()
    assert S == pytest.approx([0.3139, 0.4424, 0.0], abs=1e-4)
    assert ST == pytest.approx([0.5576, 0.4424, 0.2437], abs=1e-4)


def test_ishigami_recovered():
    res = _ishigami_run(2 ** 13)
    S, ST = ishigami_indices()
    assert np.all(np.abs(res.S - S) <= 0.02)
    assert np.all(np.abs(res.ST - ST) <= 0.02)


def test_additive_model_has_no_interactions():
    # f = x1 + 2 x2 + 3 x3 on the unit cube: S_i = ST_i = c_i^2 / sum c^2
    X = saltelli_sample(3, 2 ** 11, [[0, 1]] * 3, seed=1)
    res = sobol_indices(X @ np.array([1.0, 2.0, 3.0]), 3, n_boot=20)
    expect = np.array([1.0, 4.0, 9.0]) / 14.0
    assert res.S == pytest.approx(expect, abs=0.01)
    assert res.ST == pytest.approx(expect, abs=0.01)


def test_constant_output_is_an_error():
    X = saltelli_sample(2, 64, [[0, 1]] * 2)
    with pytest.raises(ZeroVarianceError):
        sobol_indices(np.full(X.shape[0], 3.0), 2)


def test_row_counts_and_layout():
    assert saltelli_sample(1, 4, [[0, 1]]).shape == (16, 1)
    assert saltelli_sample(5, 8, [[0, 1]] * 5).shape == (8 * 12, 5)
    D = 3
    X = saltelli_sample(D, 4, [[0, 1]] * D, seed=2).reshape(4, 2 * D + 2, D)
    A, B = X[:, 0], X[:, -1]
    for i in range(D):
        ab, ba = X[:, 1 + i], X[:, D + 1 + i]
        assert np.array_equal(ab[:, i], B[:, i]) and np.array_equal(np.delete(ab, i, 1), np.delete(A, i, 1))
        assert np.array_equal(ba[:, i], A[:, i]) and np.array_equal(np.delete(ba, i, 1), np.delete(B, i, 1))


def test_forty_nine_parameter_row_count():
    assert 2 ** 13 * (2 * 49 + 2) == 819_200


def test_bad_inputs():
    with pytest.raises(ValueError):
        saltelli_sample(2, 8, [[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        saltelli_sample(0, 8, [])
    with pytest.warns(UserWarning):
        saltelli_sample(2, 6, [[0, 1]] * 2)
    with pytest.raises(ValueError):
        sobol_indices(np.ones(7), 2)
    with pytest.raises(ValueError):
        sobol_indices(np.r_[np.ones(5), np.nan], 2)


def test_seeded_runs_are_identical():
    a, b = _ishigami_run(256, seed=4), _ishigami_run(256, seed=4)
    assert np.array_equal(a.S, b.S) and np.array_equal(a.ST_conf, b.ST_conf)


def test_estimates_converge():
    S, ST = ishigami_indices()
    err = [np.abs(_ishigami_run(n).ST - ST).max() for n in (2 ** 7, 2 ** 13)]
    assert err[1] < err[0]


@settings(max_examples=15)
@given(st.integers(0, 1000), st.floats(0.0, 2.0))
def test_total_order_dominates_first_order(seed, inter):
    X = saltelli_sample(3, 1024, [[-1, 1]] * 3, seed=seed)
    y = X[:, 0] + 0.5 * X[:, 1] + inter * X[:, 0] * X[:, 2]
    res = sobol_indices(y, 3, n_boot=60, seed=seed)
    assert np.all(res.ST >= res.S - res.S_conf - res.ST_conf)
    assert np.all(res.S_conf >= 0) and np.all(res.ST_conf >= 0)


def _fake_study(S, ST, ids=("a", "b", "c")):
    st_ = SobolStudy(list(ids), np.zeros(len(ids)), 0.5, 8, ["Q_RX"])
    st_.S["Q_RX"], st_.ST["Q_RX"] = np.asarray(S, float), np.asarray(ST, float)
    st_.S_conf["Q_RX"] = st_.ST_conf["Q_RX"] = np.zeros(len(ids))
    return st_


def test_selection_rule_needs_both_indices():
    s = _fake_study([0.5, 0.05, 0.2], [0.6, 0.5, 0.3])
    assert select_theta_A(s, 0.10) == ["a", "c"]
    assert select_theta_A(s, 0.10, forced=["c", "b"]) == ["a", "c", "b"]


def test_threshold_above_one_selects_nothing():
    s = _fake_study([0.5, 0.05, 0.2], [0.6, 0.5, 0.3])
    with pytest.raises(EmptySelectionError) as ei:
        select_theta_A(s, 1.1)
    assert ei.value.top[0][0] == "a"


def test_surrogate_study_runs_and_reports(original_net, tmp_path):
    ids = default_study_params(original_net, ("Q_RX",), "row")[:6]
    st_ = run_study(original_net, ids, ("Q_RX",), N=64, n_boot=10, seed=1)
    assert st_.D == 6 and st_.n_rows == 64 * 14
    assert np.all(np.isfinite(st_.S["Q_RX"]))
    again = run_study(original_net, ids, ("Q_RX",), N=64, n_boot=10, seed=1)
    assert np.array_equal(st_.S["Q_RX"], again.S["Q_RX"])
    paths = write_report(st_, tmp_path, ["x"], ("json", "csv", "svg"))
    assert {p.name for p in paths} == {"sobol_study.json", "sobol_indices.csv", "sobol_Q_RX.svg"}
    d = json.loads((tmp_path / "sobol_study.json").read_text())
    assert d["selection"] == ["x"] and d["param_ids"] == ids


def test_default_study_size(original_net):
    assert len(default_study_params(original_net, ("Q_RX",), "block")) == 49
    with pytest.raises(ValueError):
        default_study_params(original_net, level="nope")
