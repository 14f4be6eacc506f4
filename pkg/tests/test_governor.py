import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhrtwin.governor import (Constraint, ConstraintSet, GovernorDecision, GovernorInfeasibleError, GovernorLog,
                              audit_violations, govern)
from fhrtwin.plant import steady_state
from fhrtwin.surrogate.net import rollout
from fhrtwin.variables import IDX, N_STATE

FP = 280e6


@pytest.fixture(scope="module")
def states():
    return {p: steady_state(p).x for p in (0.5, 0.62, 0.7, 0.8, 0.9, 1.0)}


def _held(net, x, sp, horizon=1440):
    return rollout(net, x, x, np.full(horizon, sp))


def test_feasible_move_passes_through(original_net, states):
    x = states[1.0]
    d = govern(0.9 * FP, FP, original_net, (x, x))
    assert d.kappa == 1.0 and d.setpoint == 0.9 * FP and d.binding is None
    assert d.evaluations == 1


def test_large_drop_is_scaled_and_maximal(original_net, states):
    x = states[1.0]
    cs = ConstraintSet()
    d = govern(0.5 * FP, FP, original_net, (x, x), tol=1e-3)
    assert 0.0 < d.kappa < 1.0
    assert d.binding == "m_P_p"
    assert cs.satisfied(_held(original_net, x, d.setpoint))
    # one tolerance step further is predicted to cross the bound
    over = FP + (d.kappa + 1e-3) * (0.5 * FP - FP)
    assert not cs.satisfied(_held(original_net, x, over))


def test_bisection_evaluation_count(original_net, states):
    x = states[1.0]
    for tol, n in ((1e-3, 10), (1e-2, 7), (0.25, 2)):
        d = govern(0.5 * FP, FP, original_net, (x, x), tol=tol)
        assert d.evaluations == 2 + n


def test_repeat_with_admissible_setpoint_is_fixed_point(original_net, states):
    x = states[1.0]
    d = govern(0.5 * FP, FP, original_net, (x, x))
    again = govern(d.setpoint, FP, original_net, (x, x))
    assert again.kappa == 1.0 and again.setpoint == d.setpoint


def test_larger_buffers_never_admit_more(original_net, states):
    x = states[1.0]
    kappas = []
    for b in (0.0, 5.0, 20.0, 40.0):
        cs = ConstraintSet().with_buffers({"m_P_p": b, "m_P_s": b})
        kappas.append(govern(0.5 * FP, FP, original_net, (x, x), cs).kappa)
    assert all(a >= b for a, b in zip(kappas, kappas[1:]))
    assert kappas[-1] < kappas[0]


def test_infeasible_hold_raises_with_hold_decision(original_net, states):
    x = states[1.0]
    with pytest.raises(GovernorInfeasibleError) as ei:
        govern(0.5 * FP, 0.5 * FP, original_net, (x, x))
    assert ei.value.decision.kappa == 0.0
    assert ei.value.decision.setpoint == 0.5 * FP
    assert ei.value.decision.binding in ("m_P_p", "m_P_s")


def test_state_already_past_bound_is_not_a_dead_end(original_net, states):
    # at 50 % power the flows already sit below their limits; holding is allowed
    x = states[0.5]
    d = govern(0.5 * FP, 0.5 * FP, original_net, (x, x))
    assert d.kappa == 1.0
    up = govern(FP, 0.5 * FP, original_net, (x, x))
    assert up.setpoint > 0.5 * FP


def test_argument_checks(original_net, states):
    x = states[1.0]
    with pytest.raises(ValueError):
        govern(1.2 * FP, FP, original_net, (x, x))
    with pytest.raises(ValueError):
        govern(0.9 * FP, FP, original_net, (x, x), horizon=0)
    with pytest.raises(KeyError):
        Constraint("nope", 1.0, ">=")
    with pytest.raises(ValueError):
        Constraint("m_P_p", 1.0, "==")
    with pytest.raises(ValueError):
        Constraint("m_P_p", 1.0, ">=", buffer=-1.0)
    with pytest.raises(ValueError):
        ConstraintSet().with_spread_buffers({}, -1.0)


def test_spread_buffers_scale_with_factor():
    cs = ConstraintSet().with_spread_buffers({"m_P_p": 2.0, "T_ihx_s_out": 0.5}, 3.0)
    buf = {c.var: c.buffer for c in cs}
    assert buf == {"m_P_p": 6.0, "m_P_s": 0.0, "T_ihx_s_out": 1.5}
    eff = {c.var: c.effective for c in cs}
    assert eff["m_P_p"] == 726.0 and eff["T_ihx_s_out"] == 888.5


def test_start_allowance_and_first_violation():
    cs = ConstraintSet()
    x = np.zeros(N_STATE)
    x[IDX["m_P_p"]], x[IDX["m_P_s"]], x[IDX["T_ihx_s_out"]] = 700.0, 1100.0, 880.0
    allow = cs.start_allowance(x)
    assert allow == {"m_P_p": 20.0, "m_P_s": 0.0, "T_ihx_s_out": 0.0}
    traj = np.vstack([x, x])
    assert cs.first_violation(traj) == "m_P_p"
    assert cs.first_violation(traj, allow) is None
    traj[1, IDX["m_P_p"]] = 690.0
    assert cs.first_violation(traj, allow) == "m_P_p"


@settings(max_examples=30)
@given(st.sampled_from([0.62, 0.7, 0.8, 0.9, 1.0]), st.floats(0.5, 1.0), st.sampled_from([0.0, 2.0, 10.0]))
def test_emitted_setpoints_are_predicted_feasible(original_net, states, start, target, buffer):
    x = states[start]
    cs = ConstraintSet().with_buffers({"m_P_p": buffer, "m_P_s": buffer, "T_ihx_s_out": buffer})
    try:
        d = govern(target * FP, start * FP, original_net, (x, x), cs, horizon=720)
    except GovernorInfeasibleError:
        return
    traj = _held(original_net, x, d.setpoint, 720)
    assert cs.first_violation(traj, cs.start_allowance(x)) is None
    lo, hi = sorted((start * FP, target * FP))
    assert lo - 1e-6 <= d.setpoint <= hi + 1e-6


def test_audit_attributes_causes():
    times = np.arange(0.0, 10_000.0, 100.0)
    truth = np.zeros((times.size, N_STATE))
    truth[:, IDX["m_P_p"]] = 800.0
    truth[:, IDX["m_P_s"]] = 1200.0
    truth[:, IDX["T_ihx_s_out"]] = 850.0
    truth[5, IDX["m_P_p"]] = 710.0  # 500 s after a setpoint change
    truth[50, IDX["T_ihx_s_out"]] = 895.0  # 1000 s after a shock
    truth[90, IDX["m_P_s"]] = 990.0  # no excuse
    v = audit_violations(times, truth, shock_times=[4000.0], transition_times=[0.0])
    got = [(x.t, x.var, x.cause) for x in v]
    assert got == [(500.0, "m_P_p", "model_error/transition"), (5000.0, "T_ihx_s_out", "shock"),
                   (9000.0, "m_P_s", "model_error")]
    assert v[0].excess == pytest.approx(10.0)


def test_audit_ignores_buffers():
    cs = ConstraintSet().with_buffers({"m_P_p": 50.0})
    truth = np.zeros((1, N_STATE))
    truth[0, IDX["m_P_p"]] = 730.0
    truth[0, IDX["m_P_s"]] = 1200.0
    assert audit_violations([0.0], truth, cs) == []


def test_governor_log_csv(tmp_path):
    log = GovernorLog()
    log.record(0.0, GovernorDecision(2.5e8, 0.5, "m_P_p", None, 2.2e8, 2.8e8, 12))
    log.record(3600.0, GovernorDecision(2.5e8, 1.0, None, None, 2.5e8, 2.5e8, 1), alarm=True)
    p = tmp_path / "g.csv"
    log.write_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "target", "admissible", "kappa", "binding", "alarm"]
    assert rows[1][4] == "m_P_p" and rows[2][5] == "1"
