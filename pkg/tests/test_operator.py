import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fhrtwin.health import K_ZERO, PumpHealth, degrade_series, primary_degradation, secondary_degradation
from fhrtwin.operator import (FULL_POWER, AgentAction, CemDpAgent, CompressionError, HourlyTransitionModel,
                              PlanningObservation, RewardWeights, SamplingPlan, compress_surrogate,
                              evaluate_plan, maintenance_guard, plan_period, rollout_compressed,
                              transition_score)
from fhrtwin.plant import steady_state
from fhrtwin.surrogate.net import rollout
from fhrtwin.variables import IDX


@pytest.fixture(scope="module")
def model(original_net):
    return compress_surrogate(original_net, plan=SamplingPlan(n_samples=200, seed=3))


def test_transition_score_shape():
    assert transition_score(1e8, 1e8) == 1.0
    assert transition_score(1e8, 1e8 + 14e6) == pytest.approx(np.exp(-1.0))
    assert transition_score(2e8, 1e8) == transition_score(1e8, 2e8)


@given(st.floats(0, 3e8), st.floats(0, 3e8), st.floats(0, 3e8))
def test_transition_score_bounded_and_monotone(a, b, c):
    s_ab, s_ac = transition_score(a, b), transition_score(a, c)
    assert 0.0 <= s_ab <= 1.0
    if abs(b - a) < abs(c - a):
        assert s_ab >= s_ac


def test_maintenance_guard_thresholds():
    assert maintenance_guard([0.9, 0.5]) is False
    assert maintenance_guard([0.9, 0.19]) is True
    assert maintenance_guard([0.9, 0.2]) is True
    assert maintenance_guard([]) is False


def test_compressed_end_power_matches_fine_rollouts(model, original_net, constants):
    for a, b in ((0.5, 1.0), (1.0, 0.5), (0.7, 0.9), (0.8, 0.8), (0.95, 0.6)):
        x = steady_state(a, constants=constants).x
        fine = rollout(original_net, x, x, np.full(720, b * FULL_POWER))[-1, IDX["Q_RX"]]
        end, _, _, _ = model.predict(b * FULL_POWER, a * FULL_POWER, 1.0, 1.0)
        assert abs(end - fine) < 0.005 * FULL_POWER
    assert model.report["rmse_end_power_W"] < 0.005 * FULL_POWER


def test_compressed_increments_match_fine_scale(model, original_net, constants):
    pp, ps = primary_degradation(sigma_i=0.0), secondary_degradation(sigma_i=0.0)
    hours = np.array([0.9, 0.7, 0.7, 1.0, 0.8]) * FULL_POWER
    x = steady_state(1.0, constants=constants).x
    x2 = x1 = x
    hp, hs = PumpHealth(1.0), PumpHealth(1.0)
    vp_prev, vs_prev = x[IDX["m_P_p"]] / constants["rho_p"], x[IDX["m_P_s"]] / constants["rho_s"]
    for tg in hours:
        traj = rollout(original_net, x2, x1, np.full(720, tg))
        vp = traj[:, IDX["m_P_p"]] / constants["rho_p"]
        vs = traj[:, IDX["m_P_s"]] / constants["rho_s"]
        hp, _ = degrade_series(hp, vp, pp, v_prev=vp_prev)
        hs, _ = degrade_series(hs, vs, ps, v_prev=vs_prev)
        vp_prev, vs_prev = vp[-1], vs[-1]
        x2, x1 = traj[-2], traj[-1]
    _, kp, ks, _ = rollout_compressed(model, hours, FULL_POWER, 1.0, 1.0)
    assert kp[-1] - 1.0 == pytest.approx(hp.K - 1.0, rel=0.05)
    assert ks[-1] - 1.0 == pytest.approx(hs.K - 1.0, rel=0.05)


def test_compression_checks(original_net):
    with pytest.raises(CompressionError):
        compress_surrogate(original_net, plan=SamplingPlan(power_box=(0.6, 1.0)))
    with pytest.raises(CompressionError):
        compress_surrogate(original_net, plan=SamplingPlan(k_range=(1.0, 2.0)))
    with pytest.raises(CompressionError):
        compress_surrogate(original_net, plan=SamplingPlan(n_samples=10))


def test_model_round_trip(model):
    m2 = HourlyTransitionModel.from_dict(json.loads(json.dumps(model.to_dict())))
    a = model.predict(0.8 * FULL_POWER, 0.9 * FULL_POWER, 1.1, 1.2)
    b = m2.predict(0.8 * FULL_POWER, 0.9 * FULL_POWER, 1.1, 1.2)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_sixty_month_rollout_is_fast(model):
    assert model.report["seconds_per_60_months"] < 5.0


def test_fresh_pumps_follow_flat_demand(model):
    d = np.full(1440, 0.9 * FULL_POWER)
    p = plan_period(d, (1.0, 1.0), model)
    assert not p.shutdown and p.maintain == {"p": False, "s": False}
    assert p.targets.size == 720
    assert np.allclose(p.targets, d[:720])


def test_worn_pumps_are_maintained_at_first_boundary(model):
    d = np.full(1440, 0.9 * FULL_POWER)
    p = plan_period(d, (1.15, 1.15), model)
    assert p.shutdown and p.maintain == {"p": True, "s": True}
    assert np.all(p.targets == 0.0)


def test_maintenance_forbidden_now_is_respected(model):
    d = np.full(1440, 0.9 * FULL_POWER)
    p = plan_period(d, (1.15, 1.15), model, maintenance_allowed_now=False)
    assert not p.shutdown
    assert p.horizon_flags[0] == (False, False)


def test_health_floor_forces_maintenance(model):
    d = np.full(1440, 0.9 * FULL_POWER)
    p = plan_period(d, (0.81 * K_ZERO, 0.81 * K_ZERO), model, weights=RewardWeights(maintenance=1e9))
    assert p.forced and p.shutdown


def _swing(n, amp):
    h = np.arange(n)
    return (0.75 + amp * np.sign(np.sin(2 * np.pi * (h + 0.5) / 12))) * FULL_POWER


def test_swing_heavy_demand_wears_more(model):
    # same base demand; the second profile jumps up 20 % every other hour
    base = np.full(720, 0.7 * FULL_POWER)
    spiky = base + 0.2 * FULL_POWER * (np.arange(720) % 2)
    w = RewardWeights(wear=0.0, transition=0.0)
    calm = plan_period(base, (1.0, 1.0), model, w, applied_hours=720)
    swing = plan_period(spiky, (1.0, 1.0), model, w, applied_hours=720)
    eta = lambda p: 1.0 - max(p.reward["K_p_end"], p.reward["K_s_end"]) / K_ZERO
    assert eta(swing) < eta(calm)


@pytest.mark.parametrize("seed", [None, 0, 1, 2])
def test_tracking_weight_is_monotone(model, seed):
    d = _swing(240, 0.2) if seed is None else np.random.default_rng(seed).uniform(0.5, 1.0, 240) * FULL_POWER
    errs = []
    for wt in (0.001, 0.1, 10.0):
        p = plan_period(d, (1.0, 1.0), model, RewardWeights(tracking=wt), applied_hours=240)
        errs.append(p.reward["tracking_error"])
    assert errs[0] >= errs[1] >= errs[2]


def test_plans_are_deterministic_and_in_range(model):
    d = np.random.default_rng(0).uniform(0.3, 1.1, 480) * FULL_POWER
    a = plan_period(d, (1.05, 1.1), model, applied_hours=240)
    b = plan_period(d, (1.05, 1.1), model, applied_hours=240)
    assert np.array_equal(a.horizon_targets, b.horizon_targets) and a.horizon_flags == b.horizon_flags
    on = a.horizon_targets[a.horizon_targets > 0]
    assert on.min() >= 0.5 * FULL_POWER - 1e-6 and on.max() <= FULL_POWER + 1e-6
    json.loads(a.to_json())


def test_dp_grid_is_one_percent():
    lv = CemDpAgent().levels / FULL_POWER
    assert lv.size == 51 and lv[0] == 0.5 and lv[-1] == 1.0


class _Broken:
    def act(self, obs):
        raise RuntimeError("no plan")


class _OutOfRange:
    def act(self, obs):
        return AgentAction(np.full(obs.demand.size, 0.1 * FULL_POWER), [(False, False)] * len(obs.boundaries))


@pytest.mark.parametrize("agent", [_Broken(), _OutOfRange()])
def test_bad_agent_falls_back_to_demand(model, agent):
    d = np.full(1440, 0.8 * FULL_POWER)
    p = plan_period(d, (1.0, 1.0), model, agent=agent)
    assert p.fallback
    assert np.allclose(p.targets, d[:720])


def test_custom_agent_is_used(model):
    class Flat:
        def act(self, obs):
            return AgentAction(np.full(obs.demand.size, 0.7 * FULL_POWER), [(False, False)] * len(obs.boundaries))

    p = plan_period(np.full(1440, 0.9 * FULL_POWER), (1.0, 1.0), model, agent=Flat())
    assert not p.fallback and np.allclose(p.targets, 0.7 * FULL_POWER)


def test_evaluate_plan_accounts_for_maintenance(model):
    obs = PlanningObservation(np.full(48, 0.8 * FULL_POWER), [0, 24], 1.1, 1.1, 0.8 * FULL_POWER, True, model,
                              RewardWeights())
    t = np.full(48, 0.8 * FULL_POWER)
    plain = evaluate_plan(obs, t, [(False, False), (False, False)])
    maint = evaluate_plan(obs, np.r_[t[:24], np.zeros(24)], [(False, False), (True, False)])
    assert plain["maintenance_cost"] == 0.0 and maint["maintenance_cost"] == 20.0
    assert maint["K_p_end"] == 1.0 and maint["K_s_end"] > 1.1
    assert maint["tracking_error"] == pytest.approx(24 * 0.8)


def test_reward_weights_non_negative():
    with pytest.raises(ValueError):
        RewardWeights(wear=-1.0)
    with pytest.raises(ValueError):
        plan_period(np.zeros(10), (1.0, 1.0), None)
