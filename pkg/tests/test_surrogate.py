import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhrtwin.demand import daily_load_follow
from fhrtwin.plant import steady_state
from fhrtwin.surrogate.net import (Block, SurrogateError, SurrogateNet, WiringError, _batch_step_nb, _batch_step_np,
                                   _layout_args, rollout, surrogate_step, surrogate_step_batch, xenon_update)
from fhrtwin.surrogate.training import (ORIGINAL_WIRING, SHOCK_WIRING, TEMPS, build_shock_surrogate, emulator_run,
                                        nominal_training_set)
from fhrtwin.surrogate.varmax import VarmaxFitError, VarmaxParams, spectral_radius
from fhrtwin.variables import IDX, N_STATE, STATE_IDS

FULL = 280e6


@pytest.fixture(scope="module")
def held_out_day():
    prof = daily_load_follow(24, np.random.default_rng(99), 0.6, 1.0, 0.03)
    return emulator_run(prof, start_fraction=float(prof[0]))


def _mape(pred, truth):
    return 100 * np.mean(np.abs(pred / truth - 1))


def test_every_variable_has_one_producer(original_net, shock_net):
    for net in (original_net, shock_net):
        produced = [v for b in net.blocks for v in b.outputs]
        assert len(produced) == len(set(produced))
        assert len(net.blocks) == (7 if net is original_net else 6)


def test_cyclic_wiring_rejected(original_net):
    b0, b1 = original_net.blocks[:2]
    # block I reading Q_RX at lag 0 before block II has produced it
    bad = Block(b0.name, b0.outputs, ((b0.inputs[0][0], 0), ("Q_RX", 0), ("N_Xe", 1)), b0.params)
    with pytest.raises(WiringError):
        SurrogateNet((bad,) + original_net.blocks[1:], original_net.hooks, original_net.mode, original_net.scale,
                     original_net.input_scale, original_net.pump_r)


def test_missing_producer_rejected(original_net):
    with pytest.raises(WiringError):
        SurrogateNet(original_net.blocks[:-1], original_net.hooks, original_net.mode, original_net.scale,
                     original_net.input_scale, original_net.pump_r)


def test_modes(original_net, shock_net):
    assert original_net.mode == "normalized"
    assert shock_net.mode == "raw"
    assert np.all(shock_net.scale == 1.0)


def test_blocks_are_stable(original_net, shock_net):
    for net in (original_net, shock_net):
        for b in net.blocks:
            assert spectral_radius(b.params) < 1.0, b.name


def test_full_power_fixed_point_drift(original_net, shock_net, full_state):
    x = full_state.x
    for net in (original_net, shock_net):
        traj = rollout(net, x, x, np.full(720, FULL))
        rel = np.abs(traj[-1] - x) / np.maximum(np.abs(x), 1e-12)
        rel[IDX["t"]] = 0.0
        # reactivities sit at zero; compare them on an absolute scale
        for v in ("rho_m", "rho_c", "rho_f", "rho_cr"):
            rel[IDX[v]] = abs(traj[-1, IDX[v]] - x[IDX[v]]) / 1e-3
        assert rel.max() < 1e-3, STATE_IDS[int(np.argmax(rel))]


def test_free_run_gate_on_held_out_day(original_net, held_out_day):
    run = held_out_day
    pred = rollout(original_net, run.states[0], run.states[1], run.targets[2:])
    assert _mape(pred[:, IDX["Q_RX"]], run.states[2:, IDX["Q_RX"]]) < 1.0


def test_one_step_within_training_residual(original_net, held_out_day):
    run = held_out_day
    S = run.states
    errs = []
    for k in range(2, 2 + 720 * 4, 37):
        x = surrogate_step(original_net, S[k - 2], S[k - 1], run.targets[k])
        errs.append(abs(x[IDX["Q_RX"]] / S[k, IDX["Q_RX"]] - 1))
    assert max(errs) < 0.01


def test_clock_advances(original_net, full_state):
    x = full_state.x
    out = surrogate_step(original_net, x, x, FULL)
    assert out[IDX["t"]] == pytest.approx(x[IDX["t"]] + 5.0)


def test_noise_free_step_is_replayable(original_net, full_state):
    x = full_state.x
    a = surrogate_step(original_net, x, x, 0.8 * FULL)
    b = surrogate_step(original_net, x, x, 0.8 * FULL)
    assert np.array_equal(a, b)


def test_missing_lag_is_an_error(original_net, full_state):
    with pytest.raises(ValueError):
        surrogate_step(original_net, None, full_state.x, FULL)
    with pytest.raises(ValueError):
        surrogate_step(original_net, full_state.x[:10], full_state.x, FULL)


def test_divergence_reported(original_net, full_state):
    th = original_net.theta().copy()
    th[:] = 1e300
    with pytest.raises(SurrogateError):
        surrogate_step(original_net, full_state.x, full_state.x, FULL, theta=th)


def test_numba_and_numpy_kernels_agree(original_net, full_state):
    r = np.random.default_rng(0)
    n_m = 6
    x1 = full_state.x * (1 + 1e-3 * r.normal(size=(n_m, N_STATE)))
    x2 = full_state.x * (1 + 1e-3 * r.normal(size=(n_m, N_STATE)))
    th = np.repeat(original_net.theta()[None], n_m, axis=0)
    ne = original_net.layout.n_eps
    ep, en = 1e-4 * r.normal(size=(n_m, ne)), 1e-4 * r.normal(size=(n_m, ne))
    kp, ks = np.full(n_m, 1.2), np.full(n_m, 1.1)
    outs = []
    for kern in (getattr(_batch_step_nb, "py_func", _batch_step_nb), _batch_step_np):
        out = np.empty_like(x1)
        kern(x2, x1, 0.9 * FULL, th, ep, en, kp, ks, *_layout_args(original_net), out)
        outs.append(out)
    if hasattr(_batch_step_nb, "py_func"):
        out = np.empty_like(x1)
        _batch_step_nb(x2, x1, 0.9 * FULL, th, ep, en, kp, ks, *_layout_args(original_net), out)
        outs.append(out)
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], rtol=1e-11, atol=1e-9)


def test_batch_matches_single(original_net, full_state):
    x = full_state.x
    xs = np.vstack([x, x * 1.001])
    batch = surrogate_step_batch(original_net, xs, xs, 0.7 * FULL)
    for i in range(2):
        np.testing.assert_allclose(batch[i], surrogate_step(original_net, xs[i], xs[i], 0.7 * FULL), rtol=1e-14)


def test_checkpoint_round_trip(tmp_path, original_net, full_state):
    p = tmp_path / "net.json"
    original_net.save(p)
    back = SurrogateNet.load(p)
    x = full_state.x
    assert np.array_equal(surrogate_step(back, x, x, 0.6 * FULL), surrogate_step(original_net, x, x, 0.6 * FULL))
    assert back.metadata["theta_A"] == original_net.metadata["theta_A"]


def test_theta_write_back(original_net):
    th = original_net.theta()
    names = original_net.theta_names()
    assert len(names) == th.size == original_net.layout.n_theta
    idx = original_net.theta_index([names[3]])
    th2 = th.copy()
    th2[idx] += 0.5
    assert original_net.with_theta(th2).theta()[idx[0]] == pytest.approx(th[idx[0]] + 0.5)
    with pytest.raises(KeyError):
        original_net.theta_index(["nope"])


# xenon physics


def test_xenon_zero_is_absorbing():
    assert xenon_update(0.0, 0.0, 0.0, 3600.0)[:2] == (0.0, 0.0)


def _xenon_rates(n_i, n_xe, power, c):
    from fhrtwin.surrogate.net import H_FLUX, H_GAMI, H_GAMX, H_LAMI, H_LAMX, H_NU, H_Q0, H_SIGX, _hook_constants

    h = _hook_constants(c)
    phi = h[H_FLUX] * power / h[H_Q0]
    prod = h[H_SIGX] * phi / h[H_NU]
    di = h[H_GAMI] * prod - h[H_LAMI] * n_i
    dx = h[H_GAMX] * prod + h[H_LAMI] * n_i - (h[H_LAMX] + h[H_SIGX] * phi) * n_xe
    return di, dx


@pytest.mark.parametrize("p", [0.5, 0.8, 1.0])
def test_xenon_equilibrium_is_stationary(p, constants, full_state):
    x = steady_state(p, constants=constants).x
    n_i, n_xe = x[IDX["N_I"]], x[IDX["N_Xe"]]
    di, dx = _xenon_rates(n_i, n_xe, p * FULL, constants)
    # relative to the decay flux of each species (about 1e-5 per second)
    assert abs(di) < 1e-12 * n_i and abs(dx) < 1e-12 * n_xe
    ni2, nx2, rho = xenon_update(n_i, n_xe, p * FULL, 3600.0, constants)
    assert ni2 == pytest.approx(n_i, rel=1e-9) and nx2 == pytest.approx(n_xe, rel=1e-9)
    assert rho == -nx2


def test_xenon_peak_after_power_drop(constants):
    x = steady_state(1.0, constants=constants).x
    n_i, n_xe = x[IDX["N_I"]], x[IDX["N_Xe"]]
    # fine explicit integration as the oracle
    dt = 1.0
    ni, nx = n_i, n_xe
    fine = []
    for _ in range(40 * 3600):
        di, dx = _xenon_rates(ni, nx, 0.5 * FULL, constants)
        ni, nx = ni + dt * di, nx + dt * dx
        fine.append(nx)
    fine = np.asarray(fine)
    ni2, nx2 = n_i, n_xe
    exact = []
    for _ in range(40):
        ni2, nx2, _ = xenon_update(ni2, nx2, 0.5 * FULL, 3600.0, constants)
        exact.append(nx2)
    exact = np.asarray(exact)
    np.testing.assert_allclose(exact, fine[3599::3600], rtol=1e-3)
    assert exact.max() > n_xe * 1.01  # transient peak
    assert exact[-1] < exact.max()


def test_xenon_rejects_bad_inputs():
    with pytest.raises(ValueError):
        xenon_update(-1.0, 0.0, FULL, 5.0)
    with pytest.raises(ValueError):
        xenon_update(math.nan, 0.0, FULL, 5.0)


# shock-adapted network


def test_shock_net_needs_shock_data():
    runs = nominal_training_set(n_runs=2, hours=3)
    with pytest.raises(VarmaxFitError, match="shock"):
        build_shock_surrogate(runs)


def test_shock_net_wiring(shock_net):
    first = shock_net.blocks[0]
    assert first.outputs == ("m_P_s",)
    for b in shock_net.blocks[1:]:
        assert ("m_P_s", 0) in b.inputs
    assert [b.name for b in shock_net.blocks] == [w[0] for w in SHOCK_WIRING]


def test_shock_net_matches_original_on_nominal_replay(original_net, shock_net, held_out_day):
    run = held_out_day
    a = rollout(original_net, run.states[0], run.states[1], run.targets[2:])[:, IDX["Q_RX"]]
    b = rollout(shock_net, run.states[0], run.states[1], run.targets[2:])[:, IDX["Q_RX"]]
    truth = run.states[2:, IDX["Q_RX"]]
    assert _mape(b, truth) < 1.0
    assert _mape(b, a) < 1.0


def test_shock_replay_with_measured_flow_shifts_downstream(shock_net):
    k = 720
    shocked = emulator_run([0.8] * 3, shock=(k, 5.0))
    nominal = emulator_run([0.8] * 3)

    def corrected(run):
        S, T = run.states, run.targets
        x2, x1 = S[0].copy(), S[1].copy()
        for j in range(2, len(T)):
            x = surrogate_step(shock_net, x2, x1, T[j])
            if j >= k + 2:
                x[IDX["m_P_s"]] = S[j, IDX["m_P_s"]]
            x2, x1 = x1, x
        return x1

    end_s, end_n = corrected(shocked), corrected(nominal)
    moved = 0
    for v in TEMPS + ("T_sg_out",):
        truth = shocked.states[-1, IDX[v]] - nominal.states[-1, IDX[v]]
        twin = end_s[IDX[v]] - end_n[IDX[v]]
        if abs(truth) > 0.5:
            assert np.sign(twin) == np.sign(truth), v
            assert abs(twin - truth) < 0.25 * abs(truth), v
            moved += 1
    assert moved >= 2
