"""Time the hot kernels with numba on and off.

    python benchmarks/bench_kernels.py            # both paths, side by side
    python benchmarks/bench_kernels.py --worker   # current path only (JSON out)

The numba switch is read at import time, so each path runs in its own
subprocess with FHRTWIN_DISABLE_NUMBA set accordingly.
"""
import json
import os
import subprocess
import sys
import time


def _best(fn, repeat=3):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker():
    import numpy as np

    from fhrtwin._jit import USE_NUMBA
    from fhrtwin.constants import default_constants
    from fhrtwin.enkf import NoiseSpec, augmented_mean, init_ensemble, predict_many
    from fhrtwin.health import degrade_series, new_pump_life, primary_degradation
    from fhrtwin.models import default_net
    from fhrtwin.plant import simulate, steady_state
    from fhrtwin.runtime.scenario import state_noise_scale
    from fhrtwin.surrogate.net import rollout, surrogate_step_batch

    c = default_constants()
    net = default_net("original", c)
    st = steady_state(1.0, constants=c)
    x = st.x
    full = c.full_power
    xs = np.repeat(x[None], 1000, axis=0)
    targets = np.full(720, 0.9 * full)
    pp = primary_degradation()
    V = np.full(100_000, pp.rated_flow)
    rng = np.random.default_rng(0)
    noise = NoiseSpec(1e-15, 0.0, 1e-8, 0.0, state_scale=state_noise_scale(c))

    def ensemble_hour():
        ens = init_ensemble(augmented_mean(x, x, np.zeros(0)), noise, 20, np.random.default_rng(1), [], net)
        predict_many(ens, net, targets, noise, np.random.default_rng(2))

    res = {
        "surrogate_step_batch[1000]": _best(lambda: surrogate_step_batch(net, xs, xs, full)),
        "rollout[1440]": _best(lambda: rollout(net, x, x, np.full(1440, 0.8 * full))),
        "plant_simulate[720]": _best(lambda: simulate(st, targets, constants=c), repeat=2),
        "degrade_series[1e5]": _best(lambda: degrade_series(new_pump_life(pp), V, pp, rng)),
        "ensemble_hour[20x720]": _best(ensemble_hour, repeat=2),
    }
    print(json.dumps({"numba": USE_NUMBA, "seconds": res}))


def main():
    rows = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, FHRTWIN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--worker"], env=env, capture_output=True, text=True,
                             check=True)
        rows[label] = json.loads(out.stdout.strip().splitlines()[-1])["seconds"]
    print(f"{'kernel':28s} {'numba (s)':>12s} {'numpy (s)':>12s} {'speedup':>9s}")
    for k in rows["numba"]:
        a, b = rows["numba"][k], rows["numpy"][k]
        print(f"{k:28s} {a:12.5f} {b:12.5f} {b / a:9.1f}x")


if __name__ == "__main__":
    if "--worker" in sys.argv:
        worker()
    else:
        main()
