"""Numba vs numpy timing for the two hot kernels.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Each kernel is
called once to trigger compilation, then timed over ``repeat`` calls; the
results of both paths are compared so a speed-up never hides a wrong answer.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from esgrid import distopt
from esgrid import transmission as tx
from esgrid.aggregator import operating_region
from esgrid.grid import bundled_case
from esgrid.powerflow import fit_loss_model


def _best_of(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_agents(name: str, repeat: int, steps: int) -> tuple[float, float, float]:
    case = bundled_case(name)
    regions = {b: operating_region(a) for b, a in case.aggregators.items()}
    prob = distopt.build_problem(case, 0.01, fit_loss_model(case), regions)
    swarm = distopt.init_agents(prob)
    dt = distopt.stable_step(prob, swarm)
    fast = _best_of(lambda: distopt.agent_step(prob, swarm, dt, steps, use_numba=True), repeat)
    slow = _best_of(lambda: distopt.agent_step(prob, swarm, dt, steps, use_numba=False), repeat)
    a = distopt.agent_step(prob, swarm, dt, steps, use_numba=True)
    b = distopt.agent_step(prob, swarm, dt, steps, use_numba=False)
    return fast, slow, float(np.max(np.abs(a.w - b.w)))


def bench_swing(repeat: int, horizon: float) -> tuple[float, float, float]:
    case = bundled_case("case9")
    model = tx.build_model(case)
    p_d = np.array([-case.buses[i].p_nominal for i in model.load])
    p_gen = np.array([case.buses[i].p_nominal for i in model.gen])
    state, _ = tx.equilibrium(model, p_gen, p_d)
    p_d = p_d.copy()
    p_d[1] += 0.2
    state = replace(state, p_d=p_d)
    n = int(round(horizon / 0.01))

    def run(flag):
        s = state
        for _ in range(n):
            s = tx.step_swing(s, model, 0.01, use_numba=flag)
        return s

    fast = _best_of(lambda: run(True), repeat)
    slow = _best_of(lambda: run(False), repeat)
    return fast, slow, float(np.max(np.abs(run(True).pack() - run(False).pack())))


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--agent-steps", type=int, default=2000)
    p.add_argument("--swing-horizon", type=float, default=2.0)
    args = p.parse_args(argv)

    print(f"{'kernel':<22}{'numba [s]':>12}{'numpy [s]':>12}{'speed-up':>10}{'max diff':>12}")
    rows = [(f"agents {n}", *bench_agents(n, args.repeat, args.agent_steps)) for n in ("feeder7", "case15", "case14")]
    rows.append(("swing case9", *bench_swing(args.repeat, args.swing_horizon)))
    for label, fast, slow, diff in rows:
        print(f"{label:<22}{fast:>12.4f}{slow:>12.4f}{slow / fast:>9.1f}x{diff:>12.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
