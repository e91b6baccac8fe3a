"""Global plans: ramp, Lyapunov halves, phase rotation, local hops, unramp.

Run: python3 demos/04_global_plans_and_gates.py [--hadamard]

The Hadamard gate takes several minutes at K = 16; the other runs take
well under a minute each.
"""
# %%
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from simulcontrol.pipeline import Scenario, gate_realization, load_scenario, plan_global

logging.basicConfig(level=logging.INFO, format="%(message)s")
warnings.simplefilter("ignore", RuntimeWarning)  # condition failures at truncation are only warnings
here = Path(__file__).parent


def show(plan):
    for row in plan.segment_table():
        print(f"  {row['purpose']:9s} t0 = {row['t_start']:10.3f}  T = {row['duration']:9.3f}  {row['note']}")
    print(f"  total T = {plan.total_T:.3f}, achieved H3 error = {plan.achieved_error:.3e}")


# %% Two-mode superposition to the ground state of the free well.
t0 = time.perf_counter()
show(plan_global(load_scenario(here / "scenarios" / "two_mode.yaml")))
print(f"  ({time.perf_counter() - t0:.1f}s)")

# %% Phase gate diag(e^{0.7i}, 1) on the two lowest free modes.
t0 = time.perf_counter()
plan = gate_realization(np.diag([np.exp(0.7j), 1.0]), Scenario(K=16))
show(plan)
print("  fidelities", plan.info["fidelities"], f"({time.perf_counter() - t0:.1f}s)")

# %% Exchange of the two lowest levels of V = x.
t0 = time.perf_counter()
show(plan_global(load_scenario(here / "scenarios" / "swap.yaml")))
print(f"  ({time.perf_counter() - t0:.1f}s)")

# %%
if "--hadamard" in sys.argv:
    t0 = time.perf_counter()
    plan = gate_realization(np.array([[1, 1], [1, -1]]) / np.sqrt(2), Scenario(K=16))
    show(plan)
    print("  fidelities", plan.info["fidelities"], f"({time.perf_counter() - t0:.1f}s)")
