"""Simulate a three-station network, check its bookkeeping and print
steady-state measures.

    python3 demos/network_run.py
"""

import numpy as np

from bikeflow import analysis, des
from bikeflow.model import DistributionSpec as D, nominal_rates, symmetric_config

cfg = symmetric_config(3, capacity=6, initial_bikes=4, travel_first=D.gamma(2.0, 0.5))
tr = des.simulate(cfg, 20_000, seed=1)
print(f"{tr.n_events} events over horizon {tr.horizon:g}")

# conservation, balance equations and the decomposition into netput plus pushes
print("bikes in system:", set(tr.Q.sum(axis=1).tolist()))
print("flow balance discrepancy:", des.flow_balance_check(tr))
print("decomposition residual: %.2e" % des.pathwise_decomposition_check(tr, cfg, nominal_rates(cfg)))
print("complementarity violations:", des.complementarity_check(tr))

est = analysis.estimate_stationary(tr, burn_in=1000)
rep = analysis.performance_measures(est, analysis.boundary_measure(tr, 1000), tr.idx)
for j in range(cfg.N):
    print(f"station {j}: P(empty)={rep.empty_prob[j]:.3f} P(full)={rep.full_prob[j]:.3f} "
          f"mean bikes={rep.mean_queue[j]:.2f} deflections/time={rep.deflection_rate[j]:.4f}")
rates, _, _ = des.long_run_rates(tr)
print("long-run service rates:", np.round(rates, 3))
