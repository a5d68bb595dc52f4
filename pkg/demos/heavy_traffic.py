"""Scale a two-station network up and watch the fluid and diffusion limits
take hold.

    python3 demos/heavy_traffic.py
"""

import numpy as np

from bikeflow import analysis, scaling
from bikeflow.model import DistributionSpec as D, symmetric_config

law = D.exponential(1 / 8)
fam = scaling.ScalingFamily(symmetric_config(2, capacity=12, initial_bikes=8, arrival=law,
                                             travel_first=law, travel_deflect=law),
                            target_drift=[-1.0, -1.0])
tab = scaling.fluid_limit_diagnostic(fam, [1, 16, 256], 5.0, 10, 0)
print("median sup |B(nt)/n - t| per coordinate")
for n, row in zip(tab.ns, tab.busy_dev):
    print(f"  n={n:4d}", np.round(row, 3))

# a bursty network is far from its diffusion limit at small n
var = D.gamma(1.0, 4.0)
fam = scaling.ScalingFamily(symmetric_config(2, capacity=12, initial_bikes=8, arrival=var,
                                             travel_first=var,
                                             travel_deflect=D.deterministic(1.0)))
tab = analysis.diffusion_limit_diagnostic(fam, [64, 256, 1024], 5.0, 100, 0,
                                          srbm_paths=1000, dt=1e-2)
print("KS distance of Q(nT)/sqrt(n) to the reflected diffusion at T=5")
for n, row in zip(tab.ns, tab.ks):
    print(f"  n={n:4d} median={np.median(row):.3f}", np.round(row, 3))
