"""Check the reflection geometry of a network's diffusion, simulate it and
balance the adjoint relationship with quadratic test functions.

    python3 demos/reflected_diffusion.py
"""

import numpy as np

from bikeflow import analysis, srbm
from bikeflow.model import DistributionSpec as D, nominal_rates, symmetric_config

cfg = symmetric_config(2, capacity=5, initial_bikes=3, travel_deflect=D.deterministic(1.0))
params = srbm.srbm_params(cfg, nominal_rates(cfg))
print(srbm.verify_reflection_geometry(params).summary())
print("drift", np.round(params.theta, 3))
print("covariance\n", np.round(params.gamma, 3))

path = srbm.simulate_srbm(params, 2e4, 1e-2, seed=0, burn_in=100.0)
est = analysis.estimate_stationary(path, 100.0)
print("stationary means", {k: round(float(v), 3) for k, v in zip(params.labels, est.mean)})
center = 0.5 * (params.lower + params.upper)
worst = max(analysis.quadratic_family(params.dim, center),
            key=lambda f: analysis.bar_residual(path, f).relative)
r = analysis.bar_residual(path, worst)
print(f"largest relative adjoint residual {r.relative:.3f} for f = {worst.name}")
