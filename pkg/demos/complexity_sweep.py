"""
Steps needed for a target accuracy
==================================

For each schedule family, pick T so the initialization error is eps/2 and
search the smallest K whose bound reaches eps. The log-log slope of K against
1/eps is the empirical iteration complexity.
"""

import numpy as np

from pfode.bounds import BoundInputs, min_K_for_accuracy
from pfode.schedules import VEExponential, VPConstant, VPLinear
from pfode.targets import GaussianTarget

eps_grid = np.array([0.2, 0.1, 0.05, 0.02])
target = GaussianTarget.isotropic(4)

families = {
    "vp_const b=2": VPConstant(2.0),
    "vp_linear": VPLinear(1.0, 0.1),
    "ve_exp": VEExponential(1.0, 1.0),
}

for name, sched in families.items():
    inputs = BoundInputs.from_target(target, sched)
    results = [min_K_for_accuracy(inputs, eps, K_max=10**8) for eps in eps_grid]
    Ks = [r.K for r in results]
    print(name, Ks)
    if all(k is not None for k in Ks):
        slope = np.polyfit(np.log(1 / eps_grid), np.log(Ks), 1)[0]
        print(f"  slope {slope:.2f}")

# VP schedules land near slope 1 plus a log correction; VE-exponential is
# close to 3, so it needs orders of magnitude more steps at small eps
