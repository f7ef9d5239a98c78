"""Regenerate ``welllog_standin.txt``.

The raw well-log series is not distributed here.  The stand-in is 4000
points simulated from the Example-2 model at its default parameters, with
25 isolated spikes added to mimic the outliers that are removed before
analysis.
"""

from pathlib import Path

import numpy as np

from dpmcmc.model import simulate
from dpmcmc.models import example2, example2_theta

T, SPIKES, SEED = 4000, 25, 2024

rng = np.random.default_rng(SEED)
y = simulate(example2(), example2_theta(), T, rng).observations[:, 0]
idx = rng.choice(T, SPIKES, replace=False)
y[idx] += rng.choice([-1.0, 1.0], SPIKES) * rng.uniform(25.0, 40.0, SPIKES)
np.savetxt(Path(__file__).with_name("welllog_standin.txt"), y, fmt="%.6f")
