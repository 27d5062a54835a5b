"""
Regenerate the bundled sample data in ``src/tghrf/data``.

A 15 x 15 grid observed on 6 days: a TGH random field (g = 0.3, h = 0.1,
range 2 cells) on top of a linear trend in two site covariates.  A few
observations are removed so that the missing-value path is exercised.
"""

from pathlib import Path

import numpy as np

from tghrf import io
from tghrf.field import GridSpec
from tghrf.kernels import ExpKernelParams
from tghrf.simgen import SimConfig, simulate_tgh_field
from tghrf.tgh import TghParams

OUT = Path(__file__).resolve().parents[1] / "src" / "tghrf" / "data"
SEED = 7

grid = GridSpec((0.0, 0.0), 1.0, 15, 15)
xy = grid.coords()
rng = np.random.default_rng(SEED)
elevation = 5.0 + 0.4 * xy[:, 0] + rng.gamma(2.0, 1.0, len(xy))  # skewed, positive
green = rng.uniform(0.0, 1.0, len(xy))

cfg = SimConfig(grid, TghParams(0.0, 1.0, 0.3, 0.1), ExpKernelParams.unit(2.0), SEED, reps=6)
values = np.array([20.0 + 1.5 * np.log(elevation) - 2.0 * green + f.values
                   for f in simulate_tgh_field(cfg)])
drop = rng.choice(values.size, 12, replace=False)
values.flat[drop] = np.nan

io.write_field_csv(OUT / "sample_field.csv", xy, values, seed=SEED,
                   config={"grid": "15x15", "g": 0.3, "h": 0.1, "r": 2.0, "days": 6})
io.write_csv(OUT / "sample_covariates.csv", ["x", "y", "elevation", "green"],
             [[x, y, e, v] for (x, y), e, v in zip(xy, elevation, green)], seed=SEED)
print(f"wrote {OUT}")
