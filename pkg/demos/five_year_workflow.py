"""Five-year workflow without measurement uncertainty.

The sample reference is annual; taking every fifth year gives a five-year
series. Chains are run in two pieces to show continuation, then projected.

    python3 demos/five_year_workflow.py [output_dir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

import tfrcast
from tfrcast import RunConfig, TimeGrid
from tfrcast.types import ReferenceSeries

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "five_year"

annual = tfrcast.load_reference(tfrcast.sample_data_path("reference"))
five = {}
for code, s in annual.items():
    keep = np.arange(0, s.grid.n_periods, 5)
    five[code] = ReferenceSeries(code, TimeGrid(s.grid.start_year, 5, keep.size), s.values[keep])

cfg = RunConfig(output_dir=str(out), n_chains=2, iters=800, burnin=300, seed=5)
store = tfrcast.run(cfg, None, five)
store = tfrcast.continue_run(store, 700)
print(f"{store.meta['iters']} iterations per chain in {store.root}")

for code, s in five.items():
    m = tfrcast.phase_markers(s.values)
    print(f"country {code}: Phase II starts at index {m.tau}, Phase III at {m.lam}")

ts = tfrcast.predict(store, 2100, burnin=300, n_traj=500)
for code in ts.trajectories:
    print(f"\ncountry {code}\n{tfrcast.trajectory_table(ts, code).round(2)}")
