"""How the adaptive weights move during training.

Trains the full method for a few hundred steps and prints, every 50
steps, the three priority factors and the resulting weights. Learning
potential stays close to uniform because it is computed from standardized
gradients, so the weights are mostly steered by conflict and by how far
each objective is from its utopia value.

Run with ``python demos/02_priority_weights.py [steps]``.
"""
from __future__ import annotations

import sys
import tempfile

import numpy as np

from apexlab.config import RunConfig
from apexlab.harness import load_records, run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200

# %% train
with tempfile.TemporaryDirectory() as tmp:
    records = load_records(run(RunConfig(mode="apex", steps=steps), tmp))

# %% factor table
fmt = lambda v: " ".join(f"{x:5.3f}" for x in v)
print(f"{'step':>5}  {'lp':^23}  {'cp':^23}  {'pn':^23}  {'weights':^23}")
for r in records[::50] + [records[-1]]:
    print(f"{r['step']:>5}  {fmt(r['lp'])}  {fmt(r['cp'])}  {fmt(r['pn'])}  {fmt(r['weights'])}")

# %% how far the weights ever drift from uniform
W = np.array([r["weights"] for r in records])
print("\nmax |w - 1/K| over the run:", np.round(np.abs(W - 0.25).max(axis=0), 4))
