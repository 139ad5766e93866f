"""Adaptive weighting against a fixed uniform mixture, scored by hypervolume.

Both runs share the seed and every sampling stream, so the only difference
is how the four rewards are combined into one advantage. The report shows
the windowed cumulative hypervolume above the untrained policy's mean
reward, and the single-box improvement volume of the last window.

Run with ``python demos/03_hypervolume_comparison.py [steps]``.
"""
from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from apexlab.config import RunConfig
from apexlab.harness import compare, run
from apexlab.pareto import BENCHMARK_ROWS, benchmark_product_hv

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# %% the improvement indicator on four stored benchmark rows
print("single-box improvement volume of stored benchmark rows")
for name in BENCHMARK_ROWS:
    print(f"  {name:<15} {benchmark_product_hv(name):.3e}")

# %% train both methods
with tempfile.TemporaryDirectory() as tmp:
    dirs = [run(RunConfig(mode=m, steps=steps), Path(tmp) / m) for m in ("apex", "static")]
    report = compare(dirs)

# %% report
print()
print(report.to_text())
