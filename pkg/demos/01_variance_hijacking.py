"""Why rewards are standardized before they are weighted.

One objective pays 0 or 1 for landing in a region; the other three are
smooth and bounded by 0.05. Weighting first and normalizing after lets the
large-range objective decide every advantage. Standardizing each objective
inside the group first gives every objective its say.

Run with ``python demos/01_variance_hijacking.py``.
"""
from __future__ import annotations

import numpy as np

from apexlab import dsan
from apexlab.config import RunConfig
from apexlab.flowmatch import FlowPolicyParams
from apexlab.grpo import RolloutStreams, collect_group
from apexlab.harness import build_setup

# %% one group of 24 rollouts from the untrained policy
cfg = RunConfig()
setup = build_setup(cfg)
params = FlowPolicyParams.zeros()
w = np.full(cfg.K, 1 / cfg.K)

for ctx in setup.contexts:
    g = collect_group(params, ctx, cfg.G, setup.grid, setup.sched, setup.specs, RolloutStreams(0, 0))
    if g.rewards[:, 0].std() > 0:
        break
R = g.rewards
print("per-objective std inside the group:", np.round(R.std(axis=0), 4))

# %% weight then normalize vs normalize then weight
naive = dsan.naive_weight_then_normalize(R, w)
two_stage = dsan.dsan_advantages(R, w)
z = dsan.stage1_standardize(R)

print("\ncorrelation of the final advantage with each standardized objective")
print("objective    naive   two-stage")
for k in range(cfg.K):
    print(f"{k:>9}  {np.corrcoef(naive, z[:, k])[0, 1]:7.3f}  {np.corrcoef(two_stage.final, z[:, k])[0, 1]:9.3f}")

# %% the scalar fed to the naive normalizer is almost a copy of objective 0
share = (w[0] ** 2 * R[:, 0].var()) / (R @ w).var()
print(f"\nshare of the weighted-sum variance from objective 0: {share:.3f}")
print(f"pre-normalization variance after stage one: {two_stage.pre_norm_variance:.3f}")
