"""Sample pruning actions from an untrained controller and score them.

Shows the three search modes side by side, plus the discrete ratio grid.
"""
import math

import numpy as np

from jointprune.arch import reference_spec
from jointprune.controller import ControllerConfig, init_params, sample_action, score_action

spec = reference_spec()
rng = np.random.default_rng(1)

for ratio_mode in ("continuous", "discrete"):
    for search_mode in ("joint", "block-only", "channel-only"):
        cfg = ControllerConfig(ratio_mode=ratio_mode, search_mode=search_mode)
        params = init_params(spec, cfg, rng)
        action, trace = sample_action(params, spec, rng)
        shown = ["P" if x == 1 and isinstance(x, int) else f"{x:.2f}" for x in action.to_list()]
        print(f"{ratio_mode:10s} {search_mode:12s} {' '.join(shown)}")
        print(f"{'':23s} log p = {trace.log_prob:.3f}, rescored {score_action(params, spec, action):.3f}")

# "rescored" differs for continuous ratios: the sample was drawn at the raw
# Gaussian value, the stored action holds the clipped one

# the policy starts near uniform over block decisions
cfg = ControllerConfig()
params = init_params(spec, cfg, rng)
pruned = [sum(a.block_pruned(i) for i in sorted(spec.s_frb))
          for a, _ in (sample_action(params, spec, rng) for _ in range(400))]
print(f"\nmean pruned blocks per action: {np.mean(pruned):.2f} of {len(spec.s_frb)}")
