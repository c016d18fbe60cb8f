"""Run the REINFORCE search against a cheap synthetic landscape.

The landscape has a known best action, so progress is easy to read off.
"""
import numpy as np

from jointprune.arch import PruningAction, reference_spec
from jointprune.child.evaluator import Landscape
from jointprune.controller import ControllerConfig
from jointprune.rl import RewardConfig, SearchConfig, SearchState, best_record, run_search

spec = reference_spec()
optimum = PruningAction([0.2, 0.5, 1, 1, 0.1, 0.5, 0.3, 0.0, 0.3, 1, 1])
land = Landscape(spec, optimum, tuple([1.0] * spec.T), base_loss=0.2)

cfg = SearchConfig(episodes=310, reward=RewardConfig(lam=1e4),
                   controller=ControllerConfig(ratio_mode="discrete"))
records = run_search(spec, land, cfg, SearchState.fresh(spec, cfg, seed=0))

rewards = np.array([r.reward for r in records])
for lo in range(0, len(rewards), 62):
    print(f"episodes {lo:3d}-{lo + 61:3d}: mean reward {rewards[lo:lo + 62].mean():+.3f}")
best = best_record(records)
print(f"\nbest episode {best.episode}: reward {best.reward:+.3f}")
print("best action:   ", best.action)
print("planted optimum", optimum.to_list())
