"""Walk through how one pruning action turns into masks and a FLOPs count.

Run with ``python3 demos/flops_and_masks.py``.
"""
import numpy as np

from jointprune.arch import (PruneMask, PruningAction, coupled_sets, enforce_group_constraint,
                             flops_by_layer, reference_spec, resolve_mask, total_flops)

spec = reference_spec()
print(f"reference net: {spec.T} layers, block entries at {sorted(spec.s_frb)}")
for l in spec.layers:
    print(f"  {l.id:2d} {l.kind:12s} {l.kernel}x{l.kernel} {l.in_ch:3d}->{l.out_ch:3d} "
          f"@ {l.in_h}x{l.in_w}")

full = PruneMask.identity(spec)
print("unpruned FLOPs:", total_flops(spec, full))

# prune the second block outright, thin everything else
raw = PruningAction([0.3, 0.5, 0.2, 0.1, 0.6, 0.5, 0.4, 1, 1, 0.2, 0.7])
print("\nraw action:    ", raw.to_list())
print("coupled sets:  ", coupled_sets(spec, raw))
action = enforce_group_constraint(spec, raw)
print("after coupling:", action.to_list())

# rank channels by the magnitude of made-up BN scales
rng = np.random.default_rng(0)
gammas = [np.abs(rng.standard_normal(l.out_ch)) for l in spec.layers]
mask = resolve_mask(spec, action, gammas)
print("\nkept channels per layer:", mask.kept_counts())
per_layer = flops_by_layer(spec, mask)
for l, f0, f1 in zip(spec.layers, flops_by_layer(spec, full), per_layer):
    print(f"  layer {l.id:2d}: {f0:>10,d} -> {f1:>10,d}")
print(f"total: {sum(per_layer):,d} ({100 * (1 - sum(per_layer) / total_flops(spec, full)):.1f}% fewer)")
