import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from jointprune.arch import (BLOCK_FIRST, MAX_RATIO, NetworkSpec, PruningAction,
                             residual_net)


def random_spec(rng: np.random.Generator, max_size: int = 12, head_ids=()) -> NetworkSpec:
    """A small valid residual spec with a random stem and random groups."""
    in_ch = int(rng.integers(1, 4))
    size = (int(rng.integers(3, max_size + 1)), int(rng.integers(3, max_size + 1)))
    stem = [(int(rng.choice([1, 3, 5])), int(rng.integers(1, 9)), int(rng.integers(1, 3)))
            for _ in range(int(rng.integers(0, 3)))]
    groups = [(int(rng.choice([1, 3])), int(rng.integers(1, 9)), int(rng.integers(1, 3)),
               int(rng.integers(0, 4)), int(rng.integers(1, 7)))
              for _ in range(int(rng.integers(0 if stem else 1, 4)))]
    return residual_net(in_ch, size, stem, groups, head_ids)


def random_action(spec: NetworkSpec, rng: np.random.Generator, p_prune: float = 0.4,
                  p_zero: float = 0.15) -> PruningAction:
    """Random valid action: pruned blocks, kept blocks, some exact-zero ratios."""
    out = []
    i = 0
    while i < spec.T:
        if spec.layers[i].kind == BLOCK_FIRST and rng.random() < p_prune:
            out += [1, 1]
            i += 2
            continue
        out.append(0.0 if rng.random() < p_zero else float(rng.uniform(0.0, MAX_RATIO)))
        i += 1
    return PruningAction(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
