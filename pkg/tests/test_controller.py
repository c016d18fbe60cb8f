import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_spec
from jointprune.arch import (MAX_RATIO, PRUNE, PruningAction, check_action, is_block_choice,
                             reference_spec, residual_net)
from jointprune.controller import (BLOCK, DISCRETE_RATIOS, ControllerConfig, ControllerParams,
                                   embed_index, gaussian_logpdf, grad_log_prob, init_params,
                                   ratio_bin, replay_log_prob, sample_action,
                                   sample_ratio_continuous, score_action, softmax)
from jointprune.errors import InvalidArgument
from oracles import central_difference, enumerate_discrete_actions, normal_logpdf


def small_cfg(**kw):
    return ControllerConfig(**{"h_dim": 5, "e_dim": 4, **kw})


def fd_check(params, trace, step=1e-4):
    analytic = grad_log_prob(params, trace)
    numeric = central_difference(lambda: replay_log_prob(params, trace), params.arrays, step)
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        big = np.maximum(np.abs(a), np.abs(n)) > 1e-6
        if big.any():
            worst = max(worst, float(np.max(np.abs(a - n)[big] / np.maximum(
                np.abs(a), np.abs(n))[big])))
        assert np.allclose(a[~big], n[~big], atol=1e-6), k
    return worst


class TestParams:
    def test_init_range_and_determinism(self):
        spec = reference_spec()
        cfg = ControllerConfig()
        p1 = init_params(spec, cfg, np.random.default_rng(3))
        p2 = init_params(spec, cfg, np.random.default_rng(3))
        for k in p1.arrays:
            assert np.array_equal(p1[k], p2[k])
            assert np.all(np.abs(p1[k]) <= 0.1)
        assert p1["lstm.0.W"].shape == (256, 128)
        assert p1["embed_ratio"].shape == (10, 64)
        assert {k.split(".")[1] for k in p1.arrays if k.startswith("block.")} == {"2", "4", "7", "9"}

    def test_discrete_layout(self):
        p = init_params(reference_spec(), small_cfg(ratio_mode="discrete"), np.random.default_rng(0))
        assert p["ratio.0.W"].shape == (5, 5)
        assert not any(k.startswith("mu.") for k in p.arrays)

    def test_dict_roundtrip(self):
        p = init_params(reference_spec(), small_cfg(), np.random.default_rng(0))
        q = ControllerParams.from_dict(p.to_dict())
        assert q.config == p.config and q.T == p.T
        assert all(np.array_equal(p[k], q[k]) for k in p.arrays)

    @pytest.mark.parametrize("kw", [{"h_dim": 0}, {"ratio_mode": "beta"},
                                    {"search_mode": "both"}, {"rho_min": 3.0}])
    def test_bad_config(self, kw):
        with pytest.raises(InvalidArgument):
            ControllerConfig(**kw)


class TestPrimitives:
    def test_softmax(self):
        p = softmax(np.array([1000.0, 1000.0, -1000.0]))
        assert np.allclose(p, [0.5, 0.5, 0.0])

    @pytest.mark.parametrize("r, b", [(0.0, 0), (0.09, 0), (0.1, 1), (0.3, 3), (0.45, 4),
                                      (0.675, 6), (0.7, 7), (0.899, 8), (0.9, 9)])
    def test_ratio_bin(self, r, b):
        assert ratio_bin(r) == b

    def test_embed_index(self):
        assert embed_index(PRUNE) == ("embed_block", 1)
        assert embed_index(0) == ("embed_block", 0)
        assert embed_index(0.0) == ("embed_ratio", 0)

    def test_gaussian_logpdf_matches_oracle(self):
        for x, mu, rho in [(0.3, 0.1, -1.0), (-2.0, 0.4, 0.5), (0.9, 0.9, -8.0)]:
            assert math.isclose(gaussian_logpdf(x, mu, rho), normal_logpdf(x, mu, math.exp(rho)),
                                rel_tol=1e-12)

    def test_continuous_draw_is_clipped_but_scored_raw(self):
        h = np.ones(3)
        heads = ((np.zeros((1, 3)), np.array([0.0])), (np.zeros((1, 3)), np.array([0.0])))
        rng = np.random.default_rng(0)
        seen_clip = False
        for _ in range(200):
            d = sample_ratio_continuous(h, heads, rng)
            assert 0.0 <= d.value <= MAX_RATIO
            assert math.isclose(d.logp, normal_logpdf(d.raw, 0.0, 1.0), rel_tol=1e-12)
            seen_clip |= d.value != d.raw
        assert seen_clip

    def test_log_variance_is_clamped(self):
        h = np.ones(2)
        heads = ((np.zeros((1, 2)), np.array([0.4])), (np.zeros((1, 2)), np.array([50.0])))
        d = sample_ratio_continuous(h, heads, np.random.default_rng(0), (-10.0, 2.0))
        assert d.dist == (0.4, 2.0)


class TestSampling:
    @pytest.mark.parametrize("ratio_mode", ["continuous", "discrete"])
    @pytest.mark.parametrize("search_mode", ["joint", "block-only", "channel-only"])
    def test_actions_valid(self, ratio_mode, search_mode):
        spec = reference_spec()
        cfg = small_cfg(ratio_mode=ratio_mode, search_mode=search_mode)
        params = init_params(spec, cfg, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        for _ in range(40):
            action, trace = sample_action(params, spec, rng)
            check_action(spec, action)
            if search_mode == "block-only":
                assert all(is_block_choice(x) or x == 0.0 for x in action)
                assert all(x == 0 for i, x in enumerate(action) if not spec.layers[i].is_block)
            if search_mode == "channel-only":
                assert not any(action.block_pruned(i) for i in range(spec.T))
            if ratio_mode == "discrete":
                assert all(is_block_choice(x) or x in DISCRETE_RATIOS for x in action)

    def test_pruned_block_skips_second_cell(self):
        spec = reference_spec()
        params = init_params(spec, small_cfg(), np.random.default_rng(0))
        params.arrays["block.2.b"][:] = [-50.0, 50.0]
        action, trace = sample_action(params, spec, np.random.default_rng(0))
        assert action[2] == action[3] == PRUNE
        assert 3 not in [c.cell for c in trace.cells]
        assert trace.cells[[c.cell for c in trace.cells].index(4)].embed == ("embed_block", 1)
        assert [s.kind for s in trace.steps if s.cell == 2] == [BLOCK]

    def test_same_seed_same_actions(self):
        spec = reference_spec()
        params = init_params(spec, small_cfg(), np.random.default_rng(0))
        a = [sample_action(params, spec, np.random.default_rng(9))[0] for _ in range(2)]
        assert a[0] == a[1]

    @given(st.integers(0, 2**32 - 1), st.sampled_from(["continuous", "discrete"]))
    @settings(max_examples=40, deadline=None)
    def test_score_matches_trace(self, seed, mode):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        params = init_params(spec, small_cfg(ratio_mode=mode), rng)
        params.arrays.update({k: v * 0.2 for k, v in params.arrays.items() if k.startswith("rho")})
        action, trace = sample_action(params, spec, rng)
        assert math.isclose(replay_log_prob(params, trace), trace.log_prob, rel_tol=1e-12)
        unclipped = all(s.raw == s.element or s.kind != "ratio-continuous" for s in trace.steps)
        if unclipped:
            assert math.isclose(score_action(params, spec, action), trace.log_prob,
                                rel_tol=1e-9, abs_tol=1e-12)

    def test_wrong_T(self):
        params = init_params(reference_spec(), small_cfg(), np.random.default_rng(0))
        other = residual_net(1, 8, [(3, 4, 1)], [])
        with pytest.raises(InvalidArgument):
            sample_action(params, other, np.random.default_rng(0))

    def test_discrete_probabilities_sum_to_one(self):
        spec = residual_net(1, 8, [(3, 4, 1)], [(3, 8, 1, 1, 4)])
        kinds = [l.kind for l in spec.layers]
        params = init_params(spec, small_cfg(ratio_mode="discrete"), np.random.default_rng(5))
        total = math.fsum(math.exp(score_action(params, spec, PruningAction(a)))
                          for a in enumerate_discrete_actions(kinds))
        assert math.isclose(total, 1.0, rel_tol=1e-10)


class TestGradient:
    @pytest.mark.parametrize("ratio_mode", ["continuous", "discrete"])
    @pytest.mark.parametrize("search_mode", ["joint", "block-only", "channel-only"])
    def test_matches_finite_differences(self, ratio_mode, search_mode):
        spec = residual_net(1, 8, [(3, 4, 1)], [(3, 8, 1, 2, 4)])
        cfg = small_cfg(ratio_mode=ratio_mode, search_mode=search_mode, h_dim=4, e_dim=3)
        rng = np.random.default_rng(11)
        params = init_params(spec, cfg, rng)
        params.arrays = {k: v * 5 for k, v in params.arrays.items()}
        for _ in range(3):
            _, trace = sample_action(params, spec, rng)
            assert fd_check(params, trace) < 1e-5

    def test_clamped_log_variance_has_no_gradient(self):
        spec = residual_net(1, 4, [(3, 2, 1)], [])
        params = init_params(spec, small_cfg(), np.random.default_rng(0))
        params.arrays["rho.0.b"][:] = 40.0
        _, trace = sample_action(params, spec, np.random.default_rng(0))
        g = grad_log_prob(params, trace)
        assert not np.any(g["rho.0.W"]) and not np.any(g["rho.0.b"])

    def test_rejects_foreign_trace(self):
        spec = reference_spec()
        p = init_params(spec, small_cfg(), np.random.default_rng(0))
        q = init_params(spec, small_cfg(), np.random.default_rng(1))
        _, trace = sample_action(p, spec, np.random.default_rng(0))
        with pytest.raises(InvalidArgument):
            grad_log_prob(q, trace)

    def test_monte_carlo_score_identity(self):
        # E[grad log pi] = 0 for every parameter
        spec = residual_net(1, 4, [(3, 4, 1)], [(3, 4, 1, 1, 2)])
        params = init_params(spec, small_cfg(ratio_mode="discrete", h_dim=3, e_dim=2),
                             np.random.default_rng(4))
        rng = np.random.default_rng(5)
        acc = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        n = 4000
        for _ in range(n):
            _, trace = sample_action(params, spec, rng)
            for k, g in grad_log_prob(params, trace).items():
                acc[k] += g
        for k, v in acc.items():
            assert np.all(np.abs(v / n) < 0.05), k
