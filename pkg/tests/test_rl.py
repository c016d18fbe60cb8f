import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointprune.arch import PruningAction, enforce_group_constraint, reference_spec, residual_net
from jointprune.child.evaluator import Landscape
from jointprune.controller import ControllerConfig, init_params, sample_action
from jointprune.errors import EvaluatorFailure, InvalidArgument, NumericalFault, VersionMismatch
from jointprune.optim import AdamState, adam_step
from jointprune.rl import (BaselineState, EpisodeRecord, RewardConfig, SearchAborted,
                           SearchConfig, SearchState, best_action, best_record, episode_seed,
                           reinforce_step, reward, run_search, update_baseline)

SMALL = ControllerConfig(h_dim=8, e_dim=6)


def tiny_landscape(spec=None):
    spec = spec or residual_net(1, 8, [(3, 4, 1)], [(3, 8, 2, 2, 4)])
    optimum = PruningAction([0.2, 0.4, 1, 1, 0.0, 0.4])
    return Landscape(spec, optimum, tuple([1.0] * spec.T))


class TestReward:
    def test_formula(self):
        cfg = RewardConfig(lam=2.0, flops_unit=10.0)
        assert reward(0.5, 40, cfg) == -0.5 - 2.0

    def test_monotone(self):
        cfg = RewardConfig(lam=1e4)
        assert reward(0.1, 1000, cfg) > reward(0.2, 1000, cfg) > reward(0.2, 2000, cfg)

    def test_non_finite_loss(self):
        with pytest.raises(NumericalFault):
            reward(float("nan"), 1, RewardConfig())

    @pytest.mark.parametrize("kw", [{"lam": 0.0}, {"flops_unit": -1.0}])
    def test_bad_config(self, kw):
        with pytest.raises(InvalidArgument):
            RewardConfig(**kw)


class TestBaseline:
    def test_first_reward_initializes(self):
        b = update_baseline(BaselineState(), -3.0)
        assert b.initialized and b.b == -3.0

    def test_moving_average(self):
        b = BaselineState()
        for r in (-1.0, -2.0, -4.0):
            b = update_baseline(b, r)
        assert math.isclose(b.b, 0.9 * (0.9 * -1.0 + 0.1 * -2.0) + 0.1 * -4.0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
    def test_stays_within_range(self, rewards):
        b = BaselineState()
        for r in rewards:
            b = update_baseline(b, r)
        assert min(rewards) - 1e-9 <= b.b <= max(rewards) + 1e-9


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        g = {"w": np.array([0.5, -7.0, 0.0])}
        new, st_ = adam_step(p, g, AdamState.zeros_like(p, lr=0.1))
        assert np.allclose(new["w"], [0.9, -1.9, 3.0])
        assert st_.t == 1 and np.array_equal(p["w"], [1.0, -2.0, 3.0])

    def test_minimizes_quadratic(self):
        p = {"w": np.array([3.0, -4.0])}
        st_ = AdamState.zeros_like(p, lr=0.05)
        for _ in range(2000):
            adam_step(p, {"w": 2 * p["w"]}, st_, inplace=True)
        assert np.all(np.abs(p["w"]) < 1e-2)

    def test_state_roundtrip(self):
        p = {"w": np.arange(3.0)}
        _, s = adam_step(p, {"w": np.ones(3)}, AdamState.zeros_like(p))
        t = AdamState.from_dict(json.loads(json.dumps(s.to_dict())))
        assert t.t == 1 and np.array_equal(t.m["w"], s.m["w"]) and np.array_equal(t.v["w"], s.v["w"])


class TestReinforce:
    def setup_method(self):
        self.spec = reference_spec()
        self.params = init_params(self.spec, SMALL, np.random.default_rng(0))
        _, self.trace = sample_action(self.params, self.spec, np.random.default_rng(1))
        self.adam = AdamState.zeros_like(self.params.arrays)

    def test_zero_advantage_is_a_no_op(self):
        p, a = reinforce_step(self.params, self.trace, -1.0, BaselineState(-1.0, 0.9, True), self.adam)
        assert p is self.params and a is self.adam

    def test_uninitialized_baseline_counts_as_reward(self):
        p, a = reinforce_step(self.params, self.trace, -7.0, BaselineState(), self.adam)
        assert p is self.params and a.t == 0

    def test_positive_advantage_raises_log_prob(self):
        from jointprune.controller import replay_log_prob
        before = replay_log_prob(self.params, self.trace)
        p, a = reinforce_step(self.params, self.trace, 1.0, BaselineState(0.0, 0.9, True), self.adam)
        assert a.t == 1 and replay_log_prob(p, self.trace) > before
        p, _ = reinforce_step(self.params, self.trace, -1.0, BaselineState(0.0, 0.9, True), self.adam)
        assert replay_log_prob(p, self.trace) < before


class TestLog:
    def records(self, rewards):
        return [EpisodeRecord(i, [0.0], 1.0, 10, r, None, 0) for i, r in enumerate(rewards)]

    def test_best_is_argmax(self):
        recs = self.records([-5.0, -2.0, -3.0])
        recs[1] = EpisodeRecord(1, [0.5], 1.0, 10, -2.0, None, 0)
        assert best_record(recs).episode == 1
        assert best_action(recs) == PruningAction([0.5])

    def test_earliest_wins_ties(self):
        assert best_record(self.records([-2.0, -1.0, -1.0])).episode == 1

    def test_failed_records_skipped(self):
        recs = [EpisodeRecord(0, [0.0], None, None, None, None, 0, "failed")] + self.records([-3.0])
        assert best_record(recs).reward == -3.0
        with pytest.raises(InvalidArgument):
            best_record(recs[:1])

    def test_json_roundtrip_keeps_types(self):
        rec = EpisodeRecord(3, [0.25, 1, 1, 0.0], 0.1, 123, -0.2, -0.3, 99)
        back = EpisodeRecord.from_json(rec.to_json())
        assert back == rec and PruningAction(back.action) == PruningAction(rec.action)


class Flaky:
    def __init__(self, inner, fail_at):
        self.inner, self.fail_at, self.calls = inner, fail_at, 0

    def evaluate(self, action, seed):
        self.calls += 1
        if self.calls == self.fail_at:
            raise EvaluatorFailure("boom")
        return self.inner.evaluate(action, seed)


class TestSearch:
    def cfg(self, episodes=30, **kw):
        return SearchConfig(episodes=episodes, controller=SMALL, reward=RewardConfig(lam=1e3), **kw)

    def test_records_and_reward_recompute(self, tmp_path):
        land = tiny_landscape()
        cfg = self.cfg()
        state = SearchState.fresh(land.spec, cfg, seed=1)
        buf = io.StringIO()
        recs = run_search(land.spec, land, cfg, state, log_file=buf, checkpoint_dir=tmp_path)
        lines = buf.getvalue().splitlines()
        assert len(recs) == len(lines) == 30 and state.episode == 30
        for line in lines:
            r = EpisodeRecord.from_json(line)
            action = PruningAction(r.action)
            assert enforce_group_constraint(land.spec, action) == action
            assert (r.loss, r.flops) == land.evaluate(action)
            assert r.reward == reward(r.loss, r.flops, cfg.reward)
            assert r.seed == episode_seed(state.eval_seed, r.episode)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "ctrl_best.json", "ctrl_ep0010.json", "ctrl_ep0020.json", "ctrl_ep0030.json"]
        best = SearchState.load(tmp_path / "ctrl_best.json")
        assert best.best_episode == best_record(recs).episode

    def test_baseline_column_is_pre_update(self):
        land = tiny_landscape()
        cfg = self.cfg(episodes=5)
        recs = run_search(land.spec, land, cfg, SearchState.fresh(land.spec, cfg, seed=1))
        assert recs[0].baseline == recs[0].reward
        b = recs[0].reward
        for r in recs[1:]:
            assert math.isclose(r.baseline, b)
            b = 0.9 * b + 0.1 * r.reward

    def test_resume_matches_uninterrupted(self):
        land = tiny_landscape()
        cfg = self.cfg(episodes=25)
        full = run_search(land.spec, land, cfg, SearchState.fresh(land.spec, cfg, seed=4))
        state = SearchState.fresh(land.spec, cfg, seed=4)
        run_search(land.spec, land, self.cfg(episodes=11), state)
        state = SearchState.loads(state.dumps())
        rest = run_search(land.spec, land, cfg, state)
        assert [r.to_json() for r in full[11:]] == [r.to_json() for r in rest]

    def test_failure_aborts_with_record(self):
        land = tiny_landscape()
        cfg = self.cfg(episodes=10)
        buf = io.StringIO()
        with pytest.raises(SearchAborted) as info:
            run_search(land.spec, Flaky(land, 4), cfg, SearchState.fresh(land.spec, cfg, 0),
                       log_file=buf)
        recs = [EpisodeRecord.from_json(l) for l in buf.getvalue().splitlines()]
        assert [r.status for r in recs] == ["ok", "ok", "ok", "failed"]
        assert info.value.records[-1].status == "failed"

    def test_checkpoint_bytes_stable(self):
        land = tiny_landscape()
        cfg = self.cfg(episodes=3)
        state = SearchState.fresh(land.spec, cfg, seed=2)
        run_search(land.spec, land, cfg, state)
        text = state.dumps()
        assert SearchState.loads(text).dumps() == text

    def test_checkpoint_version(self):
        land = tiny_landscape()
        doc = SearchState.fresh(land.spec, self.cfg(), 0).to_dict()
        doc["schema"] = "abcp-ctrl/0"
        with pytest.raises(VersionMismatch):
            SearchState.from_dict(doc)
        with pytest.raises(VersionMismatch):
            SearchState.loads("not json")

    def test_episode_seed_independent_of_controller_seed(self):
        assert episode_seed(5, 3) == episode_seed(5, 3) != episode_seed(5, 4)
