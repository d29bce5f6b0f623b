import copy
import logging
import math

import numpy as np
import pytest

from conftest import planar_chain
from tangentsafe.formats import read_trajectory, write_action_stream
from tangentsafe.harness import (
    EpisodeMetrics,
    metrics_from_records,
    run_episode,
    success_check,
    summarize,
)
from tangentsafe.kinematics import Attachment, JointState
from tangentsafe.policies import HitParams, RandomPolicy, policy_scripted_hit, random_stream
from tangentsafe.scenario import scenario_from_dict

PARAMS = HitParams(hit_speed=1.0, runup=0.12, contact_offset=0.08, approach_time=0.8,
                   follow_time=0.15, stop_time=0.2)


def variant(sc, **policy):
    data = copy.deepcopy(sc.config)
    data["policy"] = policy
    return scenario_from_dict(data, source="variant")


def push_policy(action):
    return {"kind": "random", "low": list(action), "high": list(action)}


class TestScriptedHit:
    def test_centerline_is_symmetric(self):
        plan = policy_scripted_hit([0.8, 0.0], PARAMS, [0.6, 0.0], [2.4, 0.0])
        v = plan.stream(np.arange(0, 2.0, 0.01))
        assert np.max(np.abs(v[:, 1])) <= 1e-15
        assert np.max(v[:, 0]) == pytest.approx(1.0)

    def test_mirror_equivariance(self, rng):
        for _ in range(10):
            puck = np.array([rng.uniform(0.7, 0.9), rng.uniform(-0.25, 0.25)])
            start = np.array([0.6, rng.uniform(-0.1, 0.1)])
            goal = np.array([2.4, rng.uniform(-0.2, 0.2)])
            flip = np.array([1.0, -1.0])
            t = np.arange(0, 2.0, 1 / 12.5)
            a = policy_scripted_hit(puck, PARAMS, start, goal).stream(t)
            b = policy_scripted_hit(puck * flip, PARAMS, start * flip, goal * flip).stream(t)
            assert np.allclose(b, a * flip, atol=1e-14)

    def test_open_loop_reaches_hit_speed_on_the_strike_point(self):
        start = np.array([0.6, 0.1])
        plan = policy_scripted_hit([0.85, -0.2], PARAMS, start, [2.4, 0.0])
        dt = 1e-4
        t = np.arange(0.0, plan.strike_time + 0.5, dt)
        v = plan.stream(t)
        pos = start + np.cumsum(v * dt, axis=0)
        k = int(round(plan.strike_time / dt))
        assert np.linalg.norm(pos[k] - plan.strike_point) <= 1e-3
        speeds = np.linalg.norm(v, axis=1)
        assert abs(speeds.max() - PARAMS.hit_speed) <= 0.05 * PARAMS.hit_speed
        assert abs(np.linalg.norm(v[k + 5]) - PARAMS.hit_speed) <= 0.05 * PARAMS.hit_speed
        assert np.allclose(v[k + 5] / np.linalg.norm(v[k + 5]), plan.direction)

    def test_pure_function_of_time(self):
        plan = policy_scripted_hit([0.8, 0.1], PARAMS, [0.6, 0.0], [2.4, 0.0])
        t = np.linspace(0, 2, 50)
        assert np.array_equal(plan.stream(t), plan.stream(t))
        assert np.array_equal(plan.velocity(-1.0), np.zeros(2))

    def test_unreachable_runup_falls_back(self, caplog):
        with caplog.at_level(logging.WARNING):
            plan = policy_scripted_hit([0.55, 0.0], PARAMS, [0.6, 0.3], [2.4, 0.0],
                                       bounds=[[0.5, -0.4], [1.05, 0.4]])
        assert "unreachable" in caplog.text
        assert plan.approach_time == 0.0
        assert np.array_equal(plan.approach_point, [0.6, 0.3])
        expected = (plan.strike_point - plan.approach_point)
        assert np.allclose(plan.direction, expected / np.linalg.norm(expected))


class TestRandomPolicy:
    def test_seeded(self):
        assert np.array_equal(random_stream([-1, -2], [1, 2], 100, 7),
                              random_stream([-1, -2], [1, 2], 100, 7))

    def test_zero_bounds(self):
        assert not np.any(random_stream([0, 0, 0], [0, 0, 0], 50, 1))

    def test_in_bounds_and_unbiased(self):
        draws = random_stream([-1.0, -3.0], [1.0, 3.0], 100_000, 11)
        assert np.all(draws[:, 0] >= -1) and np.all(draws[:, 0] < 1)
        sigma = np.array([2.0, 6.0]) / np.sqrt(12) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0)) <= 3 * sigma)

    def test_policy_chunks_are_reproducible(self):
        a = RandomPolicy([-1], [1], np.random.default_rng(3)).chunk(0, None, 10)
        b = RandomPolicy([-1], [1], np.random.default_rng(3)).chunk(0, None, 10)
        assert np.array_equal(a, b)


class TestSuccessCheck:
    chain = planar_chain([1.0, 1.0])
    ee = Attachment(2, [1.0, 0.0, 0.0])

    def traj(self, qs, dt=0.1):
        return [JointState.at_rest(q, t=i * dt) for i, q in enumerate(qs)]

    def test_reach_ending_at_target(self):
        qs = [[0.5, 0.5], [0.2, 0.2], [0.0, 0.0], [0.0, 0.0]]
        ok, t = success_check(self.traj(qs), {"kind": "reach", "target": [2.0, 0.0],
                                              "tolerance_m": 0.03}, self.chain, self.ee, 0.1)
        assert ok and t == pytest.approx(0.2)

    def test_reach_missing_target(self):
        qs = [[0.0, 0.0], [0.5, 0.5]]
        ok, t = success_check(self.traj(qs), {"kind": "reach", "target": [2.0, 0.0]},
                              self.chain, self.ee, 0.1)
        assert not ok and math.isnan(t)

    def test_strike_crossing(self):
        # rotating joint 1 sweeps the end effector in +x across x = 0 near y = 2
        qs = [[np.pi / 2 + d, 0.0] for d in (0.3, 0.1, -0.1, -0.3)]
        crit = {"kind": "strike", "strike_point": [0.0, 2.0], "direction": [-1.0, 0.0],
                "lateral_tolerance_m": 0.1, "min_speed_mps": 0.5}
        ok, t = success_check(self.traj(qs), crit, self.chain, self.ee, 0.1)
        assert not ok  # moving in +x, opposite to the strike direction
        crit["direction"] = [1.0, 0.0]
        ok, t = success_check(self.traj(qs), crit, self.chain, self.ee, 0.1)
        assert ok and t == pytest.approx(0.15, abs=1e-9)
        crit["min_speed_mps"] = 10.0
        assert not success_check(self.traj(qs), crit, self.chain, self.ee, 0.1)[0]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            success_check(self.traj([[0, 0], [0, 0]]), {"kind": "dance"}, self.chain, self.ee, 0.1)


class TestRunEpisode:
    def test_zero_policy_interior_start(self, manipulation):
        sc = variant(manipulation, kind="zero")
        m = run_episode(sc, True, seed=0).metrics
        assert m.max_violation <= -sc.filter_cfg.slack_tolerance
        assert m.violation_steps == 0 and not m.success and not m.aborted
        assert m.substeps == sc.n_actions * sc.substeps_per_action

    def test_outward_push(self, manipulation):
        sc = variant(manipulation, **push_policy([1.0, 0.3, -0.5]))
        filtered = run_episode(sc, True, seed=0).metrics
        unfiltered = run_episode(sc, False, seed=0).metrics
        assert filtered.max_violation <= 1e-3 and filtered.violation_steps == 0
        assert unfiltered.max_violation > 0 and unfiltered.violation_steps > 0
        assert not unfiltered.safe_success

    def test_noise_free_unfiltered_strike_succeeds(self, airhockey):
        data = copy.deepcopy(airhockey.config)
        data["policy"]["noise_fraction"] = 0.0
        sc = scenario_from_dict(data)
        for seed in range(3):
            assert run_episode(sc, False, seed).metrics.success

    def test_same_seed_same_episode(self, airhockey):
        a = run_episode(airhockey, True, seed=9)
        b = run_episode(airhockey, True, seed=9)
        names = airhockey.constraints.names
        assert a.metrics.row(names) == b.metrics.row(names)
        assert a.trajectory[-1].q.tobytes() == b.trajectory[-1].q.tobytes()

    def test_modes_share_context(self, airhockey):
        a = run_episode(airhockey, True, seed=4)
        b = run_episode(airhockey, False, seed=4)
        assert np.array_equal(a.context["puck"], b.context["puck"])
        assert np.array_equal(a.actions, b.actions)

    def test_nan_state_aborts(self, tmp_path, manipulation):
        actions = np.zeros((40, 3))
        actions[5, 0] = np.nan
        path = write_action_stream(tmp_path / "nan.jsonl", np.arange(40) / 15, actions)
        for with_filter in (False, True):
            m = run_episode(manipulation, with_filter, seed=0, replay_path=path).metrics
            assert m.aborted and not m.success

    def test_log_matches_online_metrics(self, tmp_path, airhockey):
        res = run_episode(airhockey, True, seed=2, log_path=tmp_path / "log.jsonl")
        header, recs = read_trajectory(tmp_path / "log.jsonl")
        assert header["seed"] == 2 and recs[-1]["terminal"]
        assert len(recs) == res.metrics.substeps + 1
        offline = metrics_from_records(recs, airhockey.constraints,
                                       airhockey.filter_cfg.slack_tolerance)
        m = res.metrics
        assert offline == (m.max_violation, m.block_max, m.violation_steps,
                           m.max_null_residual, m.max_orth_residual)


class TestReplay:
    def test_record_replay_bitwise(self, tmp_path, airhockey):
        names = airhockey.constraints.names
        for with_filter in (True, False):
            live = run_episode(airhockey, with_filter, seed=6, record_path=tmp_path / "rec.jsonl")
            again = run_episode(airhockey, with_filter, seed=6, replay_path=tmp_path / "rec.jsonl")
            assert live.metrics.row(names) == again.metrics.row(names)
            assert np.array_equal(live.actions, again.actions)

    def test_joint_space_round_trip(self, tmp_path, manipulation):
        live = run_episode(manipulation, True, seed=1, record_path=tmp_path / "r.jsonl")
        again = run_episode(manipulation, True, seed=1, replay_path=tmp_path / "r.jsonl")
        assert live.trajectory[-1].q.tobytes() == again.trajectory[-1].q.tobytes()

    def test_empty_file_gives_zero_length_episode(self, tmp_path, manipulation):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        res = run_episode(manipulation, True, seed=0, replay_path=p)
        assert res.metrics.substeps == 0 and not res.metrics.success
        assert len(res.records) == 1  # terminal state only


def test_summary_row(manipulation):
    names = manipulation.constraints.names
    ms = [EpisodeMetrics(s, True, -0.1 * s, {n: -0.1 for n in names}, 0, s % 2 == 0,
                         s % 2 == 0, 1.0 if s % 2 == 0 else math.nan, 10) for s in range(4)]
    row = summarize(ms, names)
    assert row["kind"] == "summary" and row["mode"] == "filtered"
    assert float(row["success"]) == 0.5 and float(row["safe_success"]) == 0.5
    assert float(row["max_violation"]) == pytest.approx(-0.15)
    assert row["seed"] == "0..3" and row["substeps"] == 40
