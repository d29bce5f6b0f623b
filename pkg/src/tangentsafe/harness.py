"""Deterministic episode runner for filtered vs. unfiltered comparisons."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atacom import BasisError, SubstepRecord, multirate_execute
from .formats import TrajectoryWriter, read_action_stream, write_action_stream
from .kinematics import JointState, KinematicPlant, damped_pinv_ik, forward_point
from .policies import (
    HitParams,
    RandomPolicy,
    ReachPolicy,
    ReplayPolicy,
    ScriptedHitPolicy,
    ZeroPolicy,
    policy_scripted_hit,
)
from .scenario import Scenario

log = logging.getLogger(__name__)


@dataclass
class EpisodeMetrics:
    seed: int
    filtered: bool
    max_violation: float
    block_max: dict
    violation_steps: int
    success: bool
    safe_success: bool
    duration_to_success: float
    substeps: int
    max_null_residual: float = 0.0
    max_orth_residual: float = 0.0
    aborted: bool = False

    def row(self, block_names) -> dict:
        out = {
            "kind": "episode",
            "seed": self.seed,
            "mode": "filtered" if self.filtered else "unfiltered",
            "success": int(self.success),
            "safe_success": int(self.safe_success),
            "max_violation": repr(self.max_violation),
        }
        for name in block_names:
            out[f"max_violation[{name}]"] = repr(self.block_max.get(name, -math.inf))
        out.update(
            violation_steps=self.violation_steps,
            duration_to_success_s=repr(self.duration_to_success),
            substeps=self.substeps,
            max_null_residual=repr(self.max_null_residual),
            max_orth_residual=repr(self.max_orth_residual),
            aborted=int(self.aborted),
        )
        return out


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    records: list  # SubstepRecord, terminal state last
    trajectory: list  # JointState
    action_times: np.ndarray
    actions: np.ndarray
    context: dict = field(default_factory=dict)


def _rng_uniform(rng, rng_range):
    lo, hi = rng_range
    return rng.uniform(lo, hi)


def sample_context(sc: Scenario, rng) -> dict:
    """Per-episode randomisation (puck or reach target) drawn first from the seed."""
    task = sc.task
    ctx = {}
    if "puck_x_range_m" in task:
        ctx["puck"] = np.array([_rng_uniform(rng, task["puck_x_range_m"]),
                                _rng_uniform(rng, task["puck_y_range_m"])])
        ctx["goal"] = np.asarray(task["goal_xy_m"], dtype=float)
    if "target_x_range_m" in task:
        ctx["target"] = np.array([_rng_uniform(rng, task["target_x_range_m"]),
                                  _rng_uniform(rng, task["target_y_range_m"])])
    return ctx


def hit_params(policy: dict) -> HitParams:
    return HitParams(
        hit_speed=float(policy.get("hit_speed_mps", 1.0)),
        runup=float(policy.get("runup_m", 0.12)),
        contact_offset=float(policy.get("contact_offset_m", 0.08)),
        approach_time=float(policy.get("approach_time_s", 0.8)),
        follow_time=float(policy.get("follow_time_s", 0.15)),
        stop_time=float(policy.get("stop_time_s", 0.2)),
    )


def make_policy(sc: Scenario, ctx: dict, rng, replay_path=None):
    p = sc.policy
    kind = p["kind"]
    if replay_path is not None or kind == "replay":
        header, _, actions = read_action_stream(replay_path or p["path"])
        space = header.get("action_space", "joint") if header else "joint"
        return ReplayPolicy(actions, action_space=space)
    space = p.get("action_space", "joint")
    if kind == "zero":
        dim = sc.chain.n if space == "joint" else 2
        return ZeroPolicy(dim, space)
    if kind == "random":
        return RandomPolicy(p["low"], p["high"], rng, space)
    if kind == "scripted_hit":
        params = hit_params(p)
        start = forward_point(sc.chain, sc.q0, sc.ee)
        bounds = sc.task.get("strike_bounds_m")
        plan = policy_scripted_hit(ctx["puck"], params, start, ctx["goal"], bounds)
        ctx["plan"] = plan
        noise = float(p.get("noise_fraction", 0.0)) * params.hit_speed
        return ScriptedHitPolicy(plan, 1.0 / sc.policy_hz, noise, rng)
    if kind == "reach":
        return ReachPolicy(
            sc.chain, sc.ee, ctx["target"], 1.0 / sc.policy_hz,
            gain=float(p.get("gain_per_s", 2.0)),
            max_speed=float(p.get("max_speed_mps", 0.4)),
            damping=float(p.get("ik_damping", 0.05)),
            noise=float(p.get("noise_rad_s", 0.0)),
            rng=rng,
        )
    raise ValueError(f"unknown policy kind {kind!r}")


def cartesian_action_map(sc: Scenario):
    damping = float(sc.policy.get("ik_damping", 0.05))
    hold = bool(sc.policy.get("hold_height", True))

    def to_joint(q, v):
        v = np.asarray(v, dtype=float)
        if hold and v.size == 2:
            v = np.array([v[0], v[1], 0.0])
        return damped_pinv_ik(sc.chain, q, v, sc.ee, damping)

    return to_joint


def success_check(trajectory, criterion: dict, chain, ee, dt: float):
    """Task success and the time it was reached (NaN if never).

    ``reach``: final end-effector x-y within ``tolerance_m`` of the target.
    ``strike``: end effector crosses the strike line (perpendicular to the
    hit direction) within ``lateral_tolerance_m`` of the strike point, moving
    towards the goal at ``min_speed_mps`` or faster.
    """
    kind = criterion.get("kind", "none")
    if kind == "none" or len(trajectory) < 2:
        return False, math.nan
    pts = np.array([forward_point(chain, s.q, ee)[:2] for s in trajectory])
    times = np.array([s.t for s in trajectory])
    if kind == "reach":
        target = np.asarray(criterion["target"], dtype=float)
        tol = float(criterion.get("tolerance_m", 0.03))
        dist = np.linalg.norm(pts - target, axis=1)
        if dist[-1] > tol:
            return False, math.nan
        inside = np.nonzero(dist <= tol)[0]
        # first entry of the final uninterrupted stay
        first = inside[-1]
        while first > 0 and dist[first - 1] <= tol:
            first -= 1
        return True, float(times[first])
    if kind == "strike":
        strike = np.asarray(criterion["strike_point"], dtype=float)
        u = np.asarray(criterion["direction"], dtype=float)
        normal = np.array([-u[1], u[0]])
        s = (pts - strike) @ u
        for k in range(len(s) - 1):
            if s[k] < 0 <= s[k + 1]:
                frac = -s[k] / (s[k + 1] - s[k])
                cross = pts[k] + frac * (pts[k + 1] - pts[k])
                lateral = abs((cross - strike) @ normal)
                speed = (s[k + 1] - s[k]) / (times[k + 1] - times[k])
                ok = bool(lateral <= float(criterion.get("lateral_tolerance_m", 0.08))
                          and speed >= float(criterion.get("min_speed_mps", 0.0)))
                return ok, float(times[k] + frac * (times[k + 1] - times[k])) if ok else math.nan
        return False, math.nan
    raise ValueError(f"unknown success criterion {kind!r}")


def _criterion(sc: Scenario, ctx: dict) -> dict:
    crit = dict(sc.success)
    if crit.get("kind") == "reach":
        crit["target"] = ctx["target"]
    elif crit.get("kind") == "strike":
        plan = ctx["plan"]
        crit["strike_point"] = plan.strike_point
        crit["direction"] = plan.direction
        if "min_speed_fraction" in crit:
            crit["min_speed_mps"] = crit["min_speed_fraction"] * plan.params.hit_speed
    return crit


def metrics_from_records(records, constraints, tau: float):
    """``(max_violation, per-block max, violation_steps, null, orth)`` from a log."""
    block_max = {name: -math.inf for name in constraints.names}
    overall = -math.inf
    steps = 0
    null_res = orth_res = 0.0
    for rec in records:
        g = rec.g if isinstance(rec, SubstepRecord) else np.asarray(rec["g"])
        if g.size:
            overall = max(overall, float(g.max()))
            if g.max() > tau:
                steps += 1
            for name, sl in constraints.slices.items():
                if sl.stop > sl.start:
                    block_max[name] = max(block_max[name], float(g[sl].max()))
        nr = rec.null_residual if isinstance(rec, SubstepRecord) else rec["null_residual"]
        orr = rec.orth_residual if isinstance(rec, SubstepRecord) else rec["orth_residual"]
        null_res = max(null_res, nr)
        orth_res = max(orth_res, orr)
    return overall, block_max, steps, null_res, orth_res


def run_episode(sc: Scenario, with_filter: bool, seed: int, log_path=None,
                record_path=None, replay_path=None) -> EpisodeResult:
    """Run one seeded episode.

    The plant is stepped at the filter rate in both modes; without the filter
    the policy's joint velocity is applied as is. Constraint values are logged
    at every substep plus the terminal state.
    """
    rng = np.random.default_rng(seed)
    ctx = sample_context(sc, rng)
    policy = make_policy(sc, ctx, rng, replay_path=replay_path)
    if replay_path is not None and sc.success.get("kind") == "strike" and "plan" not in ctx:
        params = hit_params(sc.policy)
        start = forward_point(sc.chain, sc.q0, sc.ee)
        ctx["plan"] = policy_scripted_hit(ctx["puck"], params, start, ctx["goal"],
                                          sc.task.get("strike_bounds_m"))
    action_map = cartesian_action_map(sc) if policy.action_space == "cartesian" else None

    cfg = sc.filter_cfg
    plant = KinematicPlant(sc.chain, JointState.at_rest(sc.q0))
    trajectory = [plant.state]
    records = []
    times, actions = [], []
    writer = None
    if log_path is not None:
        writer = TrajectoryWriter(log_path, {
            "scenario": sc.name, "seed": seed, "filtered": with_filter,
            "blocks": {n: [s.start, s.stop] for n, s in sc.constraints.slices.items()},
        })
    aborted = False
    dt_policy = 1.0 / sc.policy_hz
    issued = 0
    try:
        while issued < sc.n_actions:
            t0 = plant.state.t
            chunk = policy.chunk(t0, plant.state, min(sc.chunk_size, sc.n_actions - issued))
            if len(chunk) == 0:
                break
            times.extend(t0 + dt_policy * np.arange(len(chunk)))
            actions.extend(np.asarray(chunk, dtype=float))
            issued += len(chunk)
            try:
                traj, recs = multirate_execute(
                    plant, chunk, sc.constraints, cfg, sc.substeps_per_action,
                    action_map=action_map, filter_enabled=with_filter,
                    on_substep=(lambda r: writer.write(r.to_dict())) if writer else None,
                )
            except (ValueError, BasisError, np.linalg.LinAlgError) as exc:
                log.warning("episode seed=%s aborted: %s", seed, exc)
                aborted = True
                break
            trajectory.extend(traj[1:])
            records.extend(recs)
            if not plant.state.is_finite():
                aborted = True
                break
        state = plant.state
        if state.is_finite():
            g, _ = sc.constraints.evaluate(state.q)
            n = sc.chain.n
            terminal = SubstepRecord(t=state.t, q=state.q, g=g, a_rfm=np.zeros(0), a_cmd=np.zeros(n))
            records.append(terminal)
            if writer:
                writer.write({**terminal.to_dict(), "terminal": True})
    finally:
        if writer:
            writer.close()

    tau = cfg.slack_tolerance
    overall, block_max, steps, null_res, orth_res = metrics_from_records(records, sc.constraints, tau)
    if aborted:
        success, t_succ = False, math.nan
    else:
        success, t_succ = success_check(trajectory, _criterion(sc, ctx), sc.chain, sc.ee,
                                        cfg.substep_dt)
    metrics = EpisodeMetrics(
        seed=seed, filtered=with_filter, max_violation=overall, block_max=block_max,
        violation_steps=steps, success=success, safe_success=success and steps == 0,
        duration_to_success=t_succ, substeps=len(records) - (0 if aborted else 1),
        max_null_residual=null_res, max_orth_residual=orth_res, aborted=aborted,
    )
    act_arr = np.array(actions).reshape(len(actions), -1) if actions else np.zeros((0, 0))
    if record_path is not None:
        write_action_stream(record_path, times, act_arr,
                            {"action_space": policy.action_space, "scenario": sc.name,
                             "seed": seed, "policy_hz": sc.policy_hz})
    return EpisodeResult(metrics, records, trajectory, np.array(times), act_arr, ctx)


def summarize(metrics: list, block_names) -> dict:
    n = len(metrics)
    filtered = {m.filtered for m in metrics}
    mode = "filtered" if filtered == {True} else "unfiltered" if filtered == {False} else "mixed"
    finite = [m.max_violation for m in metrics if np.isfinite(m.max_violation)]
    row = {
        "kind": "summary",
        "seed": f"{metrics[0].seed}..{metrics[-1].seed}" if n else "",
        "mode": mode,
        "success": repr(sum(m.success for m in metrics) / n if n else math.nan),
        "safe_success": repr(sum(m.safe_success for m in metrics) / n if n else math.nan),
        "max_violation": repr(float(np.mean(finite)) if finite else math.nan),
    }
    for name in block_names:
        vals = [m.block_max.get(name, -math.inf) for m in metrics]
        row[f"max_violation[{name}]"] = repr(float(max(vals))) if vals else "nan"
    row.update(
        violation_steps=sum(m.violation_steps for m in metrics),
        duration_to_success_s=repr(float(np.nanmean([m.duration_to_success for m in metrics]))
                                   if any(m.success for m in metrics) else math.nan),
        substeps=sum(m.substeps for m in metrics),
        max_null_residual=repr(max((m.max_null_residual for m in metrics), default=0.0)),
        max_orth_residual=repr(max((m.max_orth_residual for m in metrics), default=0.0)),
        aborted=sum(m.aborted for m in metrics),
    )
    return row
