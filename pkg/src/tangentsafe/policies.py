"""Stand-in upstream policies.

They play the role of a slow, unvetted action source: each call returns a
chunk of actions that the harness executes open loop at the policy rate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kinematics import Attachment, SerialChain, damped_pinv_ik, forward_point

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HitParams:
    hit_speed: float = 1.0  # m/s
    runup: float = 0.12  # m travelled while accelerating to hit speed
    contact_offset: float = 0.08  # puck + mallet radius
    approach_time: float = 0.8  # s
    follow_time: float = 0.15  # s at hit speed past the strike point
    stop_time: float = 0.2  # s


@dataclass(frozen=True, eq=False)
class HitPlan:
    """Open-loop x-y velocity profile for one strike.

    Minimum-jerk approach to a run-up point behind the puck, a linear ramp to
    hit speed that ends exactly on the strike point, a cruise through it and
    a linear stop.
    """

    start: np.ndarray
    approach_point: np.ndarray
    strike_point: np.ndarray
    direction: np.ndarray
    params: HitParams
    approach_time: float

    @property
    def ramp_time(self) -> float:
        return 2.0 * float(np.linalg.norm(self.strike_point - self.approach_point)) / self.params.hit_speed

    @property
    def strike_time(self) -> float:
        return self.approach_time + self.ramp_time

    def velocity(self, t: float) -> np.ndarray:
        p = self.params
        Ta = self.approach_time
        if t < 0:
            return np.zeros(2)
        if t < Ta:
            s = t / Ta
            shape = 30 * s**2 - 60 * s**3 + 30 * s**4
            return (self.approach_point - self.start) * shape / Ta
        t -= Ta
        ramp = self.ramp_time
        if t < ramp:
            return self.direction * p.hit_speed * t / ramp
        t -= ramp
        if t < p.follow_time:
            return self.direction * p.hit_speed
        t -= p.follow_time
        if t < p.stop_time:
            return self.direction * p.hit_speed * (1 - t / p.stop_time)
        return np.zeros(2)

    def stream(self, times) -> np.ndarray:
        return np.array([self.velocity(float(t)) for t in times]).reshape(-1, 2)


def policy_scripted_hit(puck_pos, params: HitParams, start, goal, bounds=None) -> HitPlan:
    """Plan a strike of the puck towards ``goal`` from mallet position ``start``.

    ``bounds`` is ``((x_min, y_min), (x_max, y_max))`` of reachable mallet
    positions; if the run-up point falls outside, the plan degrades to a
    straight run from ``start`` through the strike point.
    """
    puck = np.asarray(puck_pos, dtype=float)[:2]
    start = np.asarray(start, dtype=float)[:2]
    goal = np.asarray(goal, dtype=float)[:2]
    u = goal - puck
    u /= np.linalg.norm(u)
    strike = puck - params.contact_offset * u
    approach = strike - params.runup * u
    approach_time = params.approach_time
    if bounds is not None:
        lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
        if np.any(approach < lo) or np.any(approach > hi):
            log.warning("run-up point %s unreachable; straight-line strike", approach)
            u = strike - start
            u /= np.linalg.norm(u)
            approach = start.copy()
            approach_time = 0.0
    return HitPlan(start, approach, strike, u, params, approach_time)


def random_stream(low, high, count: int, seed) -> np.ndarray:
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(count, low.size))


class Policy:
    """``chunk(t0, state, count)`` returns up to ``count`` actions."""

    action_space = "joint"
    dim = 0

    def chunk(self, t0, state, count) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class ZeroPolicy(Policy):
    def __init__(self, dim, action_space="joint"):
        self.dim = dim
        self.action_space = action_space

    def chunk(self, t0, state, count):
        return np.zeros((count, self.dim))


class RandomPolicy(Policy):
    def __init__(self, low, high, rng, action_space="joint"):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        self.rng = rng
        self.dim = self.low.size
        self.action_space = action_space

    def chunk(self, t0, state, count):
        return self.rng.uniform(self.low, self.high, size=(count, self.dim))


class ScriptedHitPolicy(Policy):
    """Samples a :class:`HitPlan` at the policy rate and adds uniform noise."""

    action_space = "cartesian"
    dim = 2

    def __init__(self, plan: HitPlan, policy_dt: float, noise: float, rng):
        self.plan = plan
        self.policy_dt = policy_dt
        self.noise = noise
        self.rng = rng

    def chunk(self, t0, state, count):
        times = t0 + self.policy_dt * np.arange(count)
        out = self.plan.stream(times)
        if self.noise > 0:
            out = out + self.rng.uniform(-self.noise, self.noise, size=out.shape)
        return out


class ReachPolicy(Policy):
    """Cartesian P-controller on the end effector, emitted as joint velocities.

    A chunk is planned by rolling the controller forward on the unconstrained
    kinematic model, as a chunking policy would predict its own future.
    """

    action_space = "joint"

    def __init__(self, chain: SerialChain, ee: Attachment, target, policy_dt: float,
                 gain: float, max_speed: float, damping: float, noise: float, rng,
                 task_dims: int = 2):
        self.chain = chain
        self.ee = ee
        self.target = np.asarray(target, dtype=float)
        self.policy_dt = policy_dt
        self.gain = gain
        self.max_speed = max_speed
        self.damping = damping
        self.noise = noise
        self.rng = rng
        self.task_dims = task_dims
        self.dim = chain.n

    def chunk(self, t0, state, count):
        q = np.array(state.q, dtype=float)
        out = np.empty((count, self.dim))
        d = self.task_dims
        for i in range(count):
            err = self.target[:d] - forward_point(self.chain, q, self.ee)[:d]
            v = self.gain * err
            speed = np.linalg.norm(v)
            if speed > self.max_speed:
                v *= self.max_speed / speed
            out[i] = damped_pinv_ik(self.chain, q, v, self.ee, self.damping)
            q = q + out[i] * self.policy_dt
        if self.noise > 0:
            out += self.rng.uniform(-self.noise, self.noise, size=out.shape)
        return out


class ReplayPolicy(Policy):
    """Feeds a recorded action stream; ends when the stream does."""

    def __init__(self, actions, action_space="joint"):
        self.actions = np.asarray(actions, dtype=float)
        self.action_space = action_space
        self.dim = self.actions.shape[1] if self.actions.ndim == 2 else 0
        self._pos = 0

    def chunk(self, t0, state, count):
        out = self.actions[self._pos : self._pos + count]
        self._pos += len(out)
        return out
