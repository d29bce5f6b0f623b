"""Serial-chain kinematics for velocity-controlled revolute robots.

The plant is the control-affine kinematic system ``qdot = f(q) + a`` with
``f = 0``: the commanded joint velocity is applied directly and integrated
with explicit Euler steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class KinematicsError(ValueError):
    """Invalid chain, attachment or singular inverse-kinematics request."""


def rot_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def make_transform(rotation=None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def is_rigid(T: np.ndarray, tol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
        and np.allclose(T[3], [0, 0, 0, 1], atol=tol)
    )


@dataclass(frozen=True, eq=False)
class Joint:
    """Revolute joint: fixed parent-to-joint transform, then rotation about ``axis``."""

    axis: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        origin = np.asarray(self.origin, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise KinematicsError(f"joint axis must be a unit vector, got {axis}")
        if not is_rigid(origin):
            raise KinematicsError("joint origin is not a rigid transform")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", origin)


@dataclass(frozen=True, eq=False)
class Attachment:
    """A point rigidly fixed to link ``link_index`` (0 = base link)."""

    link_index: int
    local_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(
            self, "local_offset", np.asarray(self.local_offset, dtype=float).reshape(3)
        )


@dataclass(frozen=True, eq=False)
class SphereCover:
    spheres: tuple  # of (Attachment, radius)

    def __post_init__(self):
        spheres = tuple((a, float(r)) for a, r in self.spheres)
        for _, r in spheres:
            if not r > 0:
                raise KinematicsError(f"sphere radius must be positive, got {r}")
        object.__setattr__(self, "spheres", spheres)

    def __len__(self):
        return len(self.spheres)


class SerialChain:
    """Ordered revolute joints hanging off ``base_pose``.

    Link ``k`` is the frame after joint ``k``; link 0 is the base itself.
    Positions are returned in the frame ``base_pose`` maps into.
    """

    def __init__(
        self,
        joints: Sequence[Joint],
        q_min,
        q_max,
        base_pose=None,
    ):
        self.joints = tuple(joints)
        self.base_pose = np.eye(4) if base_pose is None else np.asarray(base_pose, float)
        self.q_min = np.asarray(q_min, dtype=float).reshape(-1)
        self.q_max = np.asarray(q_max, dtype=float).reshape(-1)
        n = len(self.joints)
        if self.q_min.shape != (n,) or self.q_max.shape != (n,):
            raise KinematicsError("joint limits must have one entry per joint")
        if not np.all(self.q_min < self.q_max):
            raise KinematicsError("q_min must be strictly below q_max")
        if not is_rigid(self.base_pose):
            raise KinematicsError("base_pose is not a rigid transform")
        # single-entry memo; evaluation of several constraint blocks at one q
        # shares the frame computation
        self.axes = np.array([j.axis for j in self.joints]).reshape(-1, 3)
        self._origin_R = [j.origin[:3, :3] for j in self.joints]
        self._origin_t = [j.origin[:3, 3] for j in self.joints]
        self._memo = (None, None, None)

    @property
    def n(self) -> int:
        return len(self.joints)

    def _frames_uncached(self, q: np.ndarray) -> np.ndarray:
        n = self.n
        # batched Rodrigues for all joints
        a = self.axes
        c, s = np.cos(q), np.sin(q)
        K = np.zeros((n, 3, 3))
        K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -a[:, 2], a[:, 1], -a[:, 0]
        K[:, 1, 0], K[:, 2, 0], K[:, 2, 1] = a[:, 2], -a[:, 1], a[:, 0]
        rots = (
            np.eye(3)
            + s[:, None, None] * K
            + (1.0 - c)[:, None, None] * (a[:, :, None] * a[:, None, :] - np.eye(3))
        )
        # frames[k] is link k
        frames = np.zeros((n + 1, 4, 4))
        frames[:, 3, 3] = 1.0
        frames[0] = self.base_pose
        R = self.base_pose[:3, :3]
        p = self.base_pose[:3, 3]
        for j in range(n):
            p = p + R @ self._origin_t[j]
            R = R @ self._origin_R[j] @ rots[j]
            frames[j + 1, :3, :3] = R
            frames[j + 1, :3, 3] = p
        return frames

    def frames(self, q) -> np.ndarray:
        """Homogeneous transforms of links 0..n, shape ``(n+1, 4, 4)``."""
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise KinematicsError(f"expected {self.n} joint angles, got shape {q.shape}")
        return self._lookup(q)[0]

    def _lookup(self, q):
        key = q.tobytes()
        memo = self._memo
        if memo[0] == key:
            return memo[1], memo[2]
        frames = self._frames_uncached(q)
        points = {}
        self._memo = (key, frames, points)
        return frames, points

    def check_attachment(self, a: Attachment) -> None:
        if not (0 <= a.link_index <= self.n) or int(a.link_index) != a.link_index:
            raise KinematicsError(
                f"attachment link_index {a.link_index} outside [0, {self.n}]"
            )

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_memo"] = (None, None, None)
        return state


def _point_and_jacobian(chain: SerialChain, q, a: Attachment):
    chain.check_attachment(a)
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise KinematicsError(f"expected {chain.n} joint angles, got shape {q.shape}")
    frames, points = chain._lookup(q)
    hit = points.get(a)
    if hit is not None:
        return hit
    k = a.link_index
    T = frames[k]
    p = T[:3, :3] @ a.local_offset + T[:3, 3]
    J = np.zeros((3, chain.n))
    if k:
        # rotation about the joint axis leaves the axis and origin unchanged
        w = np.einsum("kij,kj->ki", frames[1 : k + 1, :3, :3], chain.axes[:k])
        r = p - frames[1 : k + 1, :3, 3]
        J[0, :k] = w[:, 1] * r[:, 2] - w[:, 2] * r[:, 1]
        J[1, :k] = w[:, 2] * r[:, 0] - w[:, 0] * r[:, 2]
        J[2, :k] = w[:, 0] * r[:, 1] - w[:, 1] * r[:, 0]
    p.flags.writeable = False
    J.flags.writeable = False
    points[a] = (p, J)
    return p, J


def forward_point(chain: SerialChain, q, a: Attachment) -> np.ndarray:
    return _point_and_jacobian(chain, q, a)[0]


def point_jacobian(chain: SerialChain, q, a: Attachment) -> np.ndarray:
    """Linear-velocity Jacobian (3 x n) of an attached point.

    Column j is ``w_j x (p - o_j)`` for joints proximal to the link and zero
    otherwise.
    """
    return _point_and_jacobian(chain, q, a)[1]


def cover_kinematics(chain: SerialChain, q, cover: SphereCover):
    """Centres ``(m, 3)``, radii ``(m,)`` and Jacobians ``(m, 3, n)`` of a cover."""
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise KinematicsError(f"expected {chain.n} joint angles, got shape {q.shape}")
    frames, points = chain._lookup(q)
    hit = points.get(cover)
    if hit is not None:
        return hit
    links = np.array([a.link_index for a, _ in cover.spheres], dtype=int)
    for a, _ in cover.spheres:
        chain.check_attachment(a)
    offsets = np.array([a.local_offset for a, _ in cover.spheres]).reshape(-1, 3)
    radii = np.array([r for _, r in cover.spheres])
    F = frames[links]
    P = np.einsum("mij,mj->mi", F[:, :3, :3], offsets) + F[:, :3, 3]
    n = chain.n
    W = np.einsum("kij,kj->ki", frames[1:, :3, :3], chain.axes)  # (n, 3)
    O = frames[1:, :3, 3]
    r = P[:, None, :] - O[None, :, :]  # (m, n, 3)
    Wb = np.broadcast_to(W, r.shape)
    cross = np.empty_like(r)
    cross[..., 0] = Wb[..., 1] * r[..., 2] - Wb[..., 2] * r[..., 1]
    cross[..., 1] = Wb[..., 2] * r[..., 0] - Wb[..., 0] * r[..., 2]
    cross[..., 2] = Wb[..., 0] * r[..., 1] - Wb[..., 1] * r[..., 0]
    cross *= (np.arange(n)[None, :] < links[:, None])[..., None]
    J = np.ascontiguousarray(cross.transpose(0, 2, 1))
    for arr in (P, radii, J):
        arr.flags.writeable = False
    points[cover] = (P, radii, J)
    return P, radii, J


def sphere_positions(chain: SerialChain, q, cover: SphereCover):
    return [(forward_point(chain, q, a), r) for a, r in cover.spheres]


def damped_pinv_ik(chain: SerialChain, q, v_task, a: Attachment, damping: float = 0.0):
    """Joint velocity realising task-space velocity ``v_task`` at point ``a``.

    ``qdot = J^T (J J^T + damping^2 I)^-1 v``. A 2-vector selects the x-y rows
    of the point Jacobian.
    """
    v = np.asarray(v_task, dtype=float).reshape(-1)
    if v.size not in (2, 3):
        raise KinematicsError("task velocity must have 2 or 3 components")
    if damping < 0:
        raise KinematicsError("damping must be non-negative")
    J = point_jacobian(chain, q, a)[: v.size]
    A = J @ J.T + damping**2 * np.eye(v.size)
    if damping == 0.0:
        s = np.linalg.svd(J, compute_uv=False)
        if s[-1] <= 1e-12 * max(s[0], 1.0):
            raise KinematicsError(
                "Jacobian is rank deficient; use a positive damping factor"
            )
    return J.T @ np.linalg.solve(A, v)


@dataclass(frozen=True, eq=False)
class JointState:
    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        qdot = np.asarray(self.qdot, dtype=float).reshape(-1)
        if q.shape != qdot.shape:
            raise KinematicsError("q and qdot must have equal length")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qdot)

    @classmethod
    def at_rest(cls, q, t: float = 0.0) -> "JointState":
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q), t)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot)))


def integrate(state: JointState, qdot_cmd, dt: float) -> JointState:
    """Explicit Euler step. No joint-limit clamping."""
    if not dt > 0:
        raise KinematicsError("dt must be positive")
    qdot_cmd = np.asarray(qdot_cmd, dtype=float)
    return replace(state, q=state.q + qdot_cmd * dt, qdot=qdot_cmd.copy(), t=state.t + dt)


class KinematicPlant:
    """Velocity-controlled robot: ``qdot = f(q) + a`` with ``f = 0``."""

    def __init__(self, chain: SerialChain, state: JointState):
        self.chain = chain
        self.state = state

    def drift(self, state: JointState | None = None) -> np.ndarray:
        state = self.state if state is None else state
        return np.zeros(self.chain.n)

    def step(self, qdot_cmd, dt: float) -> JointState:
        self.state = integrate(self.state, self.drift() + np.asarray(qdot_cmd, float), dt)
        return self.state
