"""Differentiable inequality constraints ``g(q) <= 0`` with analytic Jacobians.

Every block maps a joint configuration to ``(g, J)`` with ``g`` of length
``k`` and ``J = dg/dq`` of shape ``(k, n)``. Blocks are stateless, so a
:class:`ConstraintSet` may evaluate them concurrently.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kinematics import (
    Attachment,
    SerialChain,
    SphereCover,
    cover_kinematics,
    forward_point,
    point_jacobian,
)

log = logging.getLogger(__name__)

# below this distance from the box centre the shrink factor is undefined
EPS_CENTER = 1e-6


class ConstraintError(ValueError):
    pass


class DegenerateCenterError(ConstraintError):
    """Sphere centre at the box centre, or sphere swallowing the box centre."""


@dataclass(frozen=True, eq=False)
class OrientedBBox:
    center: np.ndarray
    rotation: np.ndarray
    extents: np.ndarray  # full side lengths

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        h = np.asarray(self.extents, dtype=float).reshape(3)
        if not np.all(h > 0):
            raise ConstraintError(f"box extents must be positive, got {h}")
        if not (
            np.allclose(R.T @ R, np.eye(3), atol=1e-9) and abs(np.linalg.det(R) - 1) <= 1e-9
        ):
            raise ConstraintError("box rotation must be a proper rotation matrix")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "extents", h)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def to_box_frame(self, x_base) -> np.ndarray:
        return self.rotation.T @ (np.asarray(x_base, dtype=float) - self.center)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return (signs * self.extents / 2) @ self.rotation.T + self.center


def _obb_distance_many(X, r, box: OrientedBBox):
    """Vectorised core of :func:`obb_distance` for ``m`` sphere centres.

    Returns ``(d, p, grad, degenerate)``; degenerate rows carry ``d = 0`` and
    a zero gradient.
    """
    x_bb = (X - box.center) @ box.rotation
    norm = np.linalg.norm(x_bb, axis=1)
    safe = np.where(norm < EPS_CENTER, 1.0, norm)
    alpha = 1.0 - r / safe
    degenerate = (norm < EPS_CENTER) | (alpha <= 0.0)
    y = alpha[:, None] * x_bb
    half = box.extents / 2
    p = np.clip(y, -half, half)
    diff = y - p
    d = np.linalg.norm(diff, axis=1)
    live = (d > 0.0) & ~degenerate
    grad = np.zeros_like(X)
    if np.any(live):
        u = diff[live] / d[live, None]
        xl = x_bb[live]
        nl = safe[live]
        # d y / d x_bb = alpha I + r x x^T / |x|^3 (symmetric)
        grad_bb = alpha[live, None] * u + (r[live] / nl**3)[:, None] * xl * np.sum(
            xl * u, axis=1, keepdims=True
        )
        grad[live] = grad_bb @ box.rotation.T
    d = np.where(degenerate, 0.0, d)
    return d, p, grad, degenerate


def obb_distance(x_base, r: float, box: OrientedBBox):
    """Distance between a sphere's near point and an oriented box.

    The sphere centre is expressed in the box frame, pulled towards the box
    centre by the radius (``alpha = 1 - r/|x|``) and compared with its clip
    onto the box. Returns ``(d, p, grad)`` where ``p`` is the closest box
    point in the box frame and ``grad = dd/dx_base``.
    """
    x = np.asarray(x_base, dtype=float).reshape(1, 3)
    norm = np.linalg.norm(box.to_box_frame(x[0]))
    if norm < EPS_CENTER:
        raise DegenerateCenterError("sphere centre coincides with the box centre")
    if 1.0 - r / norm <= 0.0:
        raise DegenerateCenterError("sphere contains the box centre")
    d, p, grad, _ = _obb_distance_many(x, np.array([float(r)]), box)
    return float(d[0]), p[0], grad[0]


class ConstraintBlock:
    """Base class; subclasses fill ``kind``, ``k``, ``n`` and ``evaluate``."""

    kind = "block"
    unit = "m"

    def __init__(self, k: int, n: int, name: str | None = None):
        self.k = int(k)
        self.n = int(n)
        self.name = name or self.kind

    def evaluate(self, q) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover
        raise NotImplementedError

    def __call__(self, q):
        return self.evaluate(q)

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, k={self.k}, n={self.n})"


class JointLimitBlock(ConstraintBlock):
    """``((q - q_mid)/half_range)^2 - 1 <= 0`` per joint."""

    kind = "joint_limits"
    unit = "1"

    def __init__(self, q_min, q_max, name=None):
        self.q_min = np.asarray(q_min, dtype=float).reshape(-1)
        self.q_max = np.asarray(q_max, dtype=float).reshape(-1)
        if self.q_min.shape != self.q_max.shape or not np.all(self.q_min < self.q_max):
            raise ConstraintError("invalid joint limits")
        self.q_mid = (self.q_max + self.q_min) / 2
        self.half_range = (self.q_max - self.q_min) / 2
        super().__init__(self.q_min.size, self.q_min.size, name)

    def evaluate(self, q):
        e = (np.asarray(q, dtype=float) - self.q_mid) / self.half_range
        return e**2 - 1.0, np.diag(2.0 * e / self.half_range)


def joint_limit_block(q_min, q_max, name=None) -> JointLimitBlock:
    return JointLimitBlock(q_min, q_max, name)


class WorkspaceBlock(ConstraintBlock):
    """Every sphere stays, with its full radius, inside an axis-aligned box.

    Rows are ordered per sphere as ``[lower x, y, z, upper x, y, z]``.
    """

    kind = "workspace"

    def __init__(self, chain: SerialChain, cover: SphereCover, x_min, x_max, name=None):
        self.chain = chain
        self.cover = cover
        self.x_min = np.asarray(x_min, dtype=float).reshape(3)
        self.x_max = np.asarray(x_max, dtype=float).reshape(3)
        if not np.all(self.x_min < self.x_max):
            raise ConstraintError("workspace x_min must be below x_max")
        for a, _ in cover.spheres:
            chain.check_attachment(a)
        super().__init__(6 * len(cover), chain.n, name)

    def evaluate(self, q):
        P, radii, Jp = cover_kinematics(self.chain, q, self.cover)
        m = len(radii)
        g = np.empty((m, 6))
        g[:, :3] = self.x_min - P + radii[:, None]
        g[:, 3:] = P - self.x_max + radii[:, None]
        J = np.concatenate([-Jp, Jp], axis=1)  # (m, 6, n)
        return g.reshape(-1), J.reshape(-1, self.n)


def workspace_block(chain, cover, x_min, x_max, name=None) -> WorkspaceBlock:
    return WorkspaceBlock(chain, cover, x_min, x_max, name)


class OBBBlock(ConstraintBlock):
    """``g = -d_bb`` for every sphere of the cover against one box."""

    kind = "obb"

    def __init__(self, chain: SerialChain, cover: SphereCover, box: OrientedBBox, name=None):
        self.chain = chain
        self.cover = cover
        self.box = box
        for a, _ in cover.spheres:
            chain.check_attachment(a)
        super().__init__(len(cover), chain.n, name)

    def evaluate(self, q):
        P, radii, Jp = cover_kinematics(self.chain, q, self.cover)
        d, _, grad, degenerate = _obb_distance_many(P, radii, self.box)
        for i in np.flatnonzero(degenerate):
            log.warning("%s row %d saturated at g=0: sphere centre at or around the box centre",
                        self.name, i)
        return -d, -np.einsum("mi,min->mn", grad, Jp)


def obb_block(chain, cover, box, name=None) -> OBBBlock:
    return OBBBlock(chain, cover, box, name)


class PointBoundBlock(ConstraintBlock):
    """Half-space rows ``sign * (x_axis(point) - bound) <= 0``.

    ``rows`` holds ``(attachment, axis index, sign, bound)`` tuples.
    """

    kind = "point_bounds"

    def __init__(self, chain: SerialChain, rows, name=None):
        self.chain = chain
        self.rows = [(a, int(ax), float(s), float(b)) for a, ax, s, b in rows]
        for a, ax, s, _ in self.rows:
            chain.check_attachment(a)
            if ax not in (0, 1, 2) or s not in (-1.0, 1.0):
                raise ConstraintError("row axis must be 0..2 and sign +-1")
        super().__init__(len(self.rows), chain.n, name)

    def evaluate(self, q):
        g = np.empty(self.k)
        J = np.empty((self.k, self.n))
        seen = {}
        for i, (a, ax, s, b) in enumerate(self.rows):
            if id(a) not in seen:
                seen[id(a)] = (forward_point(self.chain, q, a), point_jacobian(self.chain, q, a))
            x, Jp = seen[id(a)]
            g[i] = s * (x[ax] - b)
            J[i] = s * Jp[ax]
        return g, J


@dataclass(frozen=True)
class TableParams:
    z_low: float
    z_high: float
    x_low: float
    y_low: float
    y_high: float
    z_wrist_low: float
    z_elbow_low: float

    def __post_init__(self):
        vals = np.array([getattr(self, f) for f in self.__dataclass_fields__])
        if not np.all(np.isfinite(vals)):
            raise ConstraintError("table parameters must be finite")
        if not self.z_low < self.z_high:
            raise ConstraintError("z_low must be below z_high")


class ConstraintSet:
    """Ordered blocks stacked row-wise."""

    def __init__(self, blocks: Sequence[ConstraintBlock] = ()):
        self.blocks = tuple(blocks)
        ns = {b.n for b in self.blocks}
        if len(ns) > 1:
            raise ConstraintError(f"blocks disagree on joint dimension: {sorted(ns)}")
        self.n = ns.pop() if ns else None
        self.slices = {}
        start = 0
        for b in self.blocks:
            if b.name in self.slices:
                raise ConstraintError(f"duplicate block name {b.name!r}")
            self.slices[b.name] = slice(start, start + b.k)
            start += b.k
        self.K = start

    def __len__(self):
        return self.K

    @property
    def names(self):
        return [b.name for b in self.blocks]

    def evaluate(self, q, parallel: bool = False):
        q = np.asarray(q, dtype=float)
        n = q.size if self.n is None else self.n
        if q.shape != (n,):
            raise ConstraintError(f"expected {n} joint values, got shape {q.shape}")
        if not self.blocks:
            return np.zeros(0), np.zeros((0, n))
        if parallel and len(self.blocks) > 1:
            with ThreadPoolExecutor(max_workers=len(self.blocks)) as pool:
                results = list(pool.map(lambda b: b.evaluate(q), self.blocks))
        else:
            results = [b.evaluate(q) for b in self.blocks]
        g = np.concatenate([r[0] for r in results])
        J = np.vstack([r[1] for r in results])
        return g, J

    def per_block(self, g):
        return {name: g[s] for name, s in self.slices.items()}


def stack(*blocks) -> ConstraintSet:
    flat = []
    for b in blocks:
        flat.extend(b.blocks if isinstance(b, ConstraintSet) else [b])
    return ConstraintSet(flat)


def airhockey_blocks(
    chain: SerialChain,
    ee: Attachment,
    wrist: Attachment,
    elbow: Attachment,
    table: TableParams,
) -> ConstraintSet:
    """Mallet height band, table bounds, wrist/elbow floors, then joint limits."""
    rows = [
        (ee, 2, -1, table.z_low),
        (ee, 2, +1, table.z_high),
        (ee, 0, -1, table.x_low),
        (ee, 1, -1, table.y_low),
        (ee, 1, +1, table.y_high),
        (wrist, 2, -1, table.z_wrist_low),
        (elbow, 2, -1, table.z_elbow_low),
    ]
    return stack(
        PointBoundBlock(chain, rows, name="table"),
        JointLimitBlock(chain.q_min, chain.q_max, name="joint_limits"),
    )
