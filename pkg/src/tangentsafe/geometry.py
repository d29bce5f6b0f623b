"""Box constraints from masked depth images.

Masked pixels are lifted through the pinhole model into the robot base
frame, merged across views and wrapped in oriented bounding boxes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .constraints import OrientedBBox
from .kinematics import is_rigid

log = logging.getLogger(__name__)

OBB_FORMAT = "tangentsafe-obb"
OBB_FORMAT_VERSION = 1
MIN_EXTENT = 1e-3


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))  # camera -> base

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        pose = np.asarray(self.pose, dtype=float)
        if not is_rigid(pose):
            raise ValueError("camera pose is not a rigid transform")
        object.__setattr__(self, "pose", pose)

    def project(self, points):
        """Base-frame points -> ``(u, v, z)`` with ``z`` the camera depth."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        R, t = self.pose[:3, :3], self.pose[:3, 3]
        Xc = (P - t) @ R
        z = Xc[:, 2]
        u = self.fx * Xc[:, 0] / z + self.cx
        v = self.fy * Xc[:, 1] / z + self.cy
        return u, v, z

    def rays(self, width: int, height: int):
        """Base-frame origin and per-pixel directions (camera z component 1)."""
        v, u = np.mgrid[0:height, 0:width].astype(float)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        return self.pose[:3, 3], d @ self.pose[:3, :3].T


@dataclass(frozen=True, eq=False)
class MaskedDepth:
    mask: np.ndarray
    depth: np.ndarray  # metres, 0 = invalid

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        depth = np.asarray(self.depth, dtype=float)
        if mask.shape != depth.shape or mask.ndim != 2:
            raise ValueError("mask and depth must be 2-D rasters of equal shape")
        if np.any(depth < 0) or not np.all(np.isfinite(depth)):
            raise ValueError("depth must be finite and non-negative")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "depth", depth)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


def lift_mask(cam: CameraModel, md: MaskedDepth) -> np.ndarray:
    """Back-project valid masked pixels; an empty ``(0, 3)`` array if none."""
    valid = md.mask & (md.depth > 0)
    v, u = np.nonzero(valid)
    z = md.depth[v, u]
    Xc = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    return Xc @ cam.pose[:3, :3].T + cam.pose[:3, 3]


def merge_views(point_sets, voxel: float | None = None) -> np.ndarray:
    """Union of base-frame point sets, sorted lexicographically.

    With ``voxel`` set, only one point per cubic cell of that size is kept
    (the lexicographically smallest).
    """
    sets = [np.asarray(p, dtype=float).reshape(-1, 3) for p in point_sets]
    P = np.concatenate(sets, axis=0) if sets else np.zeros((0, 3))
    if len(P) == 0:
        return P
    P = P[np.lexsort((P[:, 2], P[:, 1], P[:, 0]))]
    if voxel:
        keys = np.floor(P / voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        P = P[np.sort(first)]
    return P


def _right_handed(R: np.ndarray) -> np.ndarray:
    if np.linalg.det(R) < 0:
        R = R.copy()
        R[:, 2] = -R[:, 2]
    return R


def _box_along(points: np.ndarray, R: np.ndarray):
    proj = points @ R
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    return R, lo, hi, float(np.prod(np.maximum(hi - lo, MIN_EXTENT)))


def _min_area_axes_2d(pts2: np.ndarray):
    """Rotating calipers: in-plane directions of the minimum-area rectangle."""
    try:
        hull = ConvexHull(pts2)
        ring = pts2[hull.vertices]
    except (QhullError, ValueError):
        return []
    edges = np.roll(ring, -1, axis=0) - ring
    lengths = np.linalg.norm(edges, axis=1)
    edges = edges[lengths > 0] / lengths[lengths > 0, None]
    best, best_area = None, np.inf
    for e in edges:
        f = np.array([-e[1], e[0]])
        pe, pf = ring @ e, ring @ f
        area = (pe.max() - pe.min()) * (pf.max() - pf.min())
        if area < best_area:
            best, best_area = e, area
    return [] if best is None else [best]


def _candidate_rotations(points: np.ndarray, yaw_steps: int):
    # gravity-aligned yaw sweep first: ties are resolved in its favour
    for k in range(yaw_steps):
        th = math.radians(k * 180.0 / yaw_steps)
        c, s = math.cos(th), math.sin(th)
        yield np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    centered = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    yield _right_handed(vecs[:, ::-1])

    try:
        hull = ConvexHull(points)
    except (QhullError, ValueError):
        return
    normals = np.unique(np.round(hull.equations[:, :3], 12), axis=0)
    for nrm in normals:
        nrm = nrm / np.linalg.norm(nrm)
        helper = np.eye(3)[np.argmin(np.abs(nrm))]
        e1 = np.cross(nrm, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(nrm, e1)
        pts2 = np.stack([points @ e1, points @ e2], axis=1)
        for d in _min_area_axes_2d(pts2):
            a = d[0] * e1 + d[1] * e2
            b = np.cross(nrm, a)
            yield _right_handed(np.stack([a, b, nrm], axis=1))


def _verticality(R: np.ndarray) -> float:
    return float(np.max(np.abs(R[2])))


def fit_obb(points, yaw_steps: int = 180) -> OrientedBBox:
    """Small oriented box around ``points`` (at least 4).

    Candidate orientations: a 1-degree yaw sweep about the vertical axis, the
    principal axes, and every convex-hull facet normal paired with the
    minimum-area rectangle of the projected points. The smallest-volume
    candidate wins, and among equal volumes the one with an axis closest to
    vertical. Extents below 1 mm are floored.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 4:
        raise ValueError(f"need at least 4 points to fit a box, got {len(P)}")
    try:
        support = P[ConvexHull(P).vertices]
    except (QhullError, ValueError):
        support = P

    best = None
    for R in _candidate_rotations(support, yaw_steps):
        cand = _box_along(support, R)
        if best is None or cand[3] < best[3] * (1 - 1e-9):
            best = cand
        elif cand[3] <= best[3] * (1 + 1e-9) and _verticality(R) > _verticality(best[0]) + 1e-12:
            # partial views leave equal-volume boxes; keep one upright axis
            best = cand
    R, lo, hi, _ = best
    extents = hi - lo
    if np.any(extents < MIN_EXTENT):
        log.warning("degenerate point set (extents %s); flooring at %g m", extents, MIN_EXTENT)
        extents = np.maximum(extents, MIN_EXTENT)
    return OrientedBBox(center=R @ ((lo + hi) / 2), rotation=R, extents=extents)


def export_constraints(boxes, path) -> Path:
    path = Path(path)
    lines = [
        f"# {OBB_FORMAT} format_version {OBB_FORMAT_VERSION}",
        "# columns: center_x center_y center_z r00 r01 r02 r10 r11 r12 r20 r21 r22 "
        "extent_x extent_y extent_z  (metres, rotation box->base row-major)",
    ]
    for b in boxes:
        vals = [*b.center, *b.rotation.reshape(-1), *b.extents]
        lines.append(" ".join(repr(float(v)) for v in vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def load_obb_file(path) -> list[OrientedBBox]:
    path = Path(path)
    boxes = []
    header_ok = False
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if parts[:2] == [OBB_FORMAT, "format_version"]:
                if int(parts[2]) != OBB_FORMAT_VERSION:
                    raise ValueError(f"{path}:{lineno}: unsupported version {parts[2]}")
                header_ok = True
            continue
        if not header_ok:
            raise ValueError(f"{path}:{lineno}: missing {OBB_FORMAT} header")
        try:
            vals = [float(x) for x in s.split()]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if len(vals) != 15:
            raise ValueError(f"{path}:{lineno}: expected 15 values, got {len(vals)}")
        try:
            boxes.append(OrientedBBox(vals[:3], np.reshape(vals[3:12], (3, 3)), vals[12:]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not header_ok:
        raise ValueError(f"{path}: missing {OBB_FORMAT} header")
    return boxes


# -- synthetic scenes ------------------------------------------------------

def _ray_box(origin, dirs, box: OrientedBBox, eps: float = 1e-9):
    """Entry parameter of each ray into ``box`` (inf on miss)."""
    R = box.rotation
    o = R.T @ (origin - box.center)
    d = dirs @ R
    half = box.extents / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.where(d == 0, np.where(np.abs(o) <= half * (1 + eps), -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where(np.abs(o) <= half * (1 + eps), np.inf, -np.inf), np.maximum(t1, t2))
    t_in = tmin.max(axis=-1)
    t_out = tmax.min(axis=-1)
    hit = (t_in <= t_out + eps * np.max(box.extents)) & (t_in > 0)
    return np.where(hit, t_in, np.inf)


def render_scene(cam: CameraModel, boxes, width: int, height: int):
    """Ray-cast depth and instance labels (0 = background, i+1 = boxes[i])."""
    origin, dirs = cam.rays(width, height)
    depth = np.full((height, width), np.inf)
    labels = np.zeros((height, width), dtype=np.int32)
    for i, box in enumerate(boxes):
        t = _ray_box(origin, dirs, box)
        closer = t < depth
        depth[closer] = t[closer]
        labels[closer] = i + 1
    depth[~np.isfinite(depth)] = 0.0
    return depth, labels


def aligned_camera_pair(box: OrientedBBox, distance: float = 1.0, pixels: int = 80,
                        margin: int = 5):
    """Top and side cameras whose pixel centres land exactly on the box corners.

    The top camera faces the box's +z face, the side camera its +x face;
    each returns ``(camera, width, height)``.
    """
    R, c, h = box.rotation, box.center, box.extents
    ex, ey, ez = R[:, 0], R[:, 1], R[:, 2]

    def face_camera(normal, right, down, half_depth, w_ext, h_ext):
        rot = np.stack([right, down, -normal], axis=1)
        pose = np.eye(4)
        pose[:3, :3] = rot
        pose[:3, 3] = c + normal * (half_depth + distance)
        fx = distance * pixels / w_ext
        fy = distance * pixels / h_ext
        cam = CameraModel(fx, fy, margin + pixels / 2, margin + pixels / 2, pose)
        size = pixels + 2 * margin + 1
        return cam, size, size

    top = face_camera(ez, ex, -ey, h[2] / 2, h[0], h[1])
    side = face_camera(ex, ey, -ez, h[0] / 2, h[1], h[2])
    return [top, side]


def save_view(path, cam: CameraModel, depth, labels) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, pose=cam.pose,
                 depth=np.asarray(depth, float), labels=np.asarray(labels, np.int32))
    return path


def load_view(path):
    with np.load(path) as z:
        cam = CameraModel(float(z["fx"]), float(z["fy"]), float(z["cx"]), float(z["cy"]),
                          z["pose"])
        return cam, z["depth"].astype(float), z["labels"].astype(np.int32)


def fit_boxes_from_views(views, voxel: float | None = None):
    """One box per instance label over all views; labels with < 4 points are skipped."""
    per_label: dict[int, list] = {}
    for cam, depth, labels in views:
        for lab in np.unique(labels):
            if lab == 0:
                continue
            pts = lift_mask(cam, MaskedDepth(labels == lab, depth))
            if len(pts):
                per_label.setdefault(int(lab), []).append(pts)
    boxes = []
    for lab in sorted(per_label):
        pts = merge_views(per_label[lab], voxel=voxel)
        if len(pts) < 4:
            log.warning("instance %d has only %d points; skipped", lab, len(pts))
            continue
        boxes.append((lab, fit_obb(pts)))
    return boxes
