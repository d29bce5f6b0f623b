"""Scenario files: YAML with explicit units in key names.

``load_scenario`` validates the document and builds the chain, sphere cover,
constraint set, filter config and policy description. ``Scenario.config``
keeps the source document; every default is applied deterministically at
load time, so dumping and reloading it reproduces a run exactly.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import geometry
from .atacom import FilterConfig
from .constraints import (
    ConstraintError,
    ConstraintSet,
    JointLimitBlock,
    OBBBlock,
    OrientedBBox,
    TableParams,
    WorkspaceBlock,
    airhockey_blocks,
    stack,
)
from .kinematics import Attachment, Joint, SerialChain, SphereCover, make_transform

ENV_SCENARIO = "TANGENTSAFE_SCENARIO"


class ConfigError(ValueError):
    pass


def rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def _key_lines(text: str) -> dict:
    """Map dotted key paths (list items by index) to 1-based source lines."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = f"{path}[{i}]"
                lines[p] = v.start_mark.line + 1
                walk(v, p)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


class _Doc:
    """Typed accessors that report ``path:line`` on failure."""

    def __init__(self, data, source: str, lines: dict):
        self.data = data
        self.source = source
        self.lines = lines

    def fail(self, key: str, msg: str):
        line = self.lines.get(key)
        while line is None and ("." in key or "[" in key):
            key = key.rsplit(".", 1)[0] if "." in key else key.rsplit("[", 1)[0]
            line = self.lines.get(key)
        loc = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{loc}: {msg}")

    def get(self, key: str, default=KeyError):
        node = self.data
        for part in _split(key):
            if isinstance(part, int):
                if not isinstance(node, list) or part >= len(node):
                    node = KeyError
                    break
                node = node[part]
            else:
                if not isinstance(node, dict) or part not in node:
                    node = KeyError
                    break
                node = node[part]
        if node is KeyError:
            if default is KeyError:
                self.fail(key, f"missing required key '{key}'")
            return default
        return node

    def num(self, key, default=KeyError, positive=False) -> float:
        v = self.get(key, default)
        try:
            v = float(v)
        except (TypeError, ValueError):
            self.fail(key, f"'{key}' must be a number")
        if not np.isfinite(v) or (positive and not v > 0):
            self.fail(key, f"'{key}' must be {'positive' if positive else 'finite'}")
        return v

    def vec(self, key, size=None, default=KeyError) -> np.ndarray:
        v = self.get(key, default)
        try:
            arr = np.asarray(v, dtype=float).reshape(-1)
        except (TypeError, ValueError):
            self.fail(key, f"'{key}' must be a list of numbers")
        if size is not None and arr.size != size:
            self.fail(key, f"'{key}' must have {size} entries, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            self.fail(key, f"'{key}' must be finite")
        return arr


def _split(key: str):
    out = []
    for part in key.split("."):
        while "[" in part:
            head, rest = part.split("[", 1)
            if head:
                out.append(head)
            idx, part = rest.split("]", 1)
            out.append(int(idx))
        if part:
            out.append(part)
    return out


@dataclass
class Scenario:
    name: str
    chain: SerialChain
    attachments: dict
    cover: SphereCover | None
    constraints: ConstraintSet
    q0: np.ndarray
    filter_cfg: FilterConfig
    policy_hz: float
    filter_hz: float
    chunk_size: int
    duration_s: float
    policy: dict
    task: dict
    success: dict
    config: dict = field(repr=False)
    source: str = "<memory>"

    @property
    def substeps_per_action(self) -> int:
        return int(round(self.filter_hz / self.policy_hz))

    @property
    def n_actions(self) -> int:
        return int(round(self.duration_s * self.policy_hz))

    @property
    def ee(self) -> Attachment:
        return self.attachments["ee"]


def _attachment(doc: _Doc, key: str, n: int) -> Attachment:
    link = doc.get(f"{key}.link")
    if not isinstance(link, int) or not 0 <= link <= n:
        doc.fail(f"{key}.link", f"link index must be an integer in [0, {n}]")
    return Attachment(link, doc.vec(f"{key}.offset_m", 3, default=[0, 0, 0]))


def _build_chain(doc: _Doc) -> SerialChain:
    joints = doc.get("chain.joints")
    if not isinstance(joints, list) or not joints:
        doc.fail("chain.joints", "chain.joints must be a non-empty list")
    built = []
    for i in range(len(joints)):
        k = f"chain.joints[{i}]"
        axis = doc.vec(f"{k}.axis", 3)
        if abs(np.linalg.norm(axis) - 1) > 1e-12:
            doc.fail(f"{k}.axis", "joint axis must have unit norm")
        origin = make_transform(
            rpy_matrix(doc.vec(f"{k}.origin_rpy_rad", 3, default=[0, 0, 0])),
            doc.vec(f"{k}.origin_xyz_m", 3, default=[0, 0, 0]),
        )
        built.append(Joint(axis, origin))
    n = len(built)
    q_min = doc.vec("chain.q_min_rad", n)
    q_max = doc.vec("chain.q_max_rad", n)
    if not np.all(q_min < q_max):
        doc.fail("chain.q_min_rad", "q_min_rad must be strictly below q_max_rad")
    base = make_transform(
        rpy_matrix(doc.vec("chain.base_rpy_rad", 3, default=[0, 0, 0])),
        doc.vec("chain.base_xyz_m", 3, default=[0, 0, 0]),
    )
    return SerialChain(built, q_min, q_max, base)


def _build_constraints(doc: _Doc, chain, cover, attachments, base_dir: Path) -> ConstraintSet:
    decls = doc.get("constraints")
    if not isinstance(decls, list):
        doc.fail("constraints", "constraints must be a list")
    blocks = []
    for i, decl in enumerate(decls):
        k = f"constraints[{i}]"
        kind = doc.get(f"{k}.type")
        name = doc.get(f"{k}.name", kind if kind != "obb" else f"obb{i}")
        if kind == "joint_limits":
            blocks.append(JointLimitBlock(chain.q_min, chain.q_max, name=name))
        elif kind in ("workspace", "obb", "obb_file") and cover is None:
            doc.fail(k, f"constraint '{kind}' needs a sphere cover")
        elif kind == "workspace":
            lo, hi = doc.vec(f"{k}.x_min_m", 3), doc.vec(f"{k}.x_max_m", 3)
            if not np.all(lo < hi):
                doc.fail(k, "workspace x_min_m must be below x_max_m")
            blocks.append(WorkspaceBlock(chain, cover, lo, hi, name=name))
        elif kind == "obb":
            center = doc.vec(f"{k}.center_m", 3)
            R = rpy_matrix(doc.vec(f"{k}.rpy_rad", 3, default=[0, 0, 0]))
            extents = doc.vec(f"{k}.extents_m", 3)
            try:
                box = OrientedBBox(center, R, extents)
            except ConstraintError as exc:
                doc.fail(f"{k}.extents_m", str(exc))
            blocks.append(OBBBlock(chain, cover, box, name=name))
        elif kind == "obb_file":
            path = Path(doc.get(f"{k}.path"))
            if not path.is_absolute():
                path = base_dir / path
            try:
                boxes = geometry.load_obb_file(path)
            except (OSError, ValueError) as exc:
                doc.fail(f"{k}.path", str(exc))
            for j, box in enumerate(boxes):
                blocks.append(OBBBlock(chain, cover, box, name=f"{name}_{j}"))
        elif kind == "airhockey_table":
            for a in ("ee", "wrist", "elbow"):
                if a not in attachments:
                    doc.fail(k, f"airhockey_table needs attachment '{a}'")
            if not doc.num(f"{k}.z_low_m") < doc.num(f"{k}.z_high_m"):
                doc.fail(k, "z_low_m must be below z_high_m")
            table = TableParams(
                **{f: doc.num(f"{k}.{f}_m") for f in TableParams.__dataclass_fields__}
            )
            hs = airhockey_blocks(chain, attachments["ee"], attachments["wrist"],
                                  attachments["elbow"], table)
            blocks.extend(hs.blocks)
        else:
            doc.fail(f"{k}.type", f"unknown constraint type {kind!r}")
    try:
        return stack(*blocks)
    except ValueError as exc:
        doc.fail("constraints", str(exc))


def scenario_from_dict(data: dict, source: str = "<memory>", lines: dict | None = None,
                       base_dir=None) -> Scenario:
    doc = _Doc(data, source, lines or {})
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    chain = _build_chain(doc)
    n = chain.n

    attachments = {}
    for key in (doc.get("attachments", {}) or {}):
        attachments[key] = _attachment(doc, f"attachments.{key}", n)
    if "ee" not in attachments:
        doc.fail("attachments", "an 'ee' attachment is required")

    cover = None
    spheres = doc.get("spheres", None)
    if spheres:
        items = []
        for i in range(len(spheres)):
            k = f"spheres[{i}]"
            items.append((_attachment(doc, k, n), doc.num(f"{k}.radius_m", positive=True)))
        cover = SphereCover(items)

    constraints = _build_constraints(doc, chain, cover, attachments, base_dir)
    q0 = doc.vec("initial_q_rad", n)

    f = "filter"
    drift_clip = doc.get(f"{f}.drift_clip_rad_s", None)
    filter_hz = doc.num("rates.filter_hz", positive=True)
    cfg = FilterConfig(
        slack_beta=doc.num(f"{f}.slack_beta", positive=True),
        slack_tolerance=doc.num(f"{f}.slack_tolerance", positive=True),
        error_gain=doc.num(f"{f}.error_gain_per_s", positive=True),
        drift_clip=None if drift_clip in (None, False) else doc.num(f"{f}.drift_clip_rad_s", positive=True),
        substep_dt=1.0 / filter_hz,
        null_rank_tol=doc.num(f"{f}.null_rank_tol", default=1e-10, positive=True),
    )
    policy_hz = doc.num("rates.policy_hz", positive=True)
    ratio = filter_hz / policy_hz
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        doc.fail("rates.filter_hz", f"filter_hz ({filter_hz}) must be an integer multiple of "
                 f"policy_hz ({policy_hz})")
    chunk = doc.get("rates.chunk_size")
    if not isinstance(chunk, int) or chunk < 1:
        doc.fail("rates.chunk_size", "chunk_size must be a positive integer")

    policy = doc.get("policy")
    if not isinstance(policy, dict) or "kind" not in policy:
        doc.fail("policy", "policy needs a 'kind'")
    if policy["kind"] not in ("zero", "random", "scripted_hit", "reach", "replay"):
        doc.fail("policy.kind", f"unknown policy kind {policy['kind']!r}")

    return Scenario(
        name=str(doc.get("name", Path(source).stem)),
        chain=chain,
        attachments=attachments,
        cover=cover,
        constraints=constraints,
        q0=q0,
        filter_cfg=cfg,
        policy_hz=policy_hz,
        filter_hz=filter_hz,
        chunk_size=chunk,
        duration_s=doc.num("episode.duration_s", positive=True),
        policy=copy.deepcopy(policy),
        task=copy.deepcopy(doc.get("task", {}) or {}),
        success=copy.deepcopy(doc.get("success", {}) or {}),
        config=copy.deepcopy(data),
        source=source,
    )


def load_scenario(path=None) -> Scenario:
    """Load a scenario file; ``path`` falls back to ``$TANGENTSAFE_SCENARIO``."""
    if path is None:
        path = os.environ.get(ENV_SCENARIO)
        if not path:
            raise ConfigError(f"no scenario path given and ${ENV_SCENARIO} is unset")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{line}: {getattr(exc, 'problem', exc)}") from None
    return scenario_from_dict(data, str(path), _key_lines(text), base_dir=path.parent)


def dump_scenario(sc: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(sc.config, sort_keys=False))
    return path


def builtin_scenario_path(name: str) -> Path:
    return Path(str(resources.files("tangentsafe") / "scenarios" / f"{name}.yaml"))


def builtin_scenarios() -> list[str]:
    root = resources.files("tangentsafe") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))
