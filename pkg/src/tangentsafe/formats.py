"""Line-delimited JSON files: recorded action streams and trajectory logs.

Both start with a header object carrying ``format`` and ``version``; every
following line is one record. Floats are written with ``repr`` precision so
a write/read round trip is exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ACTION_FORMAT = "tangentsafe-actions"
TRAJECTORY_FORMAT = "tangentsafe-trajectory"
VERSION = 1


class FormatError(ValueError):
    pass


def write_action_stream(path, times, actions, meta: dict | None = None) -> Path:
    path = Path(path)
    header = {"format": ACTION_FORMAT, "version": VERSION, **(meta or {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for t, a in zip(times, actions):
            fh.write(json.dumps({"t": float(t), "a": [float(x) for x in a]}) + "\n")
    return path


def read_action_stream(path):
    """Return ``(header, times, actions)``; a zero-byte file is an empty stream."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return {}, np.zeros(0), np.zeros((0, 0))
    header = None
    times, actions = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if header is None:
            if not isinstance(rec, dict) or rec.get("format") != ACTION_FORMAT:
                raise FormatError(f"{path}:{lineno}: missing {ACTION_FORMAT} header")
            if rec.get("version") != VERSION:
                raise FormatError(f"{path}:{lineno}: unsupported version {rec.get('version')}")
            header = rec
            continue
        try:
            t = float(rec["t"])
            a = [float(x) for x in rec["a"]]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}:{lineno}: record needs numeric 't' and list 'a'") from None
        if actions and len(a) != len(actions[0]):
            raise FormatError(f"{path}:{lineno}: action length {len(a)} != {len(actions[0])}")
        times.append(t)
        actions.append(a)
    if not actions:
        return header, np.zeros(0), np.zeros((0, 0))
    return header, np.array(times), np.array(actions)


class TrajectoryWriter:
    """Streams substep records of one episode to a JSONL file."""

    def __init__(self, path, meta: dict):
        self.path = Path(path)
        self._fh = open(self.path, "w")
        self._fh.write(json.dumps({"format": TRAJECTORY_FORMAT, "version": VERSION, **meta}) + "\n")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory(path):
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty trajectory log")
    header = json.loads(lines[0])
    if header.get("format") != TRAJECTORY_FORMAT:
        raise FormatError(f"{path}:1: missing {TRAJECTORY_FORMAT} header")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return header, records
