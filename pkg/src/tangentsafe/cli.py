"""Command-line entry point: ``tangentsafe run | fitbox | synth | validate``."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import geometry
from .constraints import OrientedBBox
from .harness import EpisodeMetrics, run_episode, summarize
from .kinematics import rot_axis_angle
from .scenario import ENV_SCENARIO, ConfigError, load_scenario

log = logging.getLogger("tangentsafe")

MODES = {"filtered": (True,), "unfiltered": (False,), "both": (True, False)}


def _print_defaults(sc, out=None) -> None:
    out = sys.stdout if out is None else out
    cfg = sc.filter_cfg
    print(f"scenario       {sc.name} ({sc.source})", file=out)
    print(f"slack beta     {cfg.slack_beta:g}", file=out)
    print(f"slack tau      {cfg.slack_tolerance:g}", file=out)
    print(f"error gain K   {cfg.error_gain:g} 1/s", file=out)
    print(f"drift clip     {cfg.drift_clip if cfg.drift_clip is not None else 'off'}", file=out)
    print(f"policy rate    {sc.policy_hz:g} Hz", file=out)
    print(f"filter rate    {sc.filter_hz:g} Hz ({sc.substeps_per_action} substeps/action)", file=out)
    print(f"chunk size     {sc.chunk_size}", file=out)
    print(f"duration       {sc.duration_s:g} s ({sc.n_actions} actions)", file=out)
    print(f"constraints    {', '.join(f'{b.name}[{b.k}]' for b in sc.constraints.blocks)}",
          file=out)
    out.flush()


def _columns(block_names) -> list[str]:
    probe = EpisodeMetrics(0, True, 0.0, {}, 0, False, False, math.nan, 0)
    return list(probe.row(block_names).keys())


def _max_trace(result):
    t = np.array([r.t for r in result.records])
    g = np.array([float(np.max(r.g)) if len(r.g) else -math.inf for r in result.records])
    return t, g


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.scenario)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.episodes < 1:
        print("error: --episodes must be at least 1", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory {out} is not writable: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        _print_defaults(sc)

    names = sc.constraints.names
    columns = _columns(names)
    logs_dir = out / "logs"
    if args.logs != "none":
        logs_dir.mkdir(exist_ok=True)
    metrics_path = out / "metrics.csv"
    traces, per_mode_max = {}, {}
    completed = True
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        fh.flush()
        try:
            for with_filter in MODES[args.mode]:
                mode = "filtered" if with_filter else "unfiltered"
                metrics = []
                for i in range(args.episodes):
                    seed = args.seed + i
                    log_path = None
                    if args.logs == "all" or (args.logs == "first" and i == 0):
                        log_path = logs_dir / f"{mode}_seed{seed}.jsonl"
                    res = run_episode(sc, with_filter, seed, log_path=log_path)
                    metrics.append(res.metrics)
                    completed &= not res.metrics.aborted
                    if i == 0:
                        traces[mode] = _max_trace(res)
                    writer.writerow(res.metrics.row(names))
                    fh.flush()
                writer.writerow(summarize(metrics, names))
                fh.flush()
                per_mode_max[mode] = [m.max_violation for m in metrics]
                if not args.quiet:
                    s = summarize(metrics, names)
                    print(f"{mode:10s} success {float(s['success']):.3f}  "
                          f"safe_success {float(s['safe_success']):.3f}  "
                          f"violating episodes {sum(m.violation_steps > 0 for m in metrics)}"
                          f"/{len(metrics)}  aborted {s['aborted']}")
        except KeyboardInterrupt:
            print(f"interrupted; partial results in {metrics_path}", file=sys.stderr)
            return 130
        except Exception as exc:  # keep whatever rows were already flushed
            print(f"error: run aborted ({exc}); partial results in {metrics_path}",
                  file=sys.stderr)
            return 1

    if not args.no_figures:
        from . import plotting

        tau = sc.filter_cfg.slack_tolerance
        plotting.violation_trace(traces, tau, out / "violation_trace.png",
                                 f"{sc.name}, seed {args.seed}")
        plotting.violation_histogram(per_mode_max, tau, out / "max_violation_hist.png", sc.name)
    if not args.quiet:
        print(f"wrote {metrics_path}")
    return 0 if completed else 1


def cmd_fitbox(args) -> int:
    views = []
    for p in args.cams:
        try:
            views.append(geometry.load_view(p))
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {p}: {exc}", file=sys.stderr)
            return 2
    fitted = geometry.fit_boxes_from_views(views, voxel=args.voxel)
    out = Path(args.out)
    geometry.export_constraints([box for _, box in fitted], out)
    if not fitted:
        print(f"no valid masked depth pixels in any view; wrote empty constraint file {out}")
        return 0
    for label, box in fitted:
        ext = ", ".join(f"{e:.6f}" for e in box.extents)
        print(f"box {label}: extents [{ext}] m  volume {box.volume:.6g} m^3")
    print(f"wrote {len(fitted)} box(es) to {out}")
    return 0


def cmd_synth(args) -> int:
    """Render a single-box scene into a top/side camera pair."""
    R = rot_axis_angle(np.array([0.0, 0.0, 1.0]), args.yaw)
    box = OrientedBBox(args.center, R, args.extents)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, (cam, w, h) in zip(("top", "side"), geometry.aligned_camera_pair(box)):
        depth, labels = geometry.render_scene(cam, [box], w, h)
        path = geometry.save_view(out / f"{name}.npz", cam, depth, labels)
        print(f"wrote {path}")
    return 0


def check_jacobians(constraints, q, step=1e-6, tol=1e-5):
    """Central-difference check of every block; returns ``[(name, error, ok)]``."""
    q = np.asarray(q, dtype=float)
    report = []
    for block in constraints.blocks:
        _, J = block.evaluate(q)
        fd = np.empty_like(J)
        for j in range(q.size):
            e = np.zeros_like(q)
            e[j] = step
            gp, _ = block.evaluate(q + e)
            gm, _ = block.evaluate(q - e)
            fd[:, j] = (gp - gm) / (2 * step)
        err = float(np.max(np.abs(J - fd) / (1.0 + np.abs(fd)))) if J.size else 0.0
        report.append((block.name, err, err <= tol))
    return report


def cmd_validate(args) -> int:
    checks = []

    def record(name, ok, detail=""):
        checks.append(ok)
        print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")

    path = args.scenario
    try:
        text = Path(path).read_text()
        data = yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as exc:
        record("parse", False, str(exc))
        return 1
    rates = (data or {}).get("rates", {}) if isinstance(data, dict) else {}
    try:
        ph, fh = float(rates["policy_hz"]), float(rates["filter_hz"])
        ratio = fh / ph
        ok = ph > 0 and fh > 0 and abs(ratio - round(ratio)) <= 1e-9 and round(ratio) >= 1
        record("rates", ok, f"filter_hz/policy_hz = {ratio:g}")
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
        record("rates", False, f"missing or invalid rates ({exc})")
    try:
        sc = load_scenario(path)
    except ConfigError as exc:
        record("config", False, str(exc))
        return 1
    record("config", True)

    chain = sc.chain
    frames = chain.frames(sc.q0)
    rigid = all(np.allclose(T[:3, :3].T @ T[:3, :3], np.eye(3), atol=1e-9) for T in frames)
    record("chain", rigid and np.all(np.isfinite(frames)), f"{chain.n} joints")
    inside = bool(np.all(sc.q0 >= chain.q_min) and np.all(sc.q0 <= chain.q_max))
    record("initial_state_limits", inside)
    g, _ = sc.constraints.evaluate(sc.q0)
    record("initial_state_feasible", bool(np.all(g <= 0)), f"max g = {g.max():.3g}")
    for name, err, ok in check_jacobians(_validate_constraints(sc), sc.q0):
        record(f"jacobian[{name}]", ok, f"max rel. error {err:.2e}")
    return 0 if all(checks) else 1


def _validate_constraints(sc):
    # indirection so tests can substitute a deliberately broken constraint set
    return sc.constraints


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tangentsafe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log warnings and info")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run seeded filtered/unfiltered episodes")
    run.add_argument("--scenario", default=None,
                     help=f"scenario YAML (default: ${ENV_SCENARIO})")
    run.add_argument("--episodes", type=int, default=1)
    run.add_argument("--seed", type=int, default=0, help="first seed")
    run.add_argument("--mode", choices=sorted(MODES), default="both")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--logs", choices=("all", "first", "none"), default="all",
                     help="which episodes get a per-substep JSONL log")
    run.add_argument("--no-figures", action="store_true")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    fit = sub.add_parser("fitbox", help="fit boxes to masked depth views")
    fit.add_argument("--cams", nargs="+", required=True, help="view .npz files")
    fit.add_argument("--out", required=True, help="OBB constraint file to write")
    fit.add_argument("--voxel", type=float, default=None, help="merge voxel size (m)")
    fit.set_defaults(func=cmd_fitbox)

    syn = sub.add_parser("synth", help="render a synthetic single-box scene")
    syn.add_argument("--center", type=float, nargs=3, default=[0.6, 0.0, 0.1])
    syn.add_argument("--extents", type=float, nargs=3, default=[0.2, 0.1, 0.15])
    syn.add_argument("--yaw", type=float, default=0.3, help="rad")
    syn.add_argument("--out", required=True, help="output directory")
    syn.set_defaults(func=cmd_synth)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True)
    val.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
