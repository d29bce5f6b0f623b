"""Tangent-space safety filter.

Inequalities ``g(q) <= 0`` become equalities ``c = g + exp(beta * mu) = 0``
through slack variables ``mu``. The safe joint velocity is::

    a_safe = a_drift + a_err + B @ a_rfm

with ``B`` the joint rows of an orthonormal basis of the null space of the
augmented Jacobian ``[dg/dq | diag(beta exp(beta mu))]``. Slack is recomputed
from ``g`` at every call, so the filter is a pure function of ``(q, a_rfm)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .constraints import ConstraintSet
from .kinematics import KinematicPlant


class BasisError(RuntimeError):
    """Augmented Jacobian lost row rank; carries the singular values."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


@dataclass(frozen=True)
class FilterConfig:
    slack_beta: float = 10.0
    slack_tolerance: float = 1e-3
    error_gain: float = 10.0  # 1/s
    drift_clip: float | None = 3.0  # rad/s; None disables
    substep_dt: float = 1.0 / 60.0
    null_rank_tol: float = 1e-10  # relative to the largest singular value

    def __post_init__(self):
        for name in ("slack_beta", "slack_tolerance", "error_gain", "substep_dt", "null_rank_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.drift_clip is not None and not self.drift_clip > 0:
            raise ValueError("drift_clip must be positive or None")

    @classmethod
    def manipulation(cls, **kw) -> "FilterConfig":
        """Pick-and-place preset: beta 10, tolerance 1e-3, 60 Hz."""
        return replace(cls(slack_beta=10.0, slack_tolerance=1e-3, error_gain=30.0,
                           substep_dt=1.0 / 60.0), **kw)

    @classmethod
    def airhockey(cls, **kw) -> "FilterConfig":
        """Air-hockey preset: beta 2, tolerance 1e-6, 50 Hz."""
        return replace(cls(slack_beta=2.0, slack_tolerance=1e-6, error_gain=50.0,
                           substep_dt=1.0 / 50.0), **kw)


def slack_from_constraint(g, cfg: FilterConfig) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return np.log(np.maximum(-g, cfg.slack_tolerance)) / cfg.slack_beta


def slack_value(mu, cfg: FilterConfig) -> np.ndarray:
    return np.exp(cfg.slack_beta * np.asarray(mu, dtype=float))


def augmented_constraint(g, mu, cfg: FilterConfig) -> np.ndarray:
    return np.asarray(g, dtype=float) + slack_value(mu, cfg)


def _interior_exact(c, g, cfg: FilterConfig) -> np.ndarray:
    # where the slack absorbs the whole margin, c is zero up to exp/log
    # round-off; snap it so interior states produce no correction at all
    return np.where(np.asarray(g) <= -cfg.slack_tolerance, 0.0, c)


def augmented_jacobian(J, mu, cfg: FilterConfig) -> np.ndarray:
    J = np.atleast_2d(np.asarray(J, dtype=float))
    mu = np.asarray(mu, dtype=float).reshape(-1)
    K = mu.size
    if J.shape[0] != K:
        raise ValueError(f"Jacobian has {J.shape[0]} rows but {K} slack values")
    J_c = np.zeros((K, J.shape[1] + K))
    J_c[:, : J.shape[1]] = J
    J_c[:, J.shape[1] :] = np.diag(cfg.slack_beta * slack_value(mu, cfg))
    return J_c


@dataclass
class _Factor:
    """Complete QR of ``J_c^T``, shared by the basis and the pseudo-inverse.

    ``J_c^T = Q [R; 0]``: the trailing ``n`` columns of ``Q`` span the null
    space of ``J_c`` and ``J_c^+ b = Q_1 R^-T b``.
    """

    Q: np.ndarray
    R: np.ndarray
    condition: float

    @classmethod
    def of(cls, J_c, cfg: FilterConfig) -> "_Factor":
        K = J_c.shape[0]
        if not np.all(np.isfinite(J_c)):
            raise BasisError("augmented Jacobian contains non-finite entries")
        Q, R = np.linalg.qr(J_c.T, mode="complete")
        R = R[:K]
        # J_c J_c^T >= diag(slack')^2, so the smallest slack derivative bounds
        # sigma_min from below; only fall back to an SVD when that bound is
        # not conclusive
        S = J_c[:, J_c.shape[1] - K :]
        diag = np.abs(np.diag(S))
        conclusive = (
            K > 0
            and np.array_equal(S, np.diag(np.diag(S)))
            and diag.min() > cfg.null_rank_tol * float(np.linalg.norm(J_c))
        )
        if K and not conclusive:
            s = np.linalg.svd(J_c, compute_uv=False)
            if s[-1] <= cfg.null_rank_tol * s[0]:
                raise BasisError(
                    f"augmented Jacobian rank below {K} (sigma_min={s[-1]:.3e}, "
                    f"sigma_max={s[0]:.3e})",
                    s,
                )
        d = np.abs(np.diag(R))
        cond = float(d.max() / d.min()) if K else 1.0
        return cls(Q, R, cond)

    def pinv_solve(self, rhs) -> np.ndarray:
        """Minimum-norm ``x`` with ``J_c x = rhs``."""
        K = self.R.shape[0]
        y = solve_triangular(self.R, rhs, trans="T", lower=False, check_finite=False)
        return self.Q[:, :K] @ y


def _null_basis(factor: _Factor, n: int) -> tuple[np.ndarray, np.ndarray]:
    K = factor.R.shape[0]
    N = factor.Q[:, K:]  # (n+K) x n, orthonormal
    # Procrustes gauge: rotate so the joint rows are as close to I as possible
    W, _, Zt = np.linalg.svd(N[:n].T)
    B_full = N @ (W @ Zt)
    return B_full, B_full[:n]


def tangent_basis(J_c, cfg: FilterConfig, n: int | None = None):
    """Orthonormal null-space basis ``B_full`` of ``J_c`` and its joint rows ``B``.

    Among all orthonormal bases the one whose joint block best matches the
    identity (trace alignment) is returned.
    """
    J_c = np.atleast_2d(np.asarray(J_c, dtype=float))
    K = J_c.shape[0]
    n = J_c.shape[1] - K if n is None else n
    if K == 0:
        I = np.eye(n)
        return I, I
    return _null_basis(_Factor.of(J_c, cfg), n)


def _clip_norm(v: np.ndarray, limit: float | None) -> np.ndarray:
    if limit is None:
        return v
    nrm = np.linalg.norm(v)
    return v * (limit / nrm) if nrm > limit else v


def drift_term(f_s, J_g, J_c, cfg: FilterConfig, full: bool = False) -> np.ndarray:
    """Cancel the constraint change caused by the uncontrolled dynamics ``f``."""
    f_s = np.asarray(f_s, dtype=float)
    n = f_s.size
    if J_c.shape[0] == 0 or not np.any(f_s):
        return np.zeros(J_c.shape[1] if full else n)
    a = -_Factor.of(J_c, cfg).pinv_solve(J_g @ f_s)
    if full:
        return a
    return _clip_norm(a[:n], cfg.drift_clip)


def error_correction(c, J_c, cfg: FilterConfig, full: bool = False) -> np.ndarray:
    """Pull violated augmented constraints back at rate ``error_gain``."""
    c = np.asarray(c, dtype=float)
    K = c.size
    n = J_c.shape[1] - K
    active = np.maximum(c, 0.0)
    if not np.any(active):
        return np.zeros(J_c.shape[1] if full else n)
    a = -_Factor.of(J_c, cfg).pinv_solve(cfg.error_gain * active)
    return a if full else a[:n]


@dataclass
class SafeActionBreakdown:
    a_drift: np.ndarray
    a_err: np.ndarray
    a_tangent: np.ndarray
    a_safe: np.ndarray
    B: np.ndarray
    B_full: np.ndarray
    g: np.ndarray
    J: np.ndarray
    mu: np.ndarray
    c: np.ndarray
    null_residual: float = 0.0
    orth_residual: float = 0.0
    condition: float = 1.0


def filter_action(q, a_rfm, constraints: ConstraintSet, cfg: FilterConfig, drift=None,
                  parallel: bool = False) -> SafeActionBreakdown:
    q = np.asarray(q, dtype=float)
    a_rfm = np.asarray(a_rfm, dtype=float)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(a_rfm))):
        raise ValueError("filter input contains non-finite values")
    n = q.size
    if a_rfm.shape != (n,):
        raise ValueError(f"action must have {n} entries, got shape {a_rfm.shape}")
    g, J = constraints.evaluate(q, parallel=parallel)
    K = g.size
    mu = slack_from_constraint(g, cfg)
    c = _interior_exact(augmented_constraint(g, mu, cfg), g, cfg)
    J_c = augmented_jacobian(J, mu, cfg) if K else np.zeros((0, n))

    if K == 0:
        B_full = B = np.eye(n)
        a_drift = np.zeros(n)
        a_err = np.zeros(n)
        cond = 1.0
    else:
        factor = _Factor.of(J_c, cfg)
        B_full, B = _null_basis(factor, n)
        cond = factor.condition
        f_s = np.zeros(n) if drift is None else np.asarray(drift, dtype=float)
        if np.any(f_s):
            a_drift = _clip_norm(-factor.pinv_solve(J @ f_s)[:n], cfg.drift_clip)
        else:
            a_drift = np.zeros(n)
        active = np.maximum(c, 0.0)
        if np.any(active):
            a_err = -factor.pinv_solve(cfg.error_gain * active)[:n]
        else:
            a_err = np.zeros(n)

    a_tangent = B @ a_rfm
    a_safe = a_drift + a_err + a_tangent
    null_res = float(np.linalg.norm(J_c @ B_full)) if K else 0.0
    orth_res = float(np.linalg.norm(B_full.T @ B_full - np.eye(n)))
    return SafeActionBreakdown(
        a_drift=a_drift, a_err=a_err, a_tangent=a_tangent, a_safe=a_safe,
        B=B, B_full=B_full, g=g, J=J, mu=mu, c=c,
        null_residual=null_res, orth_residual=orth_res, condition=cond,
    )


@dataclass
class SubstepRecord:
    t: float
    q: np.ndarray
    g: np.ndarray
    a_rfm: np.ndarray
    a_cmd: np.ndarray  # joint velocity actually applied
    drift_norm: float = 0.0
    err_norm: float = 0.0
    tangent_norm: float = 0.0
    safe_norm: float = 0.0
    null_residual: float = 0.0
    orth_residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "q": self.q.tolist(),
            "g": self.g.tolist(),
            "a_rfm": self.a_rfm.tolist(),
            "a_cmd": self.a_cmd.tolist(),
            "drift_norm": self.drift_norm,
            "err_norm": self.err_norm,
            "tangent_norm": self.tangent_norm,
            "safe_norm": self.safe_norm,
            "null_residual": self.null_residual,
            "orth_residual": self.orth_residual,
        }


def multirate_execute(
    plant: KinematicPlant,
    policy_chunk: Sequence,
    constraints: ConstraintSet,
    cfg: FilterConfig,
    substeps_per_action: int,
    action_map: Callable | None = None,
    filter_enabled: bool = True,
    on_substep: Callable[[SubstepRecord], None] | None = None,
):
    """Hold each chunk action for ``substeps_per_action`` filter substeps.

    ``action_map(q, action) -> joint velocity`` converts policy actions (e.g.
    Cartesian velocities) at the current configuration; identity by default.
    Every filter term is recomputed at every substep. Returns the visited
    states (initial state first) and one record per substep.
    """
    if substeps_per_action < 1 or int(substeps_per_action) != substeps_per_action:
        raise ValueError("substeps_per_action must be a positive integer")
    trajectory = [plant.state]
    records = []
    dt = cfg.substep_dt
    for action in policy_chunk:
        action = np.asarray(action, dtype=float)
        for _ in range(substeps_per_action):
            state = plant.state
            a_rfm = action if action_map is None else action_map(state.q, action)
            if filter_enabled:
                bd = filter_action(state.q, a_rfm, constraints, cfg, drift=plant.drift(state))
                rec = SubstepRecord(
                    t=state.t, q=state.q, g=bd.g, a_rfm=a_rfm, a_cmd=bd.a_safe,
                    drift_norm=float(np.linalg.norm(bd.a_drift)),
                    err_norm=float(np.linalg.norm(bd.a_err)),
                    tangent_norm=float(np.linalg.norm(bd.a_tangent)),
                    safe_norm=float(np.linalg.norm(bd.a_safe)),
                    null_residual=bd.null_residual,
                    orth_residual=bd.orth_residual,
                )
            else:
                g, _ = constraints.evaluate(state.q)
                rec = SubstepRecord(
                    t=state.t, q=state.q, g=g, a_rfm=a_rfm, a_cmd=a_rfm,
                    tangent_norm=float(np.linalg.norm(a_rfm)),
                    safe_norm=float(np.linalg.norm(a_rfm)),
                )
            records.append(rec)
            if on_substep is not None:
                on_substep(rec)
            trajectory.append(plant.step(rec.a_cmd, dt))
    return trajectory, records


def recovery_substeps(cfg: FilterConfig) -> int:
    """Substep budget for returning from a violation: ceil(5 / (K dt))."""
    return math.ceil(5.0 / (cfg.error_gain * cfg.substep_dt) - 1e-12)
