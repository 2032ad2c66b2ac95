"""Exponential-tilt density ratio fitted from the target's covariate means.

The ratio is w(x) = exp(gamma' psi(x)) with psi(x) = (1, x).  gamma solves
mean_i psi(x_i) w(x_i) = (1, target means) over the source sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .nuisance import design

EXP_CAP = 700.0
MAX_HALVINGS = 40
HULL_CHECK_AFTER = 25


class TiltError(RuntimeError):
    """Tilt estimating equations could not be solved."""

    def __init__(self, message, residual_norm=float("nan")):
        super().__init__(message)
        self.residual_norm = residual_norm


class TiltInfeasible(TiltError):
    """Target means fall outside what any tilt of the source can reach."""


@dataclass(frozen=True)
class TargetMoments:
    means: np.ndarray
    n_target: int

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.means, dtype=float))
        if not np.all(np.isfinite(m)):
            raise ValueError("target means must be finite")
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")
        object.__setattr__(self, "means", m)

    @property
    def tau(self) -> np.ndarray:
        return np.concatenate([[1.0], self.means])


@dataclass(frozen=True)
class TiltFit:
    gamma: np.ndarray
    converged: bool
    residual_norm: float
    iterations: int = 0


def density_ratio_weights(fit: TiltFit, X) -> np.ndarray:
    return np.exp(np.minimum(design(X) @ fit.gamma, EXP_CAP))


def _residual(gamma, Psi, tau):
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(np.minimum(Psi @ gamma, EXP_CAP))
        return Psi.T @ w / Psi.shape[0] - tau, w


def moment_residual(fit: TiltFit, source_X, target: TargetMoments) -> float:
    """Sup-norm of the tilt estimating equations at fit.gamma."""
    r, _ = _residual(fit.gamma, design(source_X), target.tau)
    return float(np.max(np.abs(r)))


def check_feasible(source_X, target: TargetMoments) -> None:
    X = np.asarray(source_X, dtype=float).reshape(len(source_X), -1)
    lo, hi = X.min(axis=0), X.max(axis=0)
    bad = np.flatnonzero((target.means <= lo) | (target.means >= hi))
    if bad.size:
        j = int(bad[0])
        raise TiltInfeasible(
            f"target mean of x{j + 1} ({target.means[j]:.6g}) outside source range "
            f"[{lo[j]:.6g}, {hi[j]:.6g}]")


def in_hull_interior(source_X, point) -> bool:
    """Is ``point`` a strictly positive convex combination of the source rows?

    That is the exact condition for the tilt equations to have a solution.
    Solved as the LP  max t  s.t.  lambda_i >= t, sum lambda = 1, X' lambda = point.
    """
    X = np.asarray(source_X, dtype=float).reshape(len(source_X), -1)
    n, p = X.shape
    # variables (lambda_1..lambda_n, t); minimize -t
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.zeros((p + 1, n + 1))
    A_eq[:p, :n] = X.T
    A_eq[p, :n] = 1.0
    b_eq = np.concatenate([np.asarray(point, dtype=float), [1.0]])
    A_ub = np.zeros((n, n + 1))
    A_ub[:, :n] = -np.eye(n)
    A_ub[:, -1] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * n + [(None, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9 / n)


def solve_tilt(source_X, target: TargetMoments, tol: float = 1e-9,
               max_iter: int = 200) -> TiltFit:
    """Newton iterations with step-halving on the residual 2-norm.

    When Newton is slow (more than HULL_CHECK_AFTER iterations) the target
    means are tested against the interior of the source convex hull, so a
    target no tilt can reach fails fast with TiltInfeasible.
    """
    check_feasible(source_X, target)
    Psi = design(source_X)
    n = Psi.shape[0]
    tau = target.tau
    gamma = np.zeros(Psi.shape[1])
    r, w = _residual(gamma, Psi, tau)
    norm2 = float(r @ r)
    for it in range(max_iter + 1):
        sup = float(np.max(np.abs(r)))
        if sup < tol:
            return TiltFit(gamma, True, sup, it)
        if it == max_iter:
            break
        if it == HULL_CHECK_AFTER and not in_hull_interior(source_X, target.means):
            raise TiltInfeasible("target means lie outside the interior of the source "
                                 "covariate hull", sup)
        J = Psi.T @ (Psi * w[:, None]) / n
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            raise TiltError("singular tilt Jacobian", sup) from None
        if not np.all(np.isfinite(step)):
            raise TiltError("singular tilt Jacobian", sup)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = gamma - t * step
            cr, cw = _residual(cand, Psi, tau)
            with np.errstate(over="ignore", invalid="ignore"):
                cn = float(cr @ cr)
            if np.isfinite(cn) and cn <= norm2:
                break
            t *= 0.5
        else:
            if not in_hull_interior(source_X, target.means):
                raise TiltInfeasible("target means lie outside the interior of the source "
                                     "covariate hull", sup)
            raise TiltError("tilt line search failed", sup)
        gamma, r, w, norm2 = cand, cr, cw, cn
    raise TiltError(f"tilt did not converge in {max_iter} iterations "
                    f"(residual {float(np.max(np.abs(r))):.3g})", float(np.max(np.abs(r))))
