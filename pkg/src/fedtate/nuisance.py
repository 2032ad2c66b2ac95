"""Per-site propensity and outcome models: IRLS logistic and OLS linear fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import expit

from .domain import OutcomeKind, SiteDataset, TreatmentArm

RIDGE_FALLBACK = 1e-4
PROB_EDGE = 1e-8


class FitError(ValueError):
    """Nuisance model could not be fitted."""


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    ridge_used: float = 0.0

    def predict(self, X) -> np.ndarray:
        return expit(design(X) @ self.coefficients)


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    residual_variance: float

    def predict(self, X) -> np.ndarray:
        return design(X) @ self.coefficients


Fit = Union[LinearFit, LogisticFit]


@dataclass(frozen=True)
class OutcomeFits:
    fit_treated: Fit
    fit_control: Fit

    def for_arm(self, arm) -> Fit:
        return self.fit_treated if int(arm) == 1 else self.fit_control

    def predict(self, X, arm) -> np.ndarray:
        return self.for_arm(arm).predict(X)


def design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


def _loglik(eta, y):
    # sum y*eta - log(1+exp(eta)), computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _irls(D, y, ridge, max_iter, tol):
    k = D.shape[1]
    pen = np.full(k, ridge)
    pen[0] = 0.0
    beta = np.zeros(k)
    eta = D @ beta
    obj = _loglik(eta, y) - 0.5 * np.sum(pen * beta ** 2)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = D.T @ (y - mu) - pen * beta
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        W = mu * (1.0 - mu)
        H = D.T @ (D * W[:, None]) + np.diag(pen)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise FitError("singular weighted cross-product") from None
        if not np.all(np.isfinite(step)):
            raise FitError("singular weighted cross-product")
        t = 1.0
        for _ in range(21):
            cand = beta + t * step
            ceta = D @ cand
            cobj = _loglik(ceta, y) - 0.5 * np.sum(pen * cand ** 2)
            if cobj >= obj:
                break
            t *= 0.5
        else:
            # no ascent possible along Newton direction; at numerical optimum
            mu = expit(eta)
            score = D.T @ (y - mu) - pen * beta
            converged = bool(np.max(np.abs(score)) < tol)
            break
        beta, eta, obj = cand, ceta, cobj
    else:
        mu = expit(eta)
        score = D.T @ (y - mu) - pen * beta
        converged = bool(np.max(np.abs(score)) < tol)
    return beta, converged, it


def fit_logistic(X, y, max_iter: int = 100, tol: float = 1e-10) -> LogisticFit:
    """Logistic regression of y on [1|X] by Newton/IRLS with step-halving.

    Falls back to a small ridge on the slopes when the data look separated.
    """
    y = np.asarray(y, dtype=float).ravel()
    D = design(X)
    if y.size == 0 or np.all(y == y[0]):
        raise FitError("degenerate response")
    beta, conv, it = _irls(D, y, 0.0, max_iter, tol)
    p = expit(D @ beta)
    separated = np.any((p < PROB_EDGE) | (p > 1 - PROB_EDGE)) or not np.all(np.isfinite(beta))
    if not separated:
        return LogisticFit(beta, conv, it, 0.0)
    # fitted probabilities pinned at 0/1: the score only vanishes as the
    # coefficients run off to infinity, so treat as quasi-separation
    beta, _, it = _irls(D, y, RIDGE_FALLBACK, max_iter, tol)
    if not np.all(np.isfinite(beta)):
        raise FitError("non-finite coefficients after ridge fallback")
    # converged=False records that the unpenalized MLE does not exist
    return LogisticFit(beta, False, it, RIDGE_FALLBACK)


def fit_linear(X, y) -> LinearFit:
    """OLS of y on [1|X] via a Cholesky solve of the normal equations."""
    y = np.asarray(y, dtype=float).ravel()
    D = design(X)
    n, k = D.shape
    G = D.T @ D
    if n < k or np.linalg.matrix_rank(G) < k:
        raise FitError("singular design")
    try:
        c = np.linalg.cholesky(G)
        beta = np.linalg.solve(c.T, np.linalg.solve(c, D.T @ y))
    except np.linalg.LinAlgError:
        raise FitError("singular design") from None
    r = y - D @ beta
    rv = float(r @ r / (n - k)) if n > k else 0.0
    return LinearFit(beta, rv)


def fit_propensity(ds: SiteDataset, **kw) -> LogisticFit:
    if not (np.any(ds.treatment == 1) and np.any(ds.treatment == 0)):
        raise FitError(f"site {ds.site_id}: both arms are needed for a propensity fit")
    return fit_logistic(ds.covariates, ds.treatment, **kw)


def predict_propensity(fit: LogisticFit, X, arm, clip: float = 1e-3) -> np.ndarray:
    """P(A = arm | X), clipped into [clip, 1 - clip]."""
    if not 0.0 < clip < 0.5:
        raise ValueError("clip must lie in (0, 0.5)")
    p1 = fit.predict(X)
    p = p1 if int(arm) == 1 else 1.0 - p1
    return np.clip(p, clip, 1.0 - clip)


def fit_outcomes(ds: SiteDataset) -> OutcomeFits:
    fits = {}
    for arm in (TreatmentArm.TREATED, TreatmentArm.CONTROL):
        m = ds.arm_mask(arm)
        n_arm = int(m.sum())
        if n_arm < ds.p + 2:
            name = "treated" if arm == 1 else "control"
            raise FitError(f"insufficient arm size ({name}, {n_arm})")
        X, y = ds.covariates[m], ds.outcome[m]
        if ds.outcome_kind is OutcomeKind.BINARY:
            fits[arm] = fit_logistic(X, y)
        else:
            fits[arm] = fit_linear(X, y)
    return OutcomeFits(fits[TreatmentArm.TREATED], fits[TreatmentArm.CONTROL])
