"""Site-level mean potential outcome estimators and their influence values.

Influence values here are on the *site scale*: for an estimator built from a
site of size n, ``value - truth ~= mean(per_patient_if)``.  Multiplying by
N / n gives the all-patients convention where ``value - truth ~= sum / N``
over every patient in the study (patients of other sites contribute 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .domain import OutcomeKind, SiteDataset, TreatmentArm
from .nuisance import LinearFit, LogisticFit, OutcomeFits, design, predict_propensity
from .tilt import TiltFit, density_ratio_weights

SIMPLE = "simple"
GENERAL = "general"


class EstimationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IfCorrectionTerms:
    """Plug-in pieces of the nuisance-estimation corrections.

    d1 -- derivative of the estimator in the propensity parameters
    d2 -- derivative in the outcome-model parameters
    i_hess_inv -- inverse of the outcome least-squares Hessian (per patient)
    phi_design_inv -- inverse of the logistic information (per patient)
    h1_inv -- inverse of the tilt Jacobian (source sites only)
    """

    d1: np.ndarray
    d2: np.ndarray
    i_hess_inv: np.ndarray
    phi_design_inv: np.ndarray
    h1_inv: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ArmEstimate:
    arm: TreatmentArm
    value: float
    per_patient_if: np.ndarray
    site_id: str
    n_contributing: int
    # target estimates: outcome-model part u_i and centred covariates z_i,
    # the pieces a source estimator's target-patient influence is built from
    or_part: Optional[np.ndarray] = None
    centered_x: Optional[np.ndarray] = None
    # source estimates: augmentation term and d(augmentation)/d(target means)
    augmentation: Optional[float] = None
    tilt_gradient: Optional[np.ndarray] = None
    terms: Optional[IfCorrectionTerms] = field(default=None, repr=False)

    def target_part(self, target: "ArmEstimate") -> np.ndarray:
        """Influence of each target patient on this source estimate."""
        if self.tilt_gradient is None:
            raise EstimationError("not a source-augmented estimate")
        return target.or_part + target.centered_x @ self.tilt_gradient


def default_mode(ds: SiteDataset) -> str:
    return GENERAL if ds.outcome_kind is OutcomeKind.CONTINUOUS else SIMPLE


def _check_mode(ds, mode):
    mode = mode or default_mode(ds)
    if mode not in (SIMPLE, GENERAL):
        raise ValueError(f"unknown influence mode {mode!r}")
    if mode == GENERAL and ds.outcome_kind is OutcomeKind.BINARY:
        raise EstimationError("general corrections implemented for continuous outcome only")
    return mode


def _inv_pi_derivative(ps: LogisticFit, X, arm, clip):
    """d(1/pi_a)/d(alpha) = c_i * x~_i ; zero where the propensity is clipped."""
    p1 = ps.predict(X)
    pa = p1 if int(arm) == 1 else 1.0 - p1
    c = -(1.0 - p1) / p1 if int(arm) == 1 else p1 / (1.0 - p1)
    inside = (pa > clip) & (pa < 1.0 - clip)
    return np.where(inside, c, 0.0)


def _propensity_if(ps: LogisticFit, ds: SiteDataset):
    """Per-patient influence of the propensity coefficients, (n, p+1)."""
    D = design(ds.covariates)
    p1 = ps.predict(ds.covariates)
    pen = np.full(D.shape[1], ps.ridge_used)
    pen[0] = 0.0
    H = D.T @ (D * (p1 * (1 - p1))[:, None]) + np.diag(pen)
    Hinv_n = ds.n * np.linalg.inv(H)
    return (D * (ds.treatment - p1)[:, None]) @ Hinv_n, Hinv_n


def _outcome_if(fit: LinearFit, ds: SiteDataset, arm):
    """Per-patient influence of the arm-a least-squares coefficients, (n, p+1)."""
    D = design(ds.covariates)
    ind = ds.arm_mask(arm)
    Da = D[ind]
    Ginv_n = ds.n * np.linalg.inv(Da.T @ Da)
    resid = np.where(ind, ds.outcome - D @ fit.coefficients, 0.0)
    return (D * resid[:, None]) @ Ginv_n, Ginv_n


# --------------------------------------------------------------------------
# target site
# --------------------------------------------------------------------------

def target_or_mean(ds_T: SiteDataset, or_fits: OutcomeFits, arm) -> float:
    return float(np.mean(or_fits.predict(ds_T.covariates, arm)))


def _aipw_terms(ds, ps, or_fits, arm, clip):
    ind = ds.arm_mask(arm)
    if not ind.any():
        raise EstimationError(f"no arm-{'treated' if int(arm) == 1 else 'control'} patients "
                              f"in site {ds.site_id}")
    pi = predict_propensity(ps, ds.covariates, arm, clip)
    m = or_fits.predict(ds.covariates, arm)
    g = m + ind / pi * (ds.outcome - m)
    return ind, pi, m, g


def compute_target_if(ds_T: SiteDataset, ps: LogisticFit, or_fits: OutcomeFits, arm,
                      clip: float = 1e-3, mode: str | None = None, return_terms=False):
    """Site-scale influence values of the target AIPW estimator."""
    mode = _check_mode(ds_T, mode)
    ind, pi, m, g = _aipw_terms(ds_T, ps, or_fits, arm, clip)
    xi = g - g.mean()
    if mode == SIMPLE:
        return (xi, None) if return_terms else xi
    X = ds_T.covariates
    D = design(X)
    resid = ds_T.outcome - m
    c = _inv_pi_derivative(ps, X, arm, clip)
    d1 = D.T @ (ind * resid * c) / ds_T.n
    d2 = D.T @ (1.0 - ind / pi) / ds_T.n
    psi_a, Hinv = _propensity_if(ps, ds_T)
    psi_b, Ginv = _outcome_if(or_fits.for_arm(arm), ds_T, arm)
    xi = xi + psi_a @ d1 + psi_b @ d2
    if return_terms:
        return xi, IfCorrectionTerms(d1, d2, Ginv, Hinv)
    return xi


def target_aipw(ds_T: SiteDataset, ps: LogisticFit, or_fits: OutcomeFits, arm,
                clip: float = 1e-3, mode: str | None = None) -> ArmEstimate:
    """AIPW mean of the arm-a potential outcome over the target sample."""
    arm = TreatmentArm(int(arm))
    mode = _check_mode(ds_T, mode)
    _, _, m, g = _aipw_terms(ds_T, ps, or_fits, arm, clip)
    xi, terms = compute_target_if(ds_T, ps, or_fits, arm, clip, mode, return_terms=True)
    u = m - m.mean()
    if mode == GENERAL:
        psi_b, _ = _outcome_if(or_fits.for_arm(arm), ds_T, arm)
        u = u + psi_b @ design(ds_T.covariates).mean(axis=0)
    z = ds_T.covariates - ds_T.covariates.mean(axis=0)
    return ArmEstimate(arm, float(g.mean()), xi, ds_T.site_id, ds_T.n,
                       or_part=u, centered_x=z, terms=terms)


# --------------------------------------------------------------------------
# source sites
# --------------------------------------------------------------------------

def source_augmented(target_or_mean: float, ds_k: SiteDataset, tilt: TiltFit,
                     ps_k: LogisticFit, or_k: OutcomeFits, arm, clip: float = 1e-3,
                     mode: str | None = None) -> ArmEstimate:
    """Target outcome-model mean plus the source's density-ratio weighted residuals.

    ``per_patient_if`` holds the source-patient influence values (site scale);
    ``tilt_gradient`` is how the augmentation moves with the target means,
    which turns into influence on the target patients.
    """
    arm = TreatmentArm(int(arm))
    mode = _check_mode(ds_k, mode)
    ind = ds_k.arm_mask(arm)
    if not ind.any():
        name = "treated" if arm == 1 else "control"
        raise EstimationError(f"no arm-{name} patients in source")
    X = ds_k.covariates
    D = design(X)
    omega = density_ratio_weights(tilt, X)
    pi = predict_propensity(ps_k, X, arm, clip)
    resid = ds_k.outcome - or_k.predict(X, arm)
    r = ind * omega / pi * resid
    aug = float(r.mean())
    s = r - aug
    p = ds_k.p
    grad = np.zeros(p)
    terms = None
    if mode == GENERAL:
        n = ds_k.n
        J = D.T @ (D * omega[:, None]) / n
        Jinv = np.linalg.inv(J)
        tau = D.T @ omega / n
        g_gamma = D.T @ r / n
        c = _inv_pi_derivative(ps_k, X, arm, clip)
        d1 = D.T @ (ind * omega * resid * c) / n
        d2 = -D.T @ (ind * omega / pi) / n
        psi_g = -(D * omega[:, None] - tau) @ Jinv
        psi_a, Hinv = _propensity_if(ps_k, ds_k)
        psi_b, Ginv = _outcome_if(or_k.for_arm(arm), ds_k, arm)
        s = s + psi_g @ g_gamma + psi_a @ d1 + psi_b @ d2
        grad = (Jinv @ g_gamma)[1:]
        terms = IfCorrectionTerms(d1, d2, Ginv, Hinv, Jinv)
    return ArmEstimate(arm, float(target_or_mean + aug), s, ds_k.site_id, ds_k.n,
                       augmentation=aug, tilt_gradient=grad, terms=terms)


def compute_source_if(ds_T: SiteDataset, ds_k: SiteDataset, tilt: TiltFit, ps_k: LogisticFit,
                      or_k: OutcomeFits, or_T: OutcomeFits, arm, clip: float = 1e-3,
                      mode: str | None = None):
    """(target-patient, source-patient) site-scale influence of the source estimator."""
    mode = _check_mode(ds_k, mode)
    m_T = or_T.predict(ds_T.covariates, arm)
    est = source_augmented(float(m_T.mean()), ds_k, tilt, ps_k, or_k, arm, clip, mode)
    u = m_T - m_T.mean()
    if mode == GENERAL:
        psi_b, _ = _outcome_if(or_T.for_arm(arm), ds_T, arm)
        u = u + psi_b @ design(ds_T.covariates).mean(axis=0)
    z = ds_T.covariates - ds_T.covariates.mean(axis=0)
    return u + z @ est.tilt_gradient, est.per_patient_if


def local_aipw(ds: SiteDataset, ps: LogisticFit, or_fits: OutcomeFits, arm,
               clip: float = 1e-3, mode: str | None = None) -> ArmEstimate:
    """AIPW mean over a site's own sample (no transport to the target)."""
    return target_aipw(ds, ps, or_fits, arm, clip, mode)


def tate(mu1: ArmEstimate | float, mu0: ArmEstimate | float) -> float:
    v1 = mu1.value if isinstance(mu1, ArmEstimate) else float(mu1)
    v0 = mu0.value if isinstance(mu0, ArmEstimate) else float(mu0)
    return v1 - v0


def pool_target_estimates(estimates: list[ArmEstimate]) -> float:
    """Sample-size weighted average over several target sites."""
    n = np.array([e.n_contributing for e in estimates], dtype=float)
    v = np.array([e.value for e in estimates])
    return float(n @ v / n.sum())
