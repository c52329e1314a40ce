"""Average-treatment-effect estimators.

Three weighted estimators share the r/M missingness weights: outcome
regression (OR), inverse probability weighting (IPW), and the doubly
robust combination (DR). Complete-case and multiple-imputation baselines
apply the textbook unweighted formulas. Bootstrap and stacked-sandwich
standard errors are provided for all of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, resample
from .errors import (
    BadConfig,
    ExtremeWeight,
    MnarError,
    RankDeficient,
    TooFewDonors,
    TooManyFailures,
)
from .glm import (
    BERNOULLI,
    OUTCOME,
    TREATMENT,
    LinearModelParams,
    ModelSpec,
    design_matrix,
    fit_model,
)
from .solver import EquationSystem, sandwich_covariance
from .wee import FittedModels, WeeStack, fit_wee, missing_weights

Z95 = 1.959963984540054  # two-sided 95% normal quantile


@dataclass(frozen=True)
class AteEstimate:
    tau: float
    method: str
    se: float | None = None
    ci: tuple | None = None
    y1: float | None = None
    y0: float | None = None
    notes: tuple = ()

    def with_interval(self, se: float) -> "AteEstimate":
        ci = (self.tau - Z95 * se, self.tau + Z95 * se)
        return AteEstimate(self.tau, self.method, se, ci, self.y1, self.y0, self.notes)


def _overlap_notes(d: Dataset) -> tuple:
    mask = d.r == 1
    notes = []
    if not (mask & (d.a == 1)).any():
        notes.append("overlap failure: no treated complete cases")
    if not (mask & (d.a == 0)).any():
        notes.append("overlap failure: no control complete cases")
    return tuple(notes)


def _check_propensity_cap(d: Dataset, H: np.ndarray, cap: float):
    mask = d.r == 1
    t = mask & (d.a == 1)
    c = mask & (d.a == 0)
    with np.errstate(divide="ignore"):
        if t.any() and (1.0 / H[t]).max() > cap:
            raise ExtremeWeight("propensity weight 1/H beyond cap")
        if c.any() and (1.0 / (1.0 - H[c])).max() > cap:
            raise ExtremeWeight("propensity weight 1/(1-H) beyond cap")


def _wee_summands(which: str, alpha_coef, gamma_coef, beta_coef, d: Dataset,
                  model_spec: ModelSpec, y0_sign: float = 1.0):
    """Per-row contributions to Yhat(1) and Yhat(0) for one weighted
    estimator; both vectors are exactly zero on rows missing the designated
    confounder. Written so no division happens on rows where the divisor is
    irrelevant (treated rows never divide by 1-H and so on)."""
    mask = d.r == 1
    w = missing_weights(alpha_coef, d, model_spec)
    Xb = design_matrix(d, model_spec.outcome_covariates).copy()
    j = 1 + model_spec.outcome_covariates.index(TREATMENT)
    Xb[:, j] = 1.0
    lp1 = Xb @ beta_coef
    Xb[:, j] = 0.0
    lp0 = Xb @ beta_coef
    if model_spec.outcome_family == BERNOULLI:
        O1, O0 = expit(lp1), expit(lp0)
    else:
        O1, O0 = lp1, lp0
    if which == "or":
        return w * O1, w * O0

    Xg = design_matrix(d, model_spec.propensity_covariates)
    H = expit(Xg @ gamma_coef)
    treated = d.a == 1
    with np.errstate(divide="ignore", invalid="ignore"):
        if which == "ipw":
            s1 = np.where(mask & treated, w * d.y / H, 0.0)
            s0 = np.where(mask & ~treated, w * d.y / (1.0 - H), 0.0)
            return s1, s0
        if which == "dr":
            adj1 = np.where(treated, (d.y - O1) / H, 0.0)
            s1 = np.where(mask, w * (O1 + adj1), 0.0)
            if y0_sign > 0:
                adj0 = np.where(~treated, (d.y - O0) / (1.0 - H), 0.0)
                s0 = np.where(mask, w * (O0 + adj0), 0.0)
            else:
                adj0 = np.where(~treated, (d.y + O0) / (1.0 - H), 0.0)
                s0 = np.where(mask, w * (-O0 + adj0), 0.0)
            return s1, s0
    raise BadConfig(f"unknown estimator {which!r}")


def _wee_point(d: Dataset, fitted: FittedModels, which: str,
               y0_sign: float = 1.0) -> AteEstimate:
    fitted.weights(d)  # missingness-weight cap check
    alpha_coef = None if fitted.alpha is None else fitted.alpha.coefficients
    if which in ("ipw", "dr"):
        _check_propensity_cap(d, fitted.propensity(d), fitted.weight_cap)
    s1, s0 = _wee_summands(which, alpha_coef, fitted.gamma.coefficients,
                           fitted.beta.coefficients, d, fitted.model_spec,
                           y0_sign=y0_sign)
    y1 = float(s1.mean())
    y0 = float(s0.mean())
    return AteEstimate(tau=y1 - y0, method=f"wee-{which}", y1=y1, y0=y0,
                       notes=_overlap_notes(d))


def tau_sandwich_se(d: Dataset, fitted: FittedModels, which: str,
                    y0_sign: float = 1.0) -> float:
    """Standard error from the stacked system with one extra equation,
    summand minus tau, so every estimated block's uncertainty propagates."""
    stack = WeeStack(fitted.model_spec, fitted.schema, fitted.gspec,
                     estimate_alpha="alpha" in fitted.estimated_blocks,
                     known_alpha_coef=None if fitted.alpha is None
                     else fitted.alpha.coefficients)
    base_dim = stack.dim

    def psi(theta, dd):
        base = stack.psi(theta[:base_dim], dd)
        if stack.estimate_alpha:
            alpha_coef = theta[stack.blocks["alpha"]]
        else:
            alpha_coef = stack.known_alpha_coef
        gamma_coef = theta[stack.blocks["gamma"]]
        bsl = stack.blocks["beta"]
        beta_coef = theta[bsl.start:bsl.stop - 1] if stack.gaussian else theta[bsl]
        s1, s0 = _wee_summands(which, alpha_coef, gamma_coef, beta_coef, dd,
                               fitted.model_spec, y0_sign=y0_sign)
        return np.hstack([base, (s1 - s0 - theta[-1])[:, None]])

    point = _wee_point(d, fitted, which, y0_sign=y0_sign)
    theta_hat = np.concatenate([
        stack.pack(fitted.alpha, fitted.gamma, fitted.beta), [point.tau]])
    system = EquationSystem(psi=psi, dim=base_dim + 1)
    cov = sandwich_covariance(system, theta_hat, d)
    return float(np.sqrt(cov[-1, -1]))


def tau_wee_or(d: Dataset, fitted: FittedModels, with_se: bool = True) -> AteEstimate:
    """Weighted outcome-regression estimate of the treatment effect."""
    est = _wee_point(d, fitted, "or")
    return est.with_interval(tau_sandwich_se(d, fitted, "or")) if with_se else est


def tau_wee_ipw(d: Dataset, fitted: FittedModels, with_se: bool = True) -> AteEstimate:
    """Doubly weighted Horvitz-Thompson estimate (missingness and treatment
    probabilities both inverted)."""
    est = _wee_point(d, fitted, "ipw")
    return est.with_interval(tau_sandwich_se(d, fitted, "ipw")) if with_se else est


def tau_wee_dr(d: Dataset, fitted: FittedModels, with_se: bool = True,
               y0_sign: float = 1.0) -> AteEstimate:
    """Doubly robust estimate. The control-arm augmentation enters with a
    plus sign, the form under which misspecifying one of the two nuisance
    models leaves the estimator consistent; y0_sign=-1 selects the variant
    with the sign flipped, kept for comparison studies only."""
    est = _wee_point(d, fitted, "dr", y0_sign=y0_sign)
    return est.with_interval(tau_sandwich_se(d, fitted, "dr", y0_sign=y0_sign)) \
        if with_se else est


# complete-case baselines: textbook formulas on the complete subset

def _cc_fits(cc: Dataset, model_spec: ModelSpec):
    ones = np.ones(cc.n)
    gamma = fit_model(cc, model_spec.propensity_covariates, TREATMENT, ones, BERNOULLI)
    beta = fit_model(cc, model_spec.outcome_covariates, OUTCOME, ones,
                     model_spec.outcome_family)
    return gamma, beta


def _cc_pieces(cc: Dataset, gamma, beta, model_spec: ModelSpec):
    Xg = design_matrix(cc, model_spec.propensity_covariates)
    H = expit(Xg @ gamma.coefficients)
    Xb = design_matrix(cc, model_spec.outcome_covariates).copy()
    j = 1 + model_spec.outcome_covariates.index(TREATMENT)
    Xb[:, j] = 1.0
    lp1 = Xb @ beta.coefficients
    Xb[:, j] = 0.0
    lp0 = Xb @ beta.coefficients
    if model_spec.outcome_family == BERNOULLI:
        return H, expit(lp1), expit(lp0)
    return H, lp1, lp0


def tau_cc(d: Dataset, method: str, model_spec: ModelSpec = None,
           with_se: bool = True, cap: float = 1e4) -> AteEstimate:
    """Complete-case estimate: drop rows with the confounder missing, fit
    unweighted models, apply the standard OR, Horvitz-Thompson IPW, or
    AIPW formula."""
    model_spec = model_spec or ModelSpec.default_for(d.schema)
    cc = d.complete_cases()
    gamma, beta = _cc_fits(cc, model_spec)
    H, O1, O0 = _cc_pieces(cc, gamma, beta, model_spec)
    a, y = cc.a, cc.y
    if method == "or":
        y1 = float(O1.mean())
        y0 = float(O0.mean())
    elif method == "ipw":
        _check_propensity_cap(cc, H, cap)
        with np.errstate(divide="ignore", invalid="ignore"):
            y1 = float(np.where(a == 1, y / H, 0.0).mean())
            y0 = float(np.where(a == 0, y / (1.0 - H), 0.0).mean())
    elif method == "aipw":
        _check_propensity_cap(cc, H, cap)
        with np.errstate(divide="ignore", invalid="ignore"):
            y1 = float((O1 + np.where(a == 1, (y - O1) / H, 0.0)).mean())
            y0 = float((O0 + np.where(a == 0, (y - O0) / (1.0 - H), 0.0)).mean())
    else:
        raise BadConfig(f"unknown method {method!r}")
    est = AteEstimate(tau=y1 - y0, method=f"cc-{method}", y1=y1, y0=y0,
                      notes=_overlap_notes(cc))
    if not with_se:
        return est
    return est.with_interval(_plain_sandwich_se(cc, gamma, beta, model_spec,
                                                method, est.tau))


def _plain_sandwich_se(cc: Dataset, gamma, beta, model_spec: ModelSpec,
                       method: str, tau: float) -> float:
    """Stacked sandwich for the unweighted complete-data estimator."""
    stack = WeeStack(model_spec, cc.schema, None, estimate_alpha=False,
                     known_alpha_coef=None)
    base_dim = stack.dim
    which = {"or": "or", "ipw": "ipw", "aipw": "dr"}[method]

    def psi(theta, dd):
        base = stack.psi(theta[:base_dim], dd)
        gamma_coef = theta[stack.blocks["gamma"]]
        bsl = stack.blocks["beta"]
        beta_coef = theta[bsl.start:bsl.stop - 1] if stack.gaussian else theta[bsl]
        s1, s0 = _wee_summands(which, None, gamma_coef, beta_coef, dd, model_spec)
        return np.hstack([base, (s1 - s0 - theta[-1])[:, None]])

    theta_hat = np.concatenate([stack.pack(None, gamma, beta), [tau]])
    cov = sandwich_covariance(EquationSystem(psi=psi, dim=base_dim + 1), theta_hat, cc)
    return float(np.sqrt(cov[-1, -1]))


def cc_parameter_fit(d: Dataset, model_spec: ModelSpec = None):
    """Unweighted complete-case fits with classical model-based standard
    errors: inverse information for the logistic fits, the usual
    residual-variance formula for the Gaussian fit."""
    model_spec = model_spec or ModelSpec.default_for(d.schema)
    cc = d.complete_cases()
    gamma, beta = _cc_fits(cc, model_spec)
    se_gamma = _model_based_se(cc, gamma, model_spec.propensity_covariates,
                               BERNOULLI, cc.a)
    se_beta = _model_based_se(cc, beta, model_spec.outcome_covariates,
                              model_spec.outcome_family, cc.y)
    return gamma, se_gamma, beta, se_beta


def _model_based_se(d: Dataset, params, covariates, family, observed) -> np.ndarray:
    X = design_matrix(d, covariates)
    if family == BERNOULLI:
        p = expit(X @ params.coefficients)
        info = (X * (p * (1 - p))[:, None]).T @ X
        return np.sqrt(np.diag(np.linalg.inv(info)))
    resid = observed - X @ params.coefficients
    dof = max(d.n - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    return np.sqrt(sigma2 * np.diag(np.linalg.inv(X.T @ X)))


# multiple imputation by predictive mean matching

@dataclass(frozen=True)
class MiOptions:
    m: int = 10
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise BadConfig("at least two imputations required")
        if self.k < 1:
            raise BadConfig("donor pool must be positive")


def _nearest_donors(pred_obs: np.ndarray, pred_mis: np.ndarray, k: int,
                    rng) -> np.ndarray:
    """One donor index per missing row, uniform among the k complete cases
    with nearest predicted mean; distance ties go to the lowest row index.
    Candidates come from a 2k window in predicted-mean order, which contains
    the k nearest in one dimension."""
    order = np.argsort(pred_obs, kind="stable")
    po = pred_obs[order]
    pos = np.searchsorted(po, pred_mis)
    window = np.arange(-k, k)
    cand = np.clip(pos[:, None] + window[None, :], 0, len(po) - 1)
    dist = np.abs(po[cand] - pred_mis[:, None])
    orig = order[cand]
    # primary key distance, secondary key original row index
    ranked = np.lexsort((orig, dist), axis=1)[:, :k]
    rows = np.arange(len(pred_mis))[:, None]
    pool = orig[rows, ranked]
    return pool[np.arange(len(pred_mis)), rng.integers(0, k, size=len(pred_mis))]


def impute_pmm(d: Dataset, opts: MiOptions = None) -> list:
    """m completed copies of d. Each imputation draws the imputation-model
    coefficients from their asymptotic normal, predicts all rows, and copies
    each missing row's value from a donor among the k nearest predicted
    means of complete cases."""
    opts = opts or MiOptions()
    rng = np.random.default_rng(opts.seed)
    mask = d.r == 1
    n_cc = int(mask.sum())
    if n_cc < opts.k + 1:
        raise TooFewDonors(f"{n_cc} complete cases for donor pool size {opts.k}")
    covs = tuple(c for c in (TREATMENT,) + d.schema.confounders + (OUTCOME,)
                 if c != d.schema.missing)
    X = design_matrix(d, covs)
    target = d.confounder(d.schema.missing)
    Xc = X[mask]
    yc = target[mask]
    rank = np.linalg.matrix_rank(Xc)
    if rank < Xc.shape[1]:
        raise RankDeficient("imputation design is rank deficient")
    XtX = Xc.T @ Xc
    bhat = np.linalg.solve(XtX, Xc.T @ yc)
    resid = yc - Xc @ bhat
    dof = max(n_cc - Xc.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    L = np.linalg.cholesky(sigma2 * np.linalg.inv(XtX))
    if not mask.all():
        mis_idx = np.flatnonzero(~mask)
    completed = []
    j = d.schema.missing_index
    for _ in range(opts.m):
        if mask.all():
            completed.append(d)
            continue
        bstar = bhat + L @ rng.standard_normal(len(bhat))
        pred = X @ bstar
        donors = _nearest_donors(pred[mask], pred[~mask], opts.k, rng)
        c = d.c.copy()
        c[mis_idx, j] = yc[donors]
        completed.append(Dataset(d.a, d.y, c, d.schema))
    return completed


def rubin_combine(points: np.ndarray, variances: np.ndarray):
    """Point estimate, standard error, and normal-quantile CI under the
    usual combining rules: total variance = within + (1 + 1/m) between."""
    m = len(points)
    point = float(np.mean(points))
    within = float(np.mean(variances))
    between = float(np.var(points, ddof=1)) if m > 1 else 0.0
    total = within + (1.0 + 1.0 / m) * between
    se = float(np.sqrt(total))
    return point, se, (point - Z95 * se, point + Z95 * se)


def tau_mi(d: Dataset, method: str, opts: MiOptions = None,
           model_spec: ModelSpec = None, with_se: bool = True) -> AteEstimate:
    """Multiple-imputation estimate: the complete-data estimator applied to
    each completed dataset, combined across imputations."""
    opts = opts or MiOptions()
    model_spec = model_spec or ModelSpec.default_for(d.schema)
    points, variances = [], []
    for completed in impute_pmm(d, opts):
        est = tau_cc(completed, method, model_spec, with_se=with_se)
        points.append(est.tau)
        variances.append(est.se**2 if with_se else np.nan)
    if with_se:
        point, se, ci = rubin_combine(np.asarray(points), np.asarray(variances))
        return AteEstimate(tau=point, method=f"mi-{method}", se=se, ci=ci)
    return AteEstimate(tau=float(np.mean(points)), method=f"mi-{method}")


def mi_parameter_fit(d: Dataset, opts: MiOptions = None,
                     model_spec: ModelSpec = None):
    """Propensity and outcome coefficients under multiple imputation,
    combined coordinate-wise. Returns (gamma, se_gamma, beta, se_beta)."""
    opts = opts or MiOptions()
    model_spec = model_spec or ModelSpec.default_for(d.schema)
    gam_pts, gam_vars, bet_pts, bet_vars = [], [], [], []
    gamma = beta = None
    for completed in impute_pmm(d, opts):
        gamma, se_g, beta, se_b = cc_parameter_fit(completed, model_spec)
        gam_pts.append(gamma.coefficients)
        gam_vars.append(se_g**2)
        bet_pts.append(beta.coefficients)
        bet_vars.append(se_b**2)
    gam_pts = np.asarray(gam_pts)
    bet_pts = np.asarray(bet_pts)
    gam_vars = np.asarray(gam_vars)
    bet_vars = np.asarray(bet_vars)

    def combine(pts, vrs):
        est = np.empty(pts.shape[1])
        se = np.empty(pts.shape[1])
        for c in range(pts.shape[1]):
            est[c], se[c], _ = rubin_combine(pts[:, c], vrs[:, c])
        return est, se

    g_est, g_se = combine(gam_pts, gam_vars)
    b_est, b_se = combine(bet_pts, bet_vars)
    gamma_hat = LinearModelParams(g_est, gamma.covariates)
    beta_hat = LinearModelParams(b_est, beta.covariates, phi=beta.phi)
    return gamma_hat, g_se, beta_hat, b_se


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci: tuple
    estimates: np.ndarray
    failures: int


def bootstrap_ci(estimator, d: Dataset, B: int, seed: int) -> BootstrapResult:
    """Nonparametric bootstrap: B resamples with replacement, estimator
    failures excluded up to a 10% ceiling, percentile interval by linear
    interpolation."""
    if B < 2:
        raise BadConfig("at least two resamples required")
    estimates = []
    failures = 0
    for b in range(B):
        boot = resample(d, np.random.SeedSequence((seed, b)))
        try:
            estimates.append(float(estimator(boot)))
        except MnarError:
            failures += 1
    if failures > 0.1 * B:
        raise TooManyFailures(f"{failures} of {B} bootstrap replicates failed")
    est = np.asarray(estimates)
    se = float(np.std(est, ddof=1))
    lo, hi = np.percentile(est, [2.5, 97.5])
    return BootstrapResult(se=se, ci=(float(lo), float(hi)), estimates=est,
                           failures=failures)
