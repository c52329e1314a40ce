"""Parametric model families used throughout: logistic models for the
missing-probability and treatment-propensity components, and a Gaussian
linear or logistic model for the outcome. Provides linear predictors,
scores, and weighted fits via damped Newton.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _expit

from .data import Dataset, Observation, Schema
from .errors import (
    DimensionMismatch,
    MissingCovariate,
    NoConvergence,
    RankDeficient,
    SchemaMismatch,
    Separation,
)

GAUSSIAN = "gaussian-identity"
BERNOULLI = "bernoulli-logit"

# special covariate names; anything else must be a confounder column
TREATMENT = "a"
OUTCOME = "y"


def expit(x):
    """Logistic function 1/(1+exp(-x)), overflow-safe for large |x|."""
    return _expit(x)


@dataclass(frozen=True)
class LinearModelParams:
    """Coefficient vector aligned to (intercept, *covariates); phi is the
    Gaussian dispersion when applicable."""

    coefficients: np.ndarray
    covariates: tuple[str, ...]
    phi: float | None = None

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coef)
        if coef.shape != (1 + len(self.covariates),):
            raise DimensionMismatch(
                f"{coef.shape[0]} coefficients for {len(self.covariates)} covariates"
            )
        if self.phi is not None and not self.phi > 0:
            raise DimensionMismatch("dispersion must be positive")

    @property
    def dim(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    """Covariate lists for the three models, by name. The intercept is
    implicit and always first; 'a' and 'y' name the treatment and outcome."""

    missing_covariates: tuple[str, ...]
    propensity_covariates: tuple[str, ...]
    outcome_covariates: tuple[str, ...]
    outcome_family: str = GAUSSIAN

    def __post_init__(self):
        if OUTCOME not in self.missing_covariates:
            raise SchemaMismatch("missing model must include the outcome y")
        if OUTCOME in self.propensity_covariates or "r" in self.propensity_covariates:
            raise SchemaMismatch("propensity covariates exclude y and r")
        if "r" in self.outcome_covariates:
            raise SchemaMismatch("outcome covariates exclude r")
        if TREATMENT not in self.outcome_covariates:
            raise SchemaMismatch("outcome model must include the treatment a")
        if self.outcome_family not in (GAUSSIAN, BERNOULLI):
            raise SchemaMismatch(f"unknown family {self.outcome_family!r}")

    @staticmethod
    def default_for(schema: Schema) -> "ModelSpec":
        """Missing model on (all confounders, y); propensity on confounders;
        outcome on (a, confounders)."""
        return ModelSpec(
            missing_covariates=schema.confounders + (OUTCOME,),
            propensity_covariates=schema.confounders,
            outcome_covariates=(TREATMENT,) + schema.confounders,
            outcome_family=GAUSSIAN if schema.outcome_family == "gaussian" else BERNOULLI,
        )


def design_matrix(d: Dataset, covariates: tuple[str, ...], fill_missing: bool = True) -> np.ndarray:
    """(n, 1+p) design with intercept first. The designated confounder column
    is zero-filled on r=0 rows when fill_missing is set; callers must mask
    those rows out by weights, which downstream code always does."""
    cols = [np.ones(d.n)]
    for name in covariates:
        if name == TREATMENT:
            cols.append(d.a)
        elif name == OUTCOME:
            cols.append(d.y)
        elif name in d.schema.confounders:
            col = d.confounder(name)
            if name == d.schema.missing and fill_missing:
                col = np.where(d.r == 1, col, 0.0)
            cols.append(col)
        else:
            raise SchemaMismatch(f"unknown covariate {name!r}")
    return np.column_stack(cols)


def _row_vector(row: Observation, covariates: tuple[str, ...], schema: Schema) -> np.ndarray:
    vals = [1.0]
    for name in covariates:
        if name == TREATMENT:
            vals.append(row.a)
        elif name == OUTCOME:
            vals.append(row.y)
        else:
            v = row.c[schema.confounders.index(name)]
            if v is None:
                raise MissingCovariate(f"covariate {name!r} absent in row")
            vals.append(v)
    return np.asarray(vals)


def linear_predictor(params: LinearModelParams, row: Observation, schema: Schema) -> float:
    """Intercept plus the coefficient-weighted covariate values of one row."""
    return float(_row_vector(row, params.covariates, schema) @ params.coefficients)


def model_probability(params: LinearModelParams, row: Observation, schema: Schema) -> float:
    return float(_expit(linear_predictor(params, row, schema)))


def score(family: str, params: LinearModelParams, row: Observation, schema: Schema,
          observed: float) -> np.ndarray:
    """Per-row log-likelihood score. The Gaussian form drops the 1/phi
    factor, which rescales but never moves the root."""
    x = _row_vector(row, params.covariates, schema)
    lp = float(x @ params.coefficients)
    mean = _expit(lp) if family == BERNOULLI else lp
    return (observed - mean) * x


def score_matrix(family: str, coef: np.ndarray, X: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Vectorized scores, one row per observation."""
    lp = X @ coef
    mean = _expit(lp) if family == BERNOULLI else lp
    return (observed - mean)[:, None] * X


def _check_rank(X: np.ndarray, w: np.ndarray):
    active = w > 0
    if not active.any():
        raise RankDeficient("all weights are zero")
    r = np.linalg.matrix_rank(X[active] * np.sqrt(w[active])[:, None])
    if r < X.shape[1]:
        raise RankDeficient(f"weighted design has rank {r} < {X.shape[1]}")


def weighted_glm_fit(X: np.ndarray, observed: np.ndarray, weights: np.ndarray, family: str,
                     covariates: tuple[str, ...] = None, max_iter: int = 100,
                     tol: float = 1e-10) -> LinearModelParams:
    """Solve the weighted score equations sum_k w_k * score_k = 0.

    Gaussian closes in one weighted-least-squares step; the logistic fit
    runs damped Newton and declares Separation when the coefficient norm
    passes 1e4. The Gaussian dispersion uses divisor sum(w), the
    estimating-equation convention (no degrees-of-freedom correction).
    """
    w = np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise DimensionMismatch("weights must be nonnegative")
    if w.sum() <= 0:
        raise RankDeficient("weight total is zero")
    _check_rank(X, w)
    p = X.shape[1]
    if covariates is None:
        covariates = tuple(f"x{j}" for j in range(1, p))

    if family == GAUSSIAN:
        XtW = (X * w[:, None]).T
        coef = np.linalg.solve(XtW @ X, XtW @ observed)
        resid = observed - X @ coef
        phi = float((w * resid**2).sum() / w.sum())
        return LinearModelParams(coef, covariates, phi=phi)

    coef = np.zeros(p)
    g = (w * (observed - _expit(X @ coef))) @ X
    norm = np.abs(g).max()
    for _ in range(max_iter):
        if norm < tol:
            break
        prob = _expit(X @ coef)
        H = (X * (w * prob * (1 - prob))[:, None]).T @ X
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise Separation("information matrix singular during logistic fit")
        lam = 1.0
        stalled = True
        for _ in range(31):
            cand = coef + lam * step
            gc = (w * (observed - _expit(X @ cand))) @ X
            nc = np.abs(gc).max()
            if np.isfinite(nc) and nc < norm:
                coef, g, norm = cand, gc, nc
                stalled = False
                break
            lam *= 0.5
        if stalled:
            break  # line search exhausted; final residual checked below
        if np.abs(coef).max() > 1e4:
            raise Separation("coefficients diverging, data likely separated")
    # contract: sup-norm of the summed weighted score below 1e-8
    if norm >= 1e-8:
        raise NoConvergence(f"logistic score residual {norm:.2e} above tolerance")
    return LinearModelParams(coef, covariates)


def fit_model(d: Dataset, covariates: tuple[str, ...], target: str, weights: np.ndarray,
              family: str) -> LinearModelParams:
    """Weighted fit against a dataset; target is 'a', 'y', or 'r'."""
    X = design_matrix(d, covariates)
    if target == TREATMENT:
        obs = d.a
    elif target == OUTCOME:
        obs = d.y
    elif target == "r":
        obs = d.r
    else:
        raise SchemaMismatch(f"unknown target {target!r}")
    return weighted_glm_fit(X, obs, weights, family, covariates=covariates)
