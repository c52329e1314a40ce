"""Weighted estimating equations for MNAR confounder adjustment.

Stage one solves the moment equation
    E_hat[(r/M(c,y;alpha) - 1) G(c_obs,a,y)] = 0
for the missing-probability coefficients; stage two solves the propensity
and outcome score equations weighted by r/M. A joint stacked sandwich at
the fitted point propagates first-stage uncertainty into every block.

Numerical form used throughout: on r=1 rows, with lp the missing-model
linear predictor, 1/M - 1 = exp(-lp) and 1/M = 1 + exp(-lp) exactly. This
avoids dividing by expit(lp), which underflows long before the weight
itself overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, Observation, Schema
from .errors import (
    DimensionMismatch,
    ExtremeWeight,
    MissingCovariate,
    MissingnessDegenerate,
    NoConvergence,
    RankDeficient,
    SingularJacobian,
)
from .glm import (
    BERNOULLI,
    GAUSSIAN,
    OUTCOME,
    TREATMENT,
    LinearModelParams,
    ModelSpec,
    _row_vector,
    design_matrix,
    fit_model,
    score_matrix,
)
from .solver import EquationSystem, SolveOptions, numeric_jacobian, solve_root

DEFAULT_WEIGHT_CAP = 1e4


@dataclass(frozen=True)
class GSpec:
    """Ordered components of the moment function G, drawn from the constant
    '1', 'a', 'y', and fully observed confounder names. Must never reference
    the partially observed confounder: G is evaluated on r=0 rows."""

    components: tuple[str, ...]

    def validate(self, schema: Schema, model_spec: ModelSpec):
        allowed = {"1", TREATMENT, OUTCOME}
        allowed.update(c for c in schema.confounders if c != schema.missing)
        for name in self.components:
            if name == schema.missing:
                raise DimensionMismatch(
                    f"G may not reference the partially observed confounder {name!r}"
                )
            if name not in allowed:
                raise DimensionMismatch(f"unknown G component {name!r}")
        dim_alpha = 1 + len(model_spec.missing_covariates)
        if len(self.components) != dim_alpha:
            raise DimensionMismatch(
                f"G has {len(self.components)} components, missing model has {dim_alpha}"
            )

    @property
    def dim(self) -> int:
        return len(self.components)


def default_G(model_spec: ModelSpec, schema: Schema) -> GSpec:
    """(1, fully observed confounders of the missing model, a, y), with the
    treatment standing in for the partially observed confounder."""
    observed = tuple(
        c for c in model_spec.missing_covariates
        if c not in (OUTCOME, schema.missing)
    )
    spec = GSpec(("1",) + observed + (TREATMENT, OUTCOME))
    spec.validate(schema, model_spec)
    return spec


def g_matrix(gspec: GSpec, d: Dataset) -> np.ndarray:
    """(n, dim) evaluation; uses only always-present columns."""
    cols = []
    for name in gspec.components:
        if name == "1":
            cols.append(np.ones(d.n))
        elif name == TREATMENT:
            cols.append(d.a)
        elif name == OUTCOME:
            cols.append(d.y)
        else:
            cols.append(d.confounder(name))
    return np.column_stack(cols)


def build_G(gspec: GSpec, row: Observation, schema: Schema) -> np.ndarray:
    """Single-row G evaluation."""
    vals = []
    for name in gspec.components:
        if name == "1":
            vals.append(1.0)
        elif name == TREATMENT:
            vals.append(row.a)
        elif name == OUTCOME:
            vals.append(row.y)
        else:
            vals.append(row.c[schema.confounders.index(name)])
    return np.asarray(vals)


def _missing_lp_row(alpha: LinearModelParams, row: Observation, schema: Schema) -> float:
    lp = alpha.coefficients[0]
    for coef, name in zip(alpha.coefficients[1:], alpha.covariates):
        if name == OUTCOME:
            lp += coef * row.y
        elif name == TREATMENT:
            lp += coef * row.a
        else:
            v = row.c[schema.confounders.index(name)]
            if v is None:
                raise MissingCovariate(f"covariate {name!r} absent on a complete-case row")
            lp += coef * v
    return float(lp)


def psi_missing(alpha: LinearModelParams, row: Observation, gspec: GSpec,
                schema: Schema) -> np.ndarray:
    """Moment contribution of one row: -G when r=0, (1/M - 1) G when r=1,
    with 1/M - 1 evaluated as exp(-lp)."""
    G = build_G(gspec, row, schema)
    if row.r == 0:
        return -G
    lp = _missing_lp_row(alpha, row, schema)
    return np.exp(-lp) * G


def psi_propensity(gamma: LinearModelParams, alpha: LinearModelParams,
                   row: Observation, schema: Schema,
                   cap: float = DEFAULT_WEIGHT_CAP) -> np.ndarray:
    """Weighted propensity score contribution of one row."""
    if row.r == 0:
        return np.zeros(gamma.dim)
    w = 1.0 + np.exp(-_missing_lp_row(alpha, row, schema))
    if w > cap:
        raise ExtremeWeight(f"weight {w:.3g} beyond cap {cap:.3g}")
    x = _row_vector(row, gamma.covariates, schema)
    return w * (row.a - expit(x @ gamma.coefficients)) * x


def psi_outcome(beta: LinearModelParams, alpha: LinearModelParams,
                row: Observation, schema: Schema, family: str,
                cap: float = DEFAULT_WEIGHT_CAP) -> np.ndarray:
    """Weighted outcome score contribution of one row."""
    if row.r == 0:
        return np.zeros(beta.dim)
    w = 1.0 + np.exp(-_missing_lp_row(alpha, row, schema))
    if w > cap:
        raise ExtremeWeight(f"weight {w:.3g} beyond cap {cap:.3g}")
    x = _row_vector(row, beta.covariates, schema)
    lp = x @ beta.coefficients
    mean = expit(lp) if family == BERNOULLI else lp
    return w * (row.y - mean) * x


def missing_weights(alpha_coef, d: Dataset, model_spec: ModelSpec) -> np.ndarray:
    """Vector r/M(c,y;alpha); exactly zero on r=0 rows. alpha_coef None
    means M is forced to 1 (no missingness adjustment)."""
    if alpha_coef is None:
        return d.r.copy()
    Xm = design_matrix(d, model_spec.missing_covariates)
    lp = Xm @ np.asarray(alpha_coef, dtype=float)
    with np.errstate(over="ignore"):
        em = np.exp(-lp)
    return np.where(d.r == 1, 1.0 + em, 0.0)


def fitted_missing_probabilities(alpha_coef, d: Dataset, model_spec: ModelSpec) -> np.ndarray:
    """M(c,y;alpha) on complete cases only."""
    if alpha_coef is None:
        return np.ones(int((d.r == 1).sum()))
    Xm = design_matrix(d, model_spec.missing_covariates)
    return expit((Xm @ np.asarray(alpha_coef, dtype=float))[d.r == 1])


def psi_missing_matrix(alpha_coef, d: Dataset, model_spec: ModelSpec,
                       gspec: GSpec) -> np.ndarray:
    """(n, dim) stage-one moment values. The tilt factor is exp(-lp) on
    complete rows and the constant -1 on missing rows; the factor is chosen
    by mask before multiplying into G so overflow never creates NaN."""
    G = g_matrix(gspec, d)
    Xm = design_matrix(d, model_spec.missing_covariates)
    lp = Xm @ np.asarray(alpha_coef, dtype=float)
    with np.errstate(over="ignore"):
        em = np.exp(-lp)
    fac = np.where(d.r == 1, em, -1.0)
    return fac[:, None] * G


@dataclass(frozen=True)
class FitDiagnostics:
    stage1_iterations: int
    stage1_restarts: int
    residual_sup: dict
    min_fitted_m: float
    max_fitted_m: float
    max_weight: float


class WeeStack:
    """Stacked per-row equation values for the estimated blocks, as one
    callable psi(theta, d) suitable for the generic solver. Block order:
    alpha (when estimated) | gamma | beta [| phi for the Gaussian family].
    """

    def __init__(self, model_spec: ModelSpec, schema: Schema, gspec: GSpec,
                 estimate_alpha: bool, known_alpha_coef=None):
        self.model_spec = model_spec
        self.schema = schema
        self.gspec = gspec
        self.estimate_alpha = estimate_alpha
        self.known_alpha_coef = known_alpha_coef
        self.p_alpha = (1 + len(model_spec.missing_covariates)) if estimate_alpha else 0
        self.p_gamma = 1 + len(model_spec.propensity_covariates)
        self.p_beta = 1 + len(model_spec.outcome_covariates)
        self.gaussian = model_spec.outcome_family == GAUSSIAN
        self.dim = self.p_alpha + self.p_gamma + self.p_beta + (1 if self.gaussian else 0)
        blocks = {}
        at = 0
        if estimate_alpha:
            blocks["alpha"] = slice(0, self.p_alpha)
            at = self.p_alpha
        blocks["gamma"] = slice(at, at + self.p_gamma)
        at += self.p_gamma
        end = at + self.p_beta + (1 if self.gaussian else 0)
        blocks["beta"] = slice(at, end)
        self.blocks = blocks

    def pack(self, alpha: LinearModelParams, gamma: LinearModelParams,
             beta: LinearModelParams) -> np.ndarray:
        parts = []
        if self.estimate_alpha:
            parts.append(alpha.coefficients)
        parts.append(gamma.coefficients)
        parts.append(beta.coefficients)
        if self.gaussian:
            parts.append([beta.phi])
        return np.concatenate(parts)

    def psi(self, theta, d: Dataset) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.estimate_alpha:
            alpha_coef = theta[self.blocks["alpha"]]
        else:
            alpha_coef = self.known_alpha_coef
        gamma_coef = theta[self.blocks["gamma"]]
        bsl = self.blocks["beta"]
        if self.gaussian:
            beta_coef = theta[bsl.start:bsl.stop - 1]
            phi = theta[bsl.stop - 1]
        else:
            beta_coef = theta[bsl]
            phi = None
        w = missing_weights(alpha_coef, d, self.model_spec)
        parts = []
        if self.estimate_alpha:
            parts.append(psi_missing_matrix(alpha_coef, d, self.model_spec, self.gspec))
        Xg = design_matrix(d, self.model_spec.propensity_covariates)
        parts.append(w[:, None] * score_matrix(BERNOULLI, gamma_coef, Xg, d.a))
        Xb = design_matrix(d, self.model_spec.outcome_covariates)
        lp = Xb @ beta_coef
        if self.gaussian:
            parts.append((w * (d.y - lp))[:, None] * Xb)
            parts.append((w * ((d.y - lp) ** 2 - phi))[:, None])
        else:
            parts.append((w * (d.y - expit(lp)))[:, None] * Xb)
        return np.hstack(parts)

    def system(self) -> EquationSystem:
        return EquationSystem(psi=self.psi, dim=self.dim, blocks=self.blocks)


@dataclass(frozen=True)
class FittedModels:
    """Fitted missing-probability, propensity, and outcome models with the
    joint sandwich covariance of every estimated block."""

    alpha: LinearModelParams | None
    gamma: LinearModelParams
    beta: LinearModelParams
    covariance: np.ndarray
    blocks: dict
    estimated_blocks: tuple
    diagnostics: FitDiagnostics
    model_spec: ModelSpec
    schema: Schema
    gspec: GSpec
    weight_cap: float

    def weights(self, d: Dataset, check_cap: bool = True) -> np.ndarray:
        coef = None if self.alpha is None else self.alpha.coefficients
        w = missing_weights(coef, d, self.model_spec)
        if check_cap and w.max() > self.weight_cap:
            raise ExtremeWeight(
                f"weight {w.max():.3g} beyond cap {self.weight_cap:.3g}"
            )
        return w

    def propensity(self, d: Dataset) -> np.ndarray:
        Xg = design_matrix(d, self.model_spec.propensity_covariates)
        return expit(Xg @ self.gamma.coefficients)

    def outcome_mean(self, d: Dataset, a_value: float) -> np.ndarray:
        """Model mean with the treatment column forced to a_value. On rows
        missing the designated confounder the value is a placeholder; every
        consumer multiplies by a weight that is exactly zero there."""
        Xb = design_matrix(d, self.model_spec.outcome_covariates)
        Xb = Xb.copy()
        j = 1 + self.model_spec.outcome_covariates.index(TREATMENT)
        Xb[:, j] = a_value
        lp = Xb @ self.beta.coefficients
        return expit(lp) if self.model_spec.outcome_family == BERNOULLI else lp

    def block_cov(self, name: str) -> np.ndarray:
        s = self.blocks[name]
        return self.covariance[s, s]

    def block_se(self, name: str) -> np.ndarray:
        return np.sqrt(np.diag(self.block_cov(name)))


def _naive_alpha_init(d: Dataset, model_spec: ModelSpec) -> np.ndarray:
    """Logit fit of r on the always-present missing-model covariates, with
    zero at the position of the partially observed confounder. Exact in the
    sub-model where that coefficient is zero."""
    observed = tuple(c for c in model_spec.missing_covariates if c != d.schema.missing)
    naive = fit_model(d, observed, "r", np.ones(d.n), BERNOULLI)
    init = np.zeros(1 + len(model_spec.missing_covariates))
    init[0] = naive.coefficients[0]
    pos = {name: 1 + j for j, name in enumerate(model_spec.missing_covariates)}
    for coef, name in zip(naive.coefficients[1:], observed):
        init[pos[name]] = coef
    return init


def _solve_alpha(d: Dataset, model_spec: ModelSpec, gspec: GSpec, opts: SolveOptions,
                 restarts: int, restart_seed) -> tuple[np.ndarray, int, int]:
    system = EquationSystem(
        psi=lambda theta, dd: psi_missing_matrix(theta, dd, model_spec, gspec),
        dim=gspec.dim,
    )
    init = _naive_alpha_init(d, model_spec)
    stats: dict = {}
    try:
        root = solve_root(system, d, SolveOptions(
            max_iter=opts.max_iter, tol=opts.tol, halvings=opts.halvings,
            jac_step=opts.jac_step, init=init), stats=stats)
        return root, stats.get("iterations", 0), 0
    except (NoConvergence, SingularJacobian) as err:
        last = err
    rng = np.random.default_rng(restart_seed)
    for attempt in range(1, restarts + 1):
        jitter = init + 0.5 * rng.standard_normal(init.shape)
        try:
            root = solve_root(system, d, SolveOptions(
                max_iter=opts.max_iter, tol=opts.tol, halvings=opts.halvings,
                jac_step=opts.jac_step, init=jitter), stats=stats)
            return root, stats.get("iterations", 0), attempt
        except (NoConvergence, SingularJacobian) as err:
            last = err
    raise last


def fit_wee(d: Dataset, model_spec: ModelSpec = None, gspec: GSpec = None,
            opts: SolveOptions = None, known_alpha: LinearModelParams = None,
            unit_missing_model: bool = False, weight_cap: float = DEFAULT_WEIGHT_CAP,
            restarts: int = 5, restart_seed: int = 0,
            covariance: bool = True) -> FittedModels:
    """Two-stage fit returning all three models and the stacked sandwich.

    known_alpha supplies the missing-probability coefficients instead of
    solving the stage-one moment equation (its block then carries no
    uncertainty). unit_missing_model forces M to 1, reducing the weighted
    fits to complete-case fits.
    """
    model_spec = model_spec or ModelSpec.default_for(d.schema)
    opts = opts or SolveOptions()
    schema = d.schema
    n_missing = int((d.r == 0).sum())
    n_complete = d.n - n_missing
    if n_complete == 0:
        raise RankDeficient("no complete cases to fit on")

    estimate_alpha = not unit_missing_model and known_alpha is None
    if estimate_alpha:
        if n_missing == 0:
            raise MissingnessDegenerate(
                "no missing rows: the moment equation has no interior root; "
                "use a complete-case analysis instead"
            )
        gspec = gspec or default_G(model_spec, schema)
        gspec.validate(schema, model_spec)
        alpha_coef, iters, used_restarts = _solve_alpha(
            d, model_spec, gspec, opts, restarts, restart_seed)
        alpha = LinearModelParams(alpha_coef, model_spec.missing_covariates)
    else:
        gspec = gspec or (default_G(model_spec, schema) if not unit_missing_model else None)
        alpha = None if unit_missing_model else known_alpha
        if alpha is not None and tuple(alpha.covariates) != model_spec.missing_covariates:
            raise DimensionMismatch("known alpha covariates disagree with the model spec")
        iters, used_restarts = 0, 0

    alpha_coef = None if alpha is None else alpha.coefficients
    w = missing_weights(alpha_coef, d, model_spec)
    if w.max() > weight_cap:
        raise ExtremeWeight(f"weight {w.max():.3g} beyond cap {weight_cap:.3g}")
    m_fit = fitted_missing_probabilities(alpha_coef, d, model_spec)

    gamma = fit_model(d, model_spec.propensity_covariates, TREATMENT, w,
                      BERNOULLI)
    beta = fit_model(d, model_spec.outcome_covariates, OUTCOME, w,
                     model_spec.outcome_family)

    stack = WeeStack(model_spec, schema, gspec, estimate_alpha,
                     known_alpha_coef=alpha_coef)
    theta_hat = stack.pack(alpha, gamma, beta)
    residual = np.abs(np.asarray(stack.psi(theta_hat, d)).mean(axis=0))
    residual_sup = {name: float(residual[s].max()) for name, s in stack.blocks.items()}

    if covariance:
        from .solver import sandwich_covariance
        cov = sandwich_covariance(stack.system(), theta_hat, d, step=opts.jac_step)
    else:
        cov = np.full((stack.dim, stack.dim), np.nan)

    diags = FitDiagnostics(
        stage1_iterations=iters,
        stage1_restarts=used_restarts,
        residual_sup=residual_sup,
        min_fitted_m=float(m_fit.min()),
        max_fitted_m=float(m_fit.max()),
        max_weight=float(w.max()),
    )
    estimated = tuple(stack.blocks.keys())
    return FittedModels(
        alpha=alpha, gamma=gamma, beta=beta, covariance=cov,
        blocks=stack.blocks, estimated_blocks=estimated, diagnostics=diags,
        model_spec=model_spec, schema=schema, gspec=gspec, weight_cap=weight_cap,
    )
