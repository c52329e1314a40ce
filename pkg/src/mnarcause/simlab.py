"""Synthetic-data studies.

Two families of designs: single-confounder designs where the estimand is
the parameter vector of the propensity and outcome models, and four
two-confounder scenarios crossing correct and incorrect specification of
those models, where the estimand is the average treatment effect (3 by
construction). A separate closed-form density pair demonstrates that two
different parameter sets can induce identical observed-data distributions
when the missingness model is unrestricted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import expit, ndtri

from .data import Dataset, Schema
from .errors import (
    AllReplicationsFailed,
    BadConfig,
    MnarError,
    QuadratureFailure,
)
from .estimators import (
    MiOptions,
    cc_parameter_fit,
    mi_parameter_fit,
    tau_cc,
    tau_mi,
    tau_wee_dr,
    tau_wee_ipw,
    tau_wee_or,
)
from .glm import LinearModelParams
from .wee import fit_wee

TABLE1_SCENARIOS = ("table1-binary", "table1-continuous")
TABLE2_SCENARIOS = ("ocpc", "ocpm", "ompc", "ompm")

TABLE1_METHODS = ("wee", "cc", "mi")
TABLE2_METHODS = ("wee-or", "wee-ipw", "wee-dr", "cc-or", "mi-or")
TABLE2_ALL_METHODS = TABLE2_METHODS + ("cc-ipw", "cc-aipw", "mi-ipw", "mi-aipw")

# missing-probability coefficients shared by all four two-confounder
# scenarios: logit pr(R=1 | c1, c2, y) = 1 - 2 c1 + c2 + 3 y
TABLE2_ALPHA = (1.0, -2.0, 1.0, 3.0)


@dataclass(frozen=True)
class TruthRecord:
    """Pre-erasure quantities kept for oracle checks, never shown to
    estimators: the full confounder matrix, the true treatment probability
    and missing probability per row, and the generating coefficients."""

    confounders: np.ndarray
    propensity: np.ndarray
    missing_prob: np.ndarray
    alpha: tuple
    gamma: tuple | None
    beta: tuple | None
    ate: float | None


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n: int = 2000
    replications: int = 1000
    seed: int = 0
    estimators: tuple = None
    mi_m: int = 10
    mi_k: int = 5

    def __post_init__(self):
        if self.scenario not in TABLE1_SCENARIOS + TABLE2_SCENARIOS:
            raise BadConfig(f"unknown scenario {self.scenario!r}")
        if self.n < 50:
            raise BadConfig("scenario sample size below 50")
        if self.replications < 1:
            raise BadConfig("at least one replication required")
        allowed = TABLE1_METHODS if self.table1 else TABLE2_ALL_METHODS
        methods = self.estimators
        if methods is None:
            methods = TABLE1_METHODS if self.table1 else TABLE2_METHODS
            object.__setattr__(self, "estimators", methods)
        for m in methods:
            if m not in allowed:
                raise BadConfig(f"estimator {m!r} not available for {self.scenario}")

    @property
    def table1(self) -> bool:
        return self.scenario in TABLE1_SCENARIOS


@dataclass(frozen=True)
class TargetMetrics:
    method: str
    target: str
    truth: float
    bias: float
    std: float
    mean_se: float
    coverage: float
    successes: int
    failures: int


@dataclass(frozen=True)
class MonteCarloReport:
    scenario: str
    n: int
    replications: int
    seed: int
    metrics: tuple
    raw: tuple  # (method, replication, estimate) long form


def _draw_normal(rng, n: int) -> np.ndarray:
    # inverse-CDF transform keeps the stream reproducible for a given
    # generator state regardless of how many variates other draws consumed
    return ndtri(rng.random(n))


def generate_table1(kind: str, n: int, seed) -> tuple:
    """Single-confounder design with the confounder erased where the
    missingness draw comes up zero. Draw order: c1, a, y, r."""
    if kind not in ("binary", "continuous"):
        raise BadConfig(f"unknown outcome kind {kind!r}")
    rng = np.random.default_rng(seed)
    c1 = -0.5 + _draw_normal(rng, n)
    prop = expit(0.5 + 0.5 * c1)
    a = (rng.random(n) < prop).astype(float)
    if kind == "binary":
        y = (rng.random(n) < expit(0.5 + 1.5 * a - 0.5 * c1)).astype(float)
        m_prob = expit(0.5 - c1 + 2.0 * y)
        alpha = (0.5, -1.0, 2.0)
        family = "binary"
    else:
        y = 0.5 + 1.5 * a - 0.5 * c1 + _draw_normal(rng, n)
        m_prob = expit(-1.0 + c1 + y)
        alpha = (-1.0, 1.0, 1.0)
        family = "gaussian"
    r = (rng.random(n) < m_prob).astype(float)
    c = c1.copy()
    c[r == 0] = np.nan
    schema = Schema(treatment="a", outcome="y", confounders=("c1",),
                    missing="c1", outcome_family=family)
    d = Dataset(a, y, c[:, None], schema)
    truth = TruthRecord(confounders=c1[:, None], propensity=prop,
                        missing_prob=m_prob, alpha=alpha,
                        gamma=(0.5, 0.5), beta=(0.5, 1.5, -0.5), ate=None)
    return d, truth


def generate_table2(scenario: str, n: int, seed) -> tuple:
    """Two-confounder scenarios. The treatment effect is additive with
    coefficient 3 in every scenario, so the true ATE is always 3. Draw
    order: c1, c2, a, y, r."""
    if scenario not in TABLE2_SCENARIOS:
        raise BadConfig(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng(seed)
    c1 = _draw_normal(rng, n)
    c2 = (rng.random(n) < 0.5).astype(float)
    if scenario in ("ocpc", "ompc"):
        prop = expit(-0.5 + c1 + c2)
    else:
        t = c1 * c2
        prop = expit(-3.0 + 3.0 * t + 3.0 * np.exp(t))
    a = (rng.random(n) < prop).astype(float)
    if scenario in ("ocpc", "ocpm"):
        mean = 1.0 + 3.0 * a + c1 - c2
        beta = (1.0, 3.0, 1.0, -1.0)
    else:
        mean = -1.0 + 3.0 * a + 0.5 * np.exp(c1 + c2)
        beta = None
    y = mean + _draw_normal(rng, n)
    m_prob = expit(1.0 - 2.0 * c1 + c2 + 3.0 * y)
    r = (rng.random(n) < m_prob).astype(float)
    c = np.column_stack([c1, c2])
    c_erased = c.copy()
    c_erased[r == 0, 0] = np.nan
    schema = Schema(treatment="a", outcome="y", confounders=("c1", "c2"),
                    missing="c1", outcome_family="gaussian")
    d = Dataset(a, y, c_erased, schema)
    gamma = (-0.5, 1.0, 1.0) if scenario in ("ocpc", "ompc") else None
    truth = TruthRecord(confounders=c, propensity=prop, missing_prob=m_prob,
                        alpha=TABLE2_ALPHA, gamma=gamma, beta=beta, ate=3.0)
    return d, truth


# Monte Carlo driver

TABLE1_TARGETS = ("gamma0", "gamma1", "beta0", "beta1", "beta2")


def _table1_truth() -> dict:
    return dict(zip(TABLE1_TARGETS, (0.5, 0.5, 0.5, 1.5, -0.5)))


def _rep_table1(d: Dataset, method: str, est_seeds, mi_opts: MiOptions):
    """(estimates, ses) for the five reported coefficients, or raises."""
    if method == "wee":
        fitted = fit_wee(d, restart_seed=est_seeds[0])
        est = np.concatenate([fitted.gamma.coefficients, fitted.beta.coefficients])
        se = np.concatenate([fitted.block_se("gamma"),
                             fitted.block_se("beta")[:fitted.beta.dim]])
        return est[:5], se[:5]
    if method == "cc":
        gamma, se_g, beta, se_b = cc_parameter_fit(d)
        return (np.concatenate([gamma.coefficients, beta.coefficients])[:5],
                np.concatenate([se_g, se_b])[:5])
    if method == "mi":
        opts = MiOptions(m=mi_opts.m, k=mi_opts.k, seed=est_seeds[1])
        gamma, se_g, beta, se_b = mi_parameter_fit(d, opts)
        return (np.concatenate([gamma.coefficients, beta.coefficients])[:5],
                np.concatenate([se_g, se_b])[:5])
    raise BadConfig(f"unknown method {method!r}")


def _rep_table2(d: Dataset, methods, est_seeds, mi_opts: MiOptions) -> dict:
    """method -> (estimate, se) for one replication; per-method failures
    recorded as exceptions in the returned dict."""
    out = {}
    wee_methods = [m for m in methods if m.startswith("wee-")]
    if wee_methods:
        try:
            known = LinearModelParams(np.asarray(TABLE2_ALPHA), ("c1", "c2", "y"))
            fitted = fit_wee(d, known_alpha=known, covariance=False)
        except MnarError as err:
            fitted = err
        for m in wee_methods:
            if isinstance(fitted, MnarError):
                out[m] = fitted
                continue
            try:
                fn = {"wee-or": tau_wee_or, "wee-ipw": tau_wee_ipw,
                      "wee-dr": tau_wee_dr}[m]
                est = fn(d, fitted)
                out[m] = (est.tau, est.se)
            except MnarError as err:
                out[m] = err
    for m in methods:
        if m.startswith("cc-"):
            try:
                est = tau_cc(d, m[3:])
                out[m] = (est.tau, est.se)
            except MnarError as err:
                out[m] = err
        elif m.startswith("mi-"):
            try:
                opts = MiOptions(m=mi_opts.m, k=mi_opts.k, seed=est_seeds[1])
                est = tau_mi(d, m[3:], opts)
                out[m] = (est.tau, est.se)
            except MnarError as err:
                out[m] = err
    return out


def _metrics(method: str, target: str, truth: float, ests: list, ses: list,
             failures: int) -> TargetMetrics:
    ests = np.asarray(ests, dtype=float)
    ses = np.asarray(ses, dtype=float)
    bias = float(ests.mean() - truth)
    std = float(ests.std(ddof=1)) if len(ests) > 1 else 0.0
    mean_se = float(ses.mean())
    covered = np.abs(ests - truth) <= 1.959963984540054 * ses
    return TargetMetrics(method=method, target=target, truth=truth, bias=bias,
                         std=std, mean_se=mean_se,
                         coverage=float(covered.mean()),
                         successes=len(ests), failures=failures)


def run_monte_carlo(config: ScenarioConfig) -> MonteCarloReport:
    """Replicated study. Replication i draws its data and estimation seeds
    from the pair (config.seed, i), so any subset of replications can be
    reproduced in isolation. Per-method failures are recorded and excluded
    from the metrics; only a study where every method fails in every
    replication is an error."""
    mi_opts = MiOptions(m=config.mi_m, k=config.mi_k)
    methods = config.estimators
    succ: dict = {}
    fails: dict = {m: 0 for m in methods}
    raw = []
    for i in range(config.replications):
        ss = np.random.SeedSequence((config.seed, i))
        data_seed, est_seed = ss.spawn(2)
        est_seeds = est_seed.spawn(2)
        if config.table1:
            d, _ = generate_table1(config.scenario.split("-")[1], config.n,
                                   data_seed)
            for m in methods:
                try:
                    est, se = _rep_table1(d, m, est_seeds, mi_opts)
                except MnarError:
                    fails[m] += 1
                    continue
                for t, e, s in zip(TABLE1_TARGETS, est, se):
                    succ.setdefault((m, t), ([], []))
                    succ[(m, t)][0].append(float(e))
                    succ[(m, t)][1].append(float(s))
                    raw.append((f"{m}:{t}", i, float(e)))
        else:
            d, _ = generate_table2(config.scenario, config.n, data_seed)
            results = _rep_table2(d, methods, est_seeds, mi_opts)
            for m in methods:
                res = results.get(m)
                if res is None or isinstance(res, MnarError):
                    fails[m] += 1
                    continue
                succ.setdefault((m, "ate"), ([], []))
                succ[(m, "ate")][0].append(res[0])
                succ[(m, "ate")][1].append(res[1])
                raw.append((m, i, res[0]))
    if methods and not succ:
        raise AllReplicationsFailed(
            f"all {config.replications} replications failed for every method")
    truth_map = _table1_truth() if config.table1 else {"ate": 3.0}
    metrics = []
    for m in methods:
        targets = TABLE1_TARGETS if config.table1 else ("ate",)
        for t in targets:
            if (m, t) not in succ:
                continue
            ests, ses = succ[(m, t)]
            metrics.append(_metrics(m, t, truth_map[t], ests, ses, fails[m]))
    return MonteCarloReport(scenario=config.scenario, n=config.n,
                            replications=config.replications,
                            seed=config.seed, metrics=tuple(metrics),
                            raw=tuple(raw))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_report(report: MonteCarloReport, format: str = "csv") -> bytes:
    """Metrics table, one row per (method, target, metric)."""
    if format == "csv":
        lines = ["scenario,method,target,metric,value"]
        for tm in report.metrics:
            base = f"{report.scenario},{tm.method},{tm.target}"
            for metric in ("bias", "std", "mean_se", "coverage",
                           "successes", "failures"):
                lines.append(f"{base},{metric},{_fmt(getattr(tm, metric))}")
        return ("\n".join(lines) + "\n").encode()
    if format == "json":
        payload = {
            "scenario": report.scenario,
            "n": report.n,
            "replications": report.replications,
            "seed": report.seed,
            "metrics": [
                {"method": tm.method, "target": tm.target, "truth": tm.truth,
                 "bias": tm.bias, "std": tm.std, "mean_se": tm.mean_se,
                 "coverage": tm.coverage, "successes": tm.successes,
                 "failures": tm.failures}
                for tm in report.metrics
            ],
            "raw": [[m, i, e] for m, i, e in report.raw],
        }
        return (json.dumps(payload, indent=1) + "\n").encode()
    raise BadConfig(f"unknown report format {format!r}")


def emit_raw(report: MonteCarloReport) -> bytes:
    """Per-replication estimates in long form, for external box plotting."""
    lines = ["scenario,method,replication,estimate"]
    for m, i, e in report.raw:
        lines.append(f"{report.scenario},{m},{i},{_fmt(e)}")
    return ("\n".join(lines) + "\n").encode()


# closed-form non-identifiability demonstration

@dataclass(frozen=True)
class Example1Params:
    """Five scalars of the single-confounder density pair: the confounder
    mean, two outcome coefficients, the outcome variance, and the slope of
    the missingness model."""

    eta: float
    beta0: float
    beta1: float
    phi: float
    alpha1: float

    def __post_init__(self):
        if not self.phi > 0:
            raise BadConfig("outcome variance must be positive")


def _normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _example1_joint(p: Example1Params, a: float, c1: float, y: float) -> float:
    """Joint density of (c1, a, y) before the missingness factor."""
    dc = _normal_pdf(c1, p.eta, 1.0)
    pa = expit(c1 * c1 - 1.0)
    da = pa if a == 1 else 1.0 - pa
    dy = _normal_pdf(y, p.beta0 + p.beta1 * a * abs(c1), p.phi)
    return float(dc * da * dy)


def example1_observed_density(p: Example1Params, a: float, c1, y: float,
                              r: int) -> float:
    """Observed-data density at one point. With the confounder observed the
    value is the closed-form product; with it missing, the confounder is
    integrated out together with the probability of being missing."""
    if a not in (0, 1) or r not in (0, 1):
        raise BadConfig("a and r must be 0 or 1")
    if r == 1:
        if c1 is None:
            raise BadConfig("observed branch requires the confounder value")
        return _example1_joint(p, a, c1, y) * float(expit(p.alpha1 * c1))
    if c1 is not None:
        raise BadConfig("missing branch must not receive a confounder value")

    def integrand(c):
        return _example1_joint(p, a, c, y) * float(1.0 - expit(p.alpha1 * c))

    val, abserr = quad(integrand, p.eta - 10.0, p.eta + 10.0,
                       epsabs=1e-10, epsrel=1e-12, limit=200)
    if abserr > 1e-8:
        raise QuadratureFailure(f"integration error estimate {abserr:.2e}")
    return float(val)


def example1_grid_compare(p1: Example1Params, p2: Example1Params,
                          points: int = 10) -> dict:
    """Compare two parameter sets over a grid of observed-data points.
    Returns the largest absolute difference on each branch and the largest
    relative difference overall."""
    c_grid = np.linspace(-3.0, 3.0, points)
    y_grid = np.linspace(-3.0, 3.0, points)
    max_abs_r1 = 0.0
    max_abs_r0 = 0.0
    max_rel = 0.0
    for a in (0, 1):
        for y in y_grid:
            for c1 in c_grid:
                d1 = example1_observed_density(p1, a, float(c1), float(y), 1)
                d2 = example1_observed_density(p2, a, float(c1), float(y), 1)
                max_abs_r1 = max(max_abs_r1, abs(d1 - d2))
                denom = max(abs(d1), abs(d2), 1e-300)
                max_rel = max(max_rel, abs(d1 - d2) / denom)
            d1 = example1_observed_density(p1, a, None, float(y), 0)
            d2 = example1_observed_density(p2, a, None, float(y), 0)
            max_abs_r0 = max(max_abs_r0, abs(d1 - d2))
            denom = max(abs(d1), abs(d2), 1e-300)
            max_rel = max(max_rel, abs(d1 - d2) / denom)
    return {"max_abs_r1": max_abs_r1, "max_abs_r0": max_abs_r0,
            "max_rel": max_rel}
