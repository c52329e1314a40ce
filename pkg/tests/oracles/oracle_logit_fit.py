"""Reference logistic-regression fits computed without the package.

Maximizes the exact (weighted) Bernoulli log-likelihood with
scipy.optimize.minimize over a fixed 20-row fixture. Also prints the
analytic observed information at the unweighted MLE for a 10-row subset
(used to cross-check numeric Jacobians and the sandwich).

Run: python3 tests/oracles/oracle_logit_fit.py
Printed coefficients are frozen into tests/test_glm.py and
tests/test_solver.py.
"""
import numpy as np
from scipy.optimize import minimize

# fixed 20-row fixture: columns x1, x2, binary response t, weight w
X1 = np.array([-1.2, 0.3, 0.8, -0.5, 1.7, -2.1, 0.0, 0.9, -0.7, 1.1,
               0.4, -1.5, 2.0, -0.2, 0.6, -0.9, 1.3, 0.1, -0.4, 0.7])
X2 = np.array([0.5, -1.0, 0.2, 1.4, -0.3, 0.8, -1.7, 0.0, 0.9, -0.6,
               1.2, 0.3, -0.8, 0.7, -1.1, 0.4, 0.0, -0.5, 1.0, -0.2])
T = np.array([0, 1, 0, 1, 1, 0, 1, 1, 0, 0,
              1, 0, 1, 1, 0, 1, 0, 1, 0, 1], dtype=float)
W = np.array([1.0, 2.0, 1.0, 1.0, 0.5, 1.0, 1.5, 1.0, 1.0, 2.0,
              1.0, 1.0, 0.5, 1.0, 1.0, 2.0, 1.0, 1.0, 1.5, 1.0])


def neg_loglik(theta, w):
    lp = theta[0] + theta[1] * X1 + theta[2] * X2
    # -sum w * [t*lp - log(1+exp(lp))], stable via logaddexp
    return -np.sum(w * (T * lp - np.logaddexp(0.0, lp)))


def fit(w):
    best = None
    for x0 in (np.zeros(3), np.array([0.5, -0.5, 0.5])):
        res = minimize(neg_loglik, x0, args=(w,), method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 500})
        res2 = minimize(neg_loglik, res.x, args=(w,), method="Nelder-Mead",
                        options={"xatol": 1e-12, "fatol": 1e-14,
                                 "maxiter": 20000, "maxfev": 20000})
        cand = res2 if res2.fun < res.fun else res
        if best is None or cand.fun < best.fun:
            best = cand
    return best.x


if __name__ == "__main__":
    unw = fit(np.ones(20))
    wts = fit(W)
    np.set_printoptions(precision=12, suppress=False)
    print("unweighted MLE:", list(unw))
    print("weighted   MLE:", list(wts))

    # analytic observed information for the first 10 rows, unweighted,
    # evaluated at the 10-row MLE: I = sum p(1-p) x x^T  (per-row sum)
    x1, x2, t = X1[:10], X2[:10], T[:10]

    def nll10(theta):
        lp = theta[0] + theta[1] * x1 + theta[2] * x2
        return -np.sum(t * lp - np.logaddexp(0.0, lp))

    res = minimize(nll10, np.zeros(3), method="BFGS",
                   options={"gtol": 1e-12, "maxiter": 500})
    th = res.x
    lp = th[0] + th[1] * x1 + th[2] * x2
    p = 1 / (1 + np.exp(-lp))
    design = np.column_stack([np.ones(10), x1, x2])
    info = (design * (p * (1 - p))[:, None]).T @ design
    print("10-row MLE:", list(th))
    print("10-row observed information (per-row sum):")
    for row in info:
        print(" ", list(row))
