"""Independent oracles shared by the test suite.

Everything here is deliberately dense / brute-force (numpy linear algebra,
quadrature, enumeration) so it shares no code path with the implementation
it checks.
"""

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


def aghq_log_integral(f_neg, n_nodes=50, bracket=(-5.0, 0.0, 5.0)):
    """log of integral exp(-f_neg(b)) db by adaptive Gauss-Hermite quadrature."""
    res = minimize_scalar(f_neg, bracket=bracket)
    m = res.x
    h = 1e-4 * (1.0 + abs(m))
    fpp = (f_neg(m + h) - 2.0 * f_neg(m) + f_neg(m - h)) / h ** 2
    s = 1.0 / np.sqrt(fpp)
    x, w = hermgauss(n_nodes)
    pts = m + np.sqrt(2.0) * s * x
    logs = np.array([-f_neg(b) for b in pts]) + x ** 2 + np.log(w)
    return logsumexp(logs) + np.log(np.sqrt(2.0) * s)


def aghq_posterior_mean(f_neg, d, n_nodes=50, bracket=(-5.0, 0.0, 5.0)):
    """E[d(b) | y] under density prop. to exp(-f_neg(b)), by AGHQ."""
    res = minimize_scalar(f_neg, bracket=bracket)
    m = res.x
    h = 1e-4 * (1.0 + abs(m))
    fpp = (f_neg(m + h) - 2.0 * f_neg(m) + f_neg(m - h)) / h ** 2
    s = 1.0 / np.sqrt(fpp)
    x, w = hermgauss(n_nodes)
    pts = m + np.sqrt(2.0) * s * x
    logs = np.array([-f_neg(b) for b in pts]) + x ** 2 + np.log(w)
    weights = np.exp(logs - logsumexp(logs))
    return float(np.sum(weights * np.array([d(b) for b in pts])))


def gaussian_marginal_nll(y, X, beta, Z, Q_b, tau_e):
    """Exact -log N(y; X beta, Z Q_b^-1 Z' + I/tau_e)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    cov = Z @ np.linalg.solve(Q_b, Z.T) + np.eye(n) / tau_e
    r = y - X @ beta
    sign, ld = np.linalg.slogdet(cov)
    assert sign > 0
    return 0.5 * (n * LOG_2PI + ld + r @ np.linalg.solve(cov, r))


def balanced_anova_ml(y):
    """Closed-form ML for the balanced one-way random-intercept model.

    y has shape (K, J).  Returns (mu, sigma_e^2, sigma_b^2, nll at the MLE);
    requires the interior solution (SSB/K > SSW/(K(J-1))/... checked).
    """
    K, J = y.shape
    ybar = y.mean()
    group_means = y.mean(axis=1)
    ssw = np.sum((y - group_means[:, None]) ** 2)
    ssb = J * np.sum((group_means - ybar) ** 2)
    sig_e = ssw / (K * (J - 1))
    lam = ssb / K
    if lam <= sig_e:
        raise ValueError("boundary ML solution; regenerate test data")
    sig_b = (lam - sig_e) / J
    n = K * J
    nll = 0.5 * (n * LOG_2PI + K * (J - 1) * np.log(sig_e) + K * np.log(lam)
                 + ssw / sig_e + ssb / lam)
    return ybar, sig_e, sig_b, nll


def conditional_gaussian_posterior(y, X, beta, Z, Q_b, tau_e):
    """Posterior mean and covariance of b given y at fixed parameters."""
    prec = Q_b + tau_e * Z.T @ Z
    cov = np.linalg.inv(prec)
    mean = cov @ (tau_e * Z.T @ (np.asarray(y) - X @ beta))
    return mean, cov


def fd_gradient(f, x, rel_step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g
