"""Reference constructions shared by the unit and acceptance suites."""

import numpy as np

from efficientfi.baselines import CSProblem, gaussian_matrix


def sparse_problem(seed, n=200, m=100, k=10, lam=0.01):
    """Random k-sparse instance; returns (problem, truth, support)."""
    rng = np.random.default_rng([seed, 0x5A])
    a = gaussian_matrix(m, n, seed)
    support = np.sort(rng.choice(n, k, replace=False))
    x = np.zeros(n)
    x[support] = rng.choice([-1.0, 1.0], k) * rng.uniform(0.5, 1.5, k)
    return CSProblem(a, a @ x, lam=lam), x, support


def support_ls(problem, support):
    """Least squares restricted to the true support."""
    x = np.zeros(problem.A.shape[1])
    x[support] = np.linalg.lstsq(problem.A[:, support], problem.y, rcond=None)[0]
    return x


def nmse_db(ref, est):
    return 10 * np.log10(np.sum((ref - est) ** 2) / np.sum(ref ** 2))
