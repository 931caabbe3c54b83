"""Compressive-sensing baseline: LASSO solved by iterative soft-thresholding.

Each time step of a CSI frame (a column of length antennas*subcarriers) is
measured with a shared seeded Gaussian matrix and recovered independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import idct

from .tensor_core import InputError


def soft_threshold(v, t):
    """sign(v) * max(|v| - t, 0), the proximal operator of t*||.||_1."""
    if np.any(np.asarray(t) < 0):
        raise InputError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def gaussian_matrix(m: int, n: int, seed: int) -> np.ndarray:
    """m x n Gaussian measurement matrix with unit-norm columns."""
    rng = np.random.default_rng([seed, 0xA])
    a = rng.standard_normal((m, n))
    return a / np.linalg.norm(a, axis=0, keepdims=True)


def lipschitz(a: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Largest eigenvalue of A^T A by power iteration."""
    v = np.random.default_rng([seed, 0xB]).standard_normal(a.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = a.T @ (a @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


@dataclass
class CSProblem:
    A: np.ndarray
    y: np.ndarray  # (m,) or (m, k) for k independent columns
    lam: float = 0.01
    max_iter: int = 5000
    tol: float = 1e-10

    def __post_init__(self):
        m, n = self.A.shape
        if m >= n:
            raise InputError(f"need fewer measurements than unknowns (m={m}, n={n})")
        if self.lam <= 0:
            raise InputError("sparsity weight must be positive")
        if self.y.shape[0] != m:
            raise InputError(f"y has {self.y.shape[0]} rows, A has {m}")

    def objective(self, x: np.ndarray) -> float:
        r = self.y - self.A @ x
        return 0.5 * float(np.sum(r * r)) + self.lam * float(np.abs(x).sum())


@dataclass
class ISTAResult:
    x: np.ndarray
    iterations: int
    objective: float
    converged: bool
    history: list[float] = field(repr=False, default_factory=list)


def ista_solve(problem: CSProblem, record: bool = False) -> ISTAResult:
    A, y = problem.A, np.asarray(problem.y, dtype=np.float64)
    # 1% margin: power iteration approaches the top eigenvalue from below
    L = 1.01 * lipschitz(A)
    x = np.zeros((A.shape[1],) + y.shape[1:])
    if L == 0:
        return ISTAResult(x, 0, problem.objective(x), True)
    step = 1.0 / L
    f_prev = problem.objective(x)
    history = [f_prev] if record else []
    for it in range(1, problem.max_iter + 1):
        x = soft_threshold(x + step * (A.T @ (y - A @ x)), problem.lam * step)
        f = problem.objective(x)
        if record:
            history.append(f)
        if abs(f_prev - f) <= problem.tol * max(1.0, abs(f)):
            return ISTAResult(x, it, f, True, history)
        f_prev = f
    return ISTAResult(x, problem.max_iter, f_prev, False, history)


# ---------------------------------------------------------------------------
# CSI frames

BASES = ("identity", "dct")


@dataclass
class CSMeasurement:
    y: np.ndarray          # (m, time steps)
    rate: float
    seed: int
    shape: tuple[int, int, int]
    basis: str = "identity"

    @property
    def matrix(self) -> np.ndarray:
        n = self.shape[0] * self.shape[1]
        return gaussian_matrix(self.y.shape[0], n, self.seed)


def _n_measurements(rate: float, n: int) -> int:
    if not 0 < rate < 1:
        raise InputError("rate must lie in (0, 1)")
    return max(1, int(round(rate * n)))


def cs_compress_frame(x: np.ndarray, rate: float, seed: int = 0, basis: str = "identity") -> CSMeasurement:
    """Measure every time-step column of a (C, S, T) frame with one shared matrix."""
    if basis not in BASES:
        raise InputError(f"unknown basis {basis!r}")
    x = np.asarray(x, dtype=np.float64)
    c, s, t = x.shape
    cols = x.reshape(c * s, t)
    a = gaussian_matrix(_n_measurements(rate, c * s), c * s, seed)
    return CSMeasurement(a @ cols, rate, seed, (c, s, t), basis)


def cs_reconstruct(meas: CSMeasurement, lam: float = 0.01, max_iter: int = 5000,
                   tol: float = 1e-10) -> tuple[np.ndarray, ISTAResult]:
    a = meas.matrix
    if meas.basis == "dct":
        # x = Psi s with Psi the orthonormal inverse DCT
        a = a @ idct(np.eye(a.shape[1]), axis=0, norm="ortho")
    res = ista_solve(CSProblem(a, meas.y, lam, max_iter, tol))
    coeffs = res.x
    cols = idct(coeffs, axis=0, norm="ortho") if meas.basis == "dct" else coeffs
    return cols.reshape(meas.shape).astype(np.float32), res


def baseline_report(data, rate: float = 0.25, seed: int = 0, basis: str = "identity",
                    lam: float = 0.01, max_frames: int | None = None, max_iter: int = 2000) -> dict:
    from .eval_metrics import nmse_db

    x = data.x if max_frames is None else data.x[:max_frames]
    recs, iters = [], []
    for frame in x:
        rec, res = cs_reconstruct(cs_compress_frame(frame, rate, seed, basis), lam, max_iter)
        recs.append(rec)
        iters.append(res.iterations)
    return {
        "method": "ista_lasso",
        "rate": rate,
        "gamma": 1.0 / rate,
        "basis": basis,
        "lambda": lam,
        "n_frames": len(x),
        "nmse_db": nmse_db(x, np.stack(recs)),
        "mean_iterations": float(np.mean(iters)),
    }
