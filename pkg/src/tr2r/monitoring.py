"""Monitoring of control residuals with tensor control charts.

The control residual ``R_t = Y_t - Y_t x_1 (V1 V1^T) x_2 (V2 V2^T) x_3 (V3 V3^T)``
is the part of the image the recipes cannot reach.  Phase I fits an MPCA
(Tucker) model to in-control residuals; phase II tracks three statistics of
``c_t = vec(R_t x_1 U1^T x_2 U2^T x_3 U3^T)``:

* Hotelling ``T^2 = (c - c_bar)^T S^{-1} (c - c_bar)`` with an F-based limit,
* ``Q = ||R_t - reconstruction||^2`` with a moment-matched chi-square limit,
* an EWMA of ``c - c_bar`` with a simulated limit for a target ARL0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .seeding import derive_rng
from .tensor import frobenius, mode_product, multi_mode_product, unfold, vectorize

__all__ = [
    "ChartSuite",
    "EwmaChartState",
    "AlarmRecord",
    "control_residual",
    "mpca_fit",
    "mpca_project",
    "fit_charts",
    "monitor_step",
    "monitor_stream",
    "ewma_covariance_factor",
    "calibrate_ewma_limit",
    "t2_limit",
    "q_limit",
    "ewma_run_lengths",
]


def control_residual(Y: np.ndarray, factors: Sequence[np.ndarray], first_mode: int = 0) -> np.ndarray:
    """Project `Y` onto the orthogonal complement of the factor span.

    Use ``first_mode=1`` for an ``n``-stacked array of images.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim - first_mode != len(factors) or any(
            Y.shape[first_mode + k] != f.shape[0] for k, f in enumerate(factors)):
        raise ValueError(f"factors {[f.shape for f in factors]} do not match data shape {Y.shape}")
    return Y - multi_mode_product(Y, [f @ f.T for f in factors], first_mode)


def mpca_project(R: np.ndarray, factors: Sequence[np.ndarray], first_mode: int = 0) -> np.ndarray:
    return multi_mode_product(R, factors, first_mode, transpose=True)


def mpca_fit(R: np.ndarray, P_mon: Sequence[int], tol: float = 1e-6, max_iter: int = 100) -> tuple:
    """Tucker model of stacked residuals ``R`` (``n x Q1 x Q2 x Q3``).

    Higher-order orthogonal iteration from an HOSVD start; each factor
    update is the exact maximizer of the captured energy given the others,
    so the reconstruction error never increases.

    Returns
    -------
    cores : ndarray, shape (n, P1', P2', P3')
    factors : tuple of ndarray
    errors : list of float
        Squared reconstruction error after each sweep.
    """
    R = np.asarray(R, dtype=float)
    P_mon = tuple(int(p) for p in P_mon)
    n = R.shape[0]
    W = int(np.prod(P_mon))
    if n < W:
        raise ValueError(f"need at least W = {W} phase-I samples, got {n}")
    if len(P_mon) != R.ndim - 1 or any(p < 1 or p > q for p, q in zip(P_mon, R.shape[1:])):
        raise ValueError(f"monitoring ranks {P_mon} invalid for residual shape {R.shape[1:]}")
    total = float(np.sum(R * R))

    def leading(M, p):
        w, V = np.linalg.eigh(M @ M.T)
        V = V[:, np.argsort(w)[::-1][:p]]
        idx = np.argmax(np.abs(V), axis=0)
        return V * np.sign(V[idx, np.arange(p)])

    factors = [leading(unfold(R, i + 1), p) for i, p in enumerate(P_mon)]
    errors = []
    prev = None
    for _ in range(max_iter):
        for i in range(len(factors)):
            T = R
            for j, U in enumerate(factors):
                if j != i:
                    T = mode_product(T, U.T, j + 1)
            factors[i] = leading(unfold(T, i + 1), P_mon[i])
        cores = mpca_project(R, factors, first_mode=1)
        err = max(total - float(np.sum(cores * cores)), 0.0)
        errors.append(err)
        if prev is not None and abs(prev - err) <= tol * max(prev, 1e-300):
            break
        prev = err
    return cores, tuple(factors), errors


def ewma_covariance_factor(omega: float, t: int) -> float:
    """``omega (1 - (1 - omega)^(2t)) / (2 - omega)``: the EWMA covariance scale at step `t`."""
    return omega * (1.0 - (1.0 - omega) ** (2 * t)) / (2.0 - omega)


def t2_limit(alpha: float, W: int, n: int) -> float:
    """Upper limit for a new observation's ``T^2``: ``W (n^2 - 1) / (n (n - W)) F_{1-alpha}(W, n - W)``."""
    return W * (n * n - 1) / (n * (n - W)) * float(stats.f.ppf(1.0 - alpha, W, n - W))


def q_limit(q_samples: np.ndarray, alpha: float) -> tuple:
    """Moment-matched ``g chi2_h`` limit; returns ``(g, h, limit)``."""
    mean = float(np.mean(q_samples))
    var = float(np.var(q_samples, ddof=1))
    if not (mean > 0 and var > 0):
        raise ValueError("Q statistics are degenerate; the residual model captures everything")
    g = var / (2.0 * mean)
    h = 2.0 * mean * mean / var
    return g, h, g * float(stats.chi2.ppf(1.0 - alpha, h))


def _ewma_paths(W: int, omega: float, n_streams: int, horizon: int, seed: int) -> np.ndarray:
    """``T_Z^2`` paths for standard-normal streams (float32, ``n_streams x horizon``)."""
    rng = derive_rng(seed, "ewma-calibration", W)
    out = np.empty((n_streams, horizon), dtype=np.float32)
    Z = np.zeros((n_streams, W))
    for t in range(1, horizon + 1):
        Z = (1.0 - omega) * Z + omega * rng.standard_normal((n_streams, W))
        out[:, t - 1] = np.einsum("ij,ij->i", Z, Z) / ewma_covariance_factor(omega, t)
    return out


def _run_lengths(paths: np.ndarray, L: float) -> np.ndarray:
    hit = paths > L
    first = np.argmax(hit, axis=1) + 1
    first[~hit.any(axis=1)] = paths.shape[1]
    return first


@lru_cache(maxsize=32)
def calibrate_ewma_limit(W: int, omega: float, arl0: float, n_streams: int = 2000, seed: int = 0,
                         horizon_factor: int = 20) -> float:
    """Limit ``L`` whose simulated in-control ARL matches `arl0`.

    After whitening, ``T_Z^2`` depends only on ``W`` and ``omega``, so the
    limit is calibrated on standard-normal streams (common random numbers
    across the bisection).  Results are cached.
    """
    if not 0 < omega <= 1:
        raise ValueError("omega must lie in (0, 1]")
    horizon = int(horizon_factor * arl0)
    paths = _ewma_paths(W, omega, n_streams, horizon, seed)
    running = np.maximum.accumulate(paths, axis=1)
    lo, hi = 0.0, float(np.max(running[:, -1]))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.mean(_run_lengths(running, mid)) < arl0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-6 * hi:
            break
    return 0.5 * (lo + hi)


@dataclass
class ChartSuite:
    """Phase-I monitoring model and control limits."""

    factors: tuple
    mean: np.ndarray
    cov: np.ndarray
    n: int
    alpha: float
    t2_limit: float
    q_g: float
    q_h: float
    q_limit: float
    omega: float
    ewma_limit: float
    arl0: float
    cov_inv: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.cov_inv is None:
            self.cov_inv = np.linalg.inv(self.cov)

    @property
    def W(self) -> int:
        return len(self.mean)

    @property
    def P_mon(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors)

    def asymptotic_ewma_cov(self) -> np.ndarray:
        return self.omega / (2.0 - self.omega) * self.cov

    def ewma_cov(self, t: int) -> np.ndarray:
        return ewma_covariance_factor(self.omega, t) * self.cov

    def to_dict(self) -> dict:
        from .io import format_tensor

        return {
            "factors": [format_tensor(f) for f in self.factors],
            "mean": self.mean,
            "cov": self.cov,
            "n": self.n,
            "W": self.W,
            "alpha": self.alpha,
            "t2_limit": self.t2_limit,
            "q_g": self.q_g,
            "q_h": self.q_h,
            "q_limit": self.q_limit,
            "omega": self.omega,
            "ewma_limit": self.ewma_limit,
            "arl0": self.arl0,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChartSuite":
        from .io import parse_tensor

        return cls(
            factors=tuple(parse_tensor(f) for f in d["factors"]),
            mean=np.asarray(d["mean"], dtype=float),
            cov=np.asarray(d["cov"], dtype=float),
            n=int(d["n"]),
            alpha=float(d["alpha"]),
            t2_limit=float(d["t2_limit"]),
            q_g=float(d["q_g"]),
            q_h=float(d["q_h"]),
            q_limit=float(d["q_limit"]),
            omega=float(d["omega"]),
            ewma_limit=float(d["ewma_limit"]),
            arl0=float(d["arl0"]),
        )


def fit_charts(R_phase1: np.ndarray, P_mon: Sequence[int], alpha: float = 0.025, omega: float = 0.2,
               arl0: float = 200.0, n_streams: int = 2000, seed: int = 0,
               holdout: float = 0.5) -> ChartSuite:
    """Fit MPCA and all three chart limits from in-control residuals.

    MPCA factors come from the first ``1 - holdout`` share of the runs; the
    core mean, covariance and Q moments are estimated on the remaining runs.
    With many more residual elements than runs, the leading MPCA directions
    overfit their own sample, so in-sample core variances overstate what new
    runs show and the T^2 chart would fire far less often than ``alpha``.
    ``holdout=0`` uses all runs for both steps.

    Parameters
    ----------
    R_phase1 : ndarray, shape (n, Q1, Q2, Q3)
        In-control control residuals.
    P_mon : sequence of int
        MPCA ranks; ``W = prod(P_mon)``.
    alpha : float
        False-alarm rate of the Shewhart-type T^2 and Q charts.
    omega, arl0 : float
        EWMA weight and target in-control average run length.
    n_streams, seed : int
        Monte-Carlo settings for the EWMA limit.
    holdout : float
        Share of the runs, in ``[0, 1)``, reserved for the chart statistics.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0 <= holdout < 1:
        raise ValueError("holdout must lie in [0, 1)")
    R = np.asarray(R_phase1, dtype=float)
    n_fit = R.shape[0] - int(round(holdout * R.shape[0]))
    if holdout > 0:
        _, factors, _ = mpca_fit(R[:n_fit], P_mon)
        R = R[n_fit:]
        cores = mpca_project(R, factors, first_mode=1)
    else:
        cores, factors, _ = mpca_fit(R, P_mon)
    n = R.shape[0]
    C = unfold(cores, 0)
    # unfold(cores, 0) rows equal vectorize(core_i) in the shared linear order
    mean = C.mean(axis=0)
    cov = np.atleast_2d(np.cov(C, rowvar=False))
    W = C.shape[1]
    w = np.linalg.eigvalsh(cov)
    if not w.min() > 1e-12 * np.trace(cov) / W:
        raise ValueError("phase-I core covariance is degenerate; use more samples or a smaller W")
    recon = multi_mode_product(cores, factors, first_mode=1)
    q = np.sum((R - recon) ** 2, axis=tuple(range(1, R.ndim)))
    g, h, ql = q_limit(q, alpha)
    L = calibrate_ewma_limit(W, float(omega), float(arl0), int(n_streams), int(seed))
    return ChartSuite(factors=factors, mean=mean, cov=cov, n=n, alpha=alpha, t2_limit=t2_limit(alpha, W, n),
                      q_g=g, q_h=h, q_limit=ql, omega=float(omega), ewma_limit=L, arl0=float(arl0))


@dataclass(frozen=True)
class EwmaChartState:
    Z: Optional[np.ndarray] = None
    t: int = 0


@dataclass
class AlarmRecord:
    """Per-run statistics and alarms of one monitored stream (runs are 1-based)."""

    t2: np.ndarray
    q: np.ndarray
    tz2: np.ndarray
    t2_limit: float
    q_limit: float
    ewma_limit: float

    @property
    def n_runs(self) -> int:
        return len(self.t2)

    @property
    def t2_alarm(self) -> np.ndarray:
        return self.t2 > self.t2_limit

    @property
    def q_alarm(self) -> np.ndarray:
        return self.q > self.q_limit

    @property
    def ewma_alarm(self) -> np.ndarray:
        return self.tz2 > self.ewma_limit

    def first_alarm(self, chart: str, start: int = 1) -> Optional[int]:
        """First alarming run at or after `start` (``None`` if none)."""
        flags = {"t2": self.t2_alarm, "q": self.q_alarm, "ewma": self.ewma_alarm}[chart]
        idx = np.flatnonzero(flags[start - 1:])
        return int(idx[0]) + start if idx.size else None

    def rows(self) -> list:
        return [
            (t + 1, float(self.t2[t]), float(self.q[t]), float(self.tz2[t]),
             bool(self.t2_alarm[t]), bool(self.q_alarm[t]), bool(self.ewma_alarm[t]))
            for t in range(self.n_runs)
        ]

    header = ("run", "T2", "Q", "TZ2", "T2_alarm", "Q_alarm", "EWMA_alarm")


def monitor_step(suite: ChartSuite, R_t: np.ndarray, state: EwmaChartState = EwmaChartState()) -> tuple:
    """Statistics for one residual; returns ``((T2, Q, TZ2, alarms...), state')``."""
    R_t = np.asarray(R_t, dtype=float)
    if not np.all(np.isfinite(R_t)):
        raise ValueError("non-finite residual")
    core = mpca_project(R_t, suite.factors)
    c = vectorize(core)
    dev = c - suite.mean
    t2 = float(dev @ suite.cov_inv @ dev)
    q = frobenius(R_t - multi_mode_product(core, suite.factors)) ** 2
    Z = dev * suite.omega if state.Z is None else (1.0 - suite.omega) * state.Z + suite.omega * dev
    t = state.t + 1
    tz2 = float(Z @ suite.cov_inv @ Z) / ewma_covariance_factor(suite.omega, t)
    row = (t2, q, tz2, t2 > suite.t2_limit, q > suite.q_limit, tz2 > suite.ewma_limit)
    return row, EwmaChartState(Z, t)


def monitor_stream(suite: ChartSuite, residuals: np.ndarray) -> AlarmRecord:
    """Run all charts over a stack of residuals (``T x Q1 x Q2 x Q3``), vectorized."""
    R = np.asarray(residuals, dtype=float)
    if not np.all(np.isfinite(R)):
        raise ValueError("non-finite residual")
    cores = mpca_project(R, suite.factors, first_mode=1)
    C = unfold(cores, 0)
    dev = C - suite.mean
    t2 = np.einsum("ij,jk,ik->i", dev, suite.cov_inv, dev)
    recon = multi_mode_product(cores, suite.factors, first_mode=1)
    q = np.sum((R - recon) ** 2, axis=tuple(range(1, R.ndim)))
    tz2 = np.empty(len(R))
    Z = np.zeros(C.shape[1])
    for t in range(len(R)):
        Z = (1.0 - suite.omega) * Z + suite.omega * dev[t]
        tz2[t] = float(Z @ suite.cov_inv @ Z) / ewma_covariance_factor(suite.omega, t + 1)
    return AlarmRecord(t2, q, tz2, suite.t2_limit, suite.q_limit, suite.ewma_limit)


def ewma_run_lengths(suite: ChartSuite, residuals: np.ndarray) -> np.ndarray:
    """Run lengths of the EWMA chart over one long stream, restarting after each alarm.

    The trailing censored segment is dropped.
    """
    R = np.asarray(residuals, dtype=float)
    dev = unfold(mpca_project(R, suite.factors, first_mode=1), 0) - suite.mean
    white = dev @ np.linalg.cholesky(suite.cov_inv)
    lengths = []
    Z = np.zeros(white.shape[1])
    t = 0
    for x in white:
        Z = (1.0 - suite.omega) * Z + suite.omega * x
        t += 1
        if Z @ Z / ewma_covariance_factor(suite.omega, t) > suite.ewma_limit:
            lengths.append(t)
            Z[:] = 0.0
            t = 0
    return np.asarray(lengths, dtype=int)
