"""Run-to-run recipe controllers in the core space and their stability analysis.

The EWMA controller tracks a core-space disturbance estimate ``d_hat`` (a
``K = P1 P2 P3`` vector) and sets the recipe that cancels it::

    c_t       = vec(Y_t x_1 V1^T x_2 V2^T x_3 V3^T)
    d_hat'    = lam (c_t - G^T u_t) + (1 - lam) d_hat
    u_{t+1}   = argmin_u ||G^T u + d_hat'||          (minimum norm)

with ``G`` the ``m x K`` mode-0 unfolding of the estimated core.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .estimation import EstimationResult
from .simulation import ProcessModel, RunRecord
from .tensor import ls_pinv_solve, project_to_core, unfold, vectorize

__all__ = [
    "ControllerState",
    "StabilityReport",
    "ewma_init",
    "ewma_step",
    "core_projection",
    "zhong_baseline_step",
    "EwmaController",
    "ZhongController",
    "stability_matrix",
    "critical_lambda",
    "mae",
    "CONTROLLABLE_TOL",
]

# eigenvalues of the recipe-space loop gain below this (relative) are uncontrollable
CONTROLLABLE_TOL = 1e-8
STABILITY_MARGIN = 1e-9


@dataclass(frozen=True)
class ControllerState:
    lam: float
    d_core_hat: np.ndarray
    u_current: np.ndarray
    G_hat: np.ndarray
    factors_hat: tuple
    t: int = 0

    @property
    def K(self) -> int:
        return self.G_hat.shape[1]

    @property
    def m(self) -> int:
        return self.G_hat.shape[0]


def core_projection(Y: np.ndarray, factors) -> np.ndarray:
    """``vec(Y x_1 V1^T x_2 V2^T x_3 V3^T)`` for a single image."""
    return vectorize(project_to_core(Y, factors, first_mode=0))


def _estimated_gain(est: EstimationResult) -> np.ndarray:
    return unfold(project_to_core(est.B_hat, est.factors_hat, first_mode=1), 0)


def ewma_init(est: EstimationResult, lam: float) -> ControllerState:
    """Controller state with ``d_hat = 0`` and ``u = 0``."""
    if not 0 < lam < 1:
        raise ValueError(f"EWMA weight must lie in (0, 1), got {lam}")
    G = _estimated_gain(est)
    m, K = G.shape
    return ControllerState(float(lam), np.zeros(K), np.zeros(m), G, tuple(est.factors_hat), 0)


def _recipe(G: np.ndarray, d: np.ndarray) -> np.ndarray:
    return -ls_pinv_solve(G.T, d)


def ewma_step(state: ControllerState, Y_t: np.ndarray) -> tuple:
    """Update the disturbance estimate from ``Y_t`` and return ``(u_next, state')``."""
    Y_t = np.asarray(Y_t, dtype=float)
    expected = tuple(f.shape[0] for f in state.factors_hat)
    if Y_t.shape != expected:
        raise ValueError(f"image shape {Y_t.shape} does not match factors {expected}")
    if not np.all(np.isfinite(Y_t)):
        raise ValueError("non-finite measurement")
    c = core_projection(Y_t, state.factors_hat)
    d = state.lam * (c - state.G_hat.T @ state.u_current) + (1.0 - state.lam) * state.d_core_hat
    u = _recipe(state.G_hat, d)
    return u, replace(state, d_core_hat=d, u_current=u, t=state.t + 1)


def zhong_baseline_step(est: EstimationResult, Y_prev: Optional[np.ndarray], G_hat: Optional[np.ndarray] = None
                        ) -> np.ndarray:
    """Memoryless compensation of the previous run's core error.

    ``u_t = -argmin_u ||G^T u - vec(core(Y_{t-1}))||`` (minimum norm); a
    missing previous run gives ``u = 0``.
    """
    G = _estimated_gain(est) if G_hat is None else G_hat
    if Y_prev is None:
        return np.zeros(G.shape[0])
    Y_prev = np.asarray(Y_prev, dtype=float)
    if not np.all(np.isfinite(Y_prev)):
        raise ValueError("non-finite measurement")
    return -ls_pinv_solve(G.T, core_projection(Y_prev, est.factors_hat))


@dataclass
class EwmaController:
    """Adapter exposing :func:`ewma_step` through the closed-loop ``start``/``step`` protocol."""

    est: EstimationResult
    lam: float

    def start(self):
        state = ewma_init(self.est, self.lam)
        return state.u_current, state

    def step(self, state, Y):
        return ewma_step(state, Y)


@dataclass
class ZhongController:
    est: EstimationResult
    G_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        self.G_hat = _estimated_gain(self.est)

    def start(self):
        return np.zeros(self.G_hat.shape[0]), None

    def step(self, state, Y):
        return zhong_baseline_step(self.est, Y, self.G_hat), None


@dataclass
class StabilityReport:
    """Closed-loop stability of the EWMA recursion.

    Attributes
    ----------
    eigenvalues : ndarray (complex)
        Eigenvalues of ``M = I - lam * xi`` (``K x K``).
    controllable : ndarray (complex)
        Nonzero eigenvalues ``mu`` of the recipe-space gain
        ``pinv(G_hat^T) G_true^T``; the controllable modes of ``M`` are
        ``1 - lam * mu``.
    stable : bool
        Every controllable mode has modulus below ``1 - 1e-9``.
    critical_lambda : float or None
        ``min 2 Re(mu) / |mu|^2``; ``None`` when some ``Re(mu) <= 0``
        (unstable for every positive weight) or no mode is controllable.
    correlation_bound : float or None
        ``(lam - 2) / 2`` when a correlation matrix is supplied, with
        ``correlation_stable`` comparing it against the eigenvalues of ``A``.
    """

    lam: float
    eigenvalues: np.ndarray
    controllable: np.ndarray
    stable: bool
    critical_lambda: Optional[float]
    correlation_bound: Optional[float] = None
    correlation_stable: Optional[bool] = None

    @property
    def controllable_modes(self) -> np.ndarray:
        return 1.0 - self.lam * self.controllable

    @property
    def spectral_radius(self) -> float:
        modes = self.controllable_modes
        return float(np.max(np.abs(modes))) if modes.size else 0.0

    def to_dict(self) -> dict:
        pairs = lambda z: [[float(v.real), float(v.imag)] for v in np.asarray(z, dtype=complex)]
        return {
            "lambda": self.lam,
            "eigenvalues": pairs(self.eigenvalues),
            "controllable_eigenvalues": pairs(self.controllable_modes),
            "stable": bool(self.stable),
            "verdict": "stable" if self.stable else "unstable",
            "critical_lambda": self.critical_lambda,
            "spectral_radius": self.spectral_radius,
            "correlation_bound": self.correlation_bound,
            "correlation_stable": self.correlation_stable,
        }


def critical_lambda(mu: np.ndarray) -> Optional[float]:
    """Largest admissible weight bound ``min 2 Re(mu)/|mu|^2`` (``None`` if unattainable)."""
    mu = np.asarray(mu, dtype=complex)
    if mu.size == 0 or np.any(mu.real <= 0):
        return None
    return float(np.min(2.0 * mu.real / np.abs(mu) ** 2))


def stability_matrix(true_model: ProcessModel, est: EstimationResult, lam: float,
                     A: Optional[np.ndarray] = None) -> StabilityReport:
    """Eigen-analysis of the EWMA loop for a known true parameter.

    ``xi = G_true^T pinv(G_hat^T)`` with ``G_true`` the true parameter
    projected through the estimated factors; ``M = I - lam xi`` drives the
    disturbance estimate.  Recipes evolve as ``u' = (I - lam Xi) u`` with
    ``Xi = pinv(G_hat^T) G_true^T``, so the verdict uses the nonzero
    eigenvalues of ``Xi``.
    """
    if not 0 < lam < 1:
        raise ValueError(f"EWMA weight must lie in (0, 1), got {lam}")
    G_hat = _estimated_gain(est)
    G_true = unfold(project_to_core(true_model.B, est.factors_hat, first_mode=1), 0)
    pinvT = np.linalg.pinv(G_hat.T, rcond=1e-12)
    xi = G_true.T @ pinvT
    M = np.eye(xi.shape[0]) - lam * xi
    eig_M = np.linalg.eigvals(M)
    Xi = pinvT @ G_true.T
    mu = np.linalg.eigvals(Xi)
    scale = max(float(np.max(np.abs(mu))) if mu.size else 0.0, 1e-300)
    mu = mu[np.abs(mu) > CONTROLLABLE_TOL * scale] if np.any(G_hat) else mu[:0]
    mu = mu[np.lexsort((mu.imag, mu.real))]
    stable = bool(np.all(np.abs(1.0 - lam * mu) < 1.0 - STABILITY_MARGIN))
    bound = cor_stable = None
    if A is not None:
        bound = (lam - 2.0) / 2.0
        cor_stable = bool(np.all(np.linalg.eigvals(np.asarray(A, dtype=float)).real > bound))
    order = np.lexsort((eig_M.imag, eig_M.real))
    return StabilityReport(float(lam), eig_M[order], mu, stable, critical_lambda(mu), bound, cor_stable)


def mae(record: RunRecord) -> float:
    """Mean of ``||Y_t||_F`` over the runs; ``inf`` for a diverged record."""
    if record.n_runs == 0:
        raise ValueError("empty run record")
    return record.mae
