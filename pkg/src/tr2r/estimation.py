"""Offline estimation of the tensor process parameter.

Two estimators share one double-loop skeleton.  The inner loop fits the core
and the orthonormal image-mode factors for a fixed design ``X = U + D``; the
outer loop re-estimates the recipe-space disturbances ``D`` from the fit.

* :func:`algorithm1` fits the core by least squares (alternating least
  squares with orthogonal Procrustes factor updates).
* :func:`algorithm2` (GLRP) replaces the least-squares core step by a joint
  group-lasso / ridge problem in the core ``C`` and a recipe correlation
  matrix ``A``::

      (1/n) ||Cy - X (I + A) C||_F^2 + lam1 * sum_j ||C[j]||_2 + lam2 * ||A||_F^2

Throughout, ``Y`` is the stacked ``n x Q1 x Q2 x Q3`` output array, the
parameter ``B`` has shape ``m x Q1 x Q2 x Q3`` and ``Y ~ B x_0 X``.  Inside
the inner loop the data enter only through ``X^T X`` and ``X^T Y``, so the
cost per iteration does not grow with ``n``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._kernels import group_lasso_bcd
from .simulation import OfflineDataset
from .tensor import (
    fold,
    frobenius,
    PINV_RTOL,
    ls_pinv_solve,
    multi_mode_product,
    project_to_core,
    tucker_reconstruct,
    unfold,
)

__all__ = [
    "EstimationResult",
    "GlrpTuning",
    "hosvd_factors",
    "core_ls_update",
    "procrustes_update",
    "procrustes_solve",
    "group_lasso_update",
    "group_lasso_kkt",
    "glrp_core_objective",
    "ridge_update",
    "select_lambda1",
    "als_objective",
    "algorithm1",
    "algorithm2",
    "estimate_by_slice",
    "SlicedEstimate",
    "pee",
    "residual_norm",
]

REL_TOL = 1e-6
MAX_INNER = 200
MAX_OUTER = 50


@dataclass
class EstimationResult:
    """Fitted parameter and diagnostics.

    Attributes
    ----------
    B_hat : ndarray, shape (m, Q1, Q2, Q3)
    core_hat : ndarray, shape (m, P1, P2, P3)
    factors_hat : tuple of ndarray
        Orthonormal ``Q_i x P_i`` factors.
    A_hat : ndarray or None
        Estimated recipe correlation matrix (GLRP only).
    D_hat : ndarray, shape (n, m)
        Disturbance estimates used in the final fit.
    residual_norm : float
        ``||Y - (U + D_hat) * B_hat||_F``.
    inner_iterations : list of int
        Inner-loop iteration count per outer pass.
    outer_iterations : int
    converged : bool
    history : list of list of float
        Inner-loop objective values per outer pass.
    """

    B_hat: np.ndarray
    core_hat: np.ndarray
    factors_hat: tuple
    D_hat: np.ndarray
    residual_norm: float
    inner_iterations: list
    outer_iterations: int
    converged: bool
    method: str = "als"
    A_hat: Optional[np.ndarray] = None
    lambda1: Optional[float] = None
    lambda2: Optional[float] = None
    history: list = field(default_factory=list)

    @property
    def G_hat(self) -> np.ndarray:
        """Mode-0 unfolding of the core, ``m x K``."""
        return unfold(self.core_hat, 0)

    @property
    def P(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors_hat)

    def summary(self, B_true: Optional[np.ndarray] = None) -> dict:
        out = {
            "method": self.method,
            "residual_norm": self.residual_norm,
            "inner_iterations": list(self.inner_iterations),
            "outer_iterations": self.outer_iterations,
            "converged": self.converged,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "B_norm": frobenius(self.B_hat),
        }
        if self.A_hat is not None:
            out["A_hat"] = self.A_hat
        if B_true is not None:
            out["pee"] = pee(B_true, self.B_hat)
        return out


@dataclass(frozen=True)
class GlrpTuning:
    """Tuning for :func:`algorithm2`; ``lambda1=None`` selects it from the data."""

    lambda1: Optional[float] = None
    lambda2: float = 2.0
    c0: float = 1.0
    lasso_tol: float = 1e-10
    lasso_max_sweeps: int = 10000
    alt_tol: float = 1e-8
    alt_max: int = 1

    def __post_init__(self):
        if self.lambda1 is not None and self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be non-negative")


# ----------------------------------------------------------------------------
# building blocks


def pee(B_true: np.ndarray, B_hat: np.ndarray) -> float:
    """Parameter estimation error ``||vec(B_true - B_hat)||``."""
    B_true, B_hat = np.asarray(B_true), np.asarray(B_hat)
    if B_true.shape != B_hat.shape:
        raise ValueError(f"shape mismatch {B_true.shape} vs {B_hat.shape}")
    return frobenius(B_true - B_hat)


def residual_norm(Y: np.ndarray, X: np.ndarray, B: np.ndarray) -> float:
    return frobenius(Y - np.tensordot(X, B, axes=(1, 0)))


def hosvd_factors(Y: np.ndarray, P: Sequence[int]) -> tuple:
    """Leading ``P_i`` left singular vectors of each image-mode unfolding of `Y`."""
    factors = []
    for i, p in enumerate(P):
        M = unfold(Y, i + 1)
        w, V = np.linalg.eigh(M @ M.T)
        V = V[:, np.argsort(w)[::-1][:p]]
        # deterministic column signs
        idx = np.argmax(np.abs(V), axis=0)
        V = V * np.sign(V[idx, np.arange(V.shape[1])])
        factors.append(V)
    return tuple(factors)


def core_ls_update(Y: np.ndarray, X: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    """Least-squares core ``Y x_0 pinv(X) x_1 V1^T x_2 V2^T x_3 V3^T``.

    A rank-deficient `X` gives the minimum-norm core.
    """
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    if n < m:
        warnings.warn(f"n = {n} < m = {m}: core is the minimum-norm solution", RuntimeWarning)
    Yc = project_to_core(Y, factors, first_mode=1)
    P = Yc.shape[1:]
    G = ls_pinv_solve(X, unfold(Yc, 0))
    return fold(G, 0, (m,) + P)


def procrustes_solve(M: np.ndarray) -> Optional[np.ndarray]:
    """Orthonormal ``V`` maximizing ``tr(V^T M)``; ``None`` if ``M`` is zero."""
    if not np.any(M):
        return None
    R, _, Wt = np.linalg.svd(M, full_matrices=False)
    return R @ Wt


def _project_image_modes(T: np.ndarray, factors: Sequence[np.ndarray], skip: Optional[int] = None) -> np.ndarray:
    """``T x_1 V1^T x_2 V2^T ...`` on the image modes of an ``m x Q1 x ...`` array.

    Each contraction consumes axis 1 and appends the new axis at the end, so
    the image axes come back in their original order; the `skip` mode is
    rotated without contraction.
    """
    for j, V in enumerate(factors):
        if j == skip:
            T = np.moveaxis(T, 1, -1)
        else:
            T = np.tensordot(T, V, axes=([1], [0]))
    return T


def _procrustes_target(YX: np.ndarray, core: np.ndarray, factors: Sequence[np.ndarray], i: int) -> np.ndarray:
    """``Y_(i+1) S_i^T`` computed from the compressed array ``YX = Y x_0 X^T``."""
    T = _project_image_modes(YX, factors, skip=i)
    axes = [a for a in range(T.ndim) if a != i + 1]
    return np.tensordot(T, core, axes=(axes, axes))


def procrustes_update(Y: np.ndarray, core: np.ndarray, factors: Sequence[np.ndarray], i: int,
                      X: np.ndarray) -> tuple:
    """Optimal orthonormal factor for image mode `i` with the others fixed.

    Minimizes ``||Y - core x_0 X x_1 V1 x_2 V2 x_3 V3||_F`` over ``V_{i+1}``
    (0-based image mode `i`, tensor mode ``i + 1``).  Returns
    ``(factor, stalled)``; a zero target keeps the previous factor.
    """
    YX = np.tensordot(np.asarray(X, dtype=float).T, Y, axes=(1, 0))
    V = procrustes_solve(_procrustes_target(YX, core, factors, i))
    if V is None:
        return np.array(factors[i], copy=True), True
    return V, False


def als_objective(Y: np.ndarray, X: np.ndarray, core: np.ndarray, factors: Sequence[np.ndarray]) -> float:
    """Squared residual ``||Y_(0) - X B_(0)||_F^2`` of a Tucker-form parameter."""
    return residual_norm(Y, X, tucker_reconstruct(core, factors, first_mode=1)) ** 2


class _Compressed:
    """Sufficient statistics of ``(Y, X)`` for the inner loop."""

    def __init__(self, Y: np.ndarray, X: np.ndarray):
        self.X = X
        self.XtX = X.T @ X
        self.YX = np.tensordot(X.T, Y, axes=(1, 0))
        self.Y2 = float(np.sum(Y * Y))

    def objective(self, G: np.ndarray, YXc: np.ndarray) -> float:
        """``||Y - G x_0 X x V||^2`` given ``YXc = YX`` projected to the core."""
        GY = float(np.sum(unfold(YXc, 0) * G))
        return max(self.Y2 - 2.0 * GY + float(np.sum(G * (self.XtX @ G))), 0.0)


def _sweep_factors(YX: np.ndarray, core: np.ndarray, factors: list, mix: Optional[np.ndarray] = None) -> bool:
    """One cyclic pass of Procrustes updates; `mix` multiplies the design (GLRP)."""
    stalled = False
    src = YX if mix is None else np.tensordot(mix.T, YX, axes=(1, 0))
    for i in range(len(factors)):
        V = procrustes_solve(_procrustes_target(src, core, factors, i))
        if V is None:
            stalled = True
        else:
            factors[i] = V
    return stalled


def _d_update(Cy: np.ndarray, U: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``D = (Cy - U G) pinv(G)`` (minimum-norm right inverse of the wide core)."""
    return ls_pinv_solve(G.T, (Cy - U @ G).T).T


def _rel_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)


def _init(data: OfflineDataset, P, factors):
    Y = np.asarray(data.Y, dtype=float)
    U = np.asarray(data.U, dtype=float)
    if len(P) != Y.ndim - 1:
        raise ValueError(f"P has {len(P)} entries for {Y.ndim - 1} image modes")
    if factors is None:
        factors = list(hosvd_factors(Y, P))
    else:
        factors = [np.array(f, dtype=float) for f in factors]
        if tuple(f.shape for f in factors) != tuple((q, p) for q, p in zip(Y.shape[1:], P)):
            raise ValueError("supplied factors do not match the image shape and P")
    return Y, U, factors


# ----------------------------------------------------------------------------
# Algorithm 1


def algorithm1(data: OfflineDataset, P: Sequence[int], tol: float = REL_TOL, max_inner: int = MAX_INNER,
               max_outer: int = MAX_OUTER, factors: Optional[Sequence[np.ndarray]] = None,
               update_factors: bool = True, update_disturbance: bool = True) -> EstimationResult:
    """Tensor-on-vector regression by alternating least squares.

    Parameters
    ----------
    data : OfflineDataset
        Recipes ``U`` and outputs ``Y``; hidden truths are ignored.
    P : sequence of int
        Core extents of the image modes.
    tol : float
        Relative-change tolerance for both loops.
    factors : sequence of ndarray, optional
        Initial factors (HOSVD of ``Y`` by default).  With
        ``update_factors=False`` they are held fixed (known-basis mode).
    update_disturbance : bool
        Run the outer disturbance re-estimation; ``False`` keeps ``D = 0``.
    """
    Y, U, factors = _init(data, P, factors)
    n, m = U.shape
    shape_core = (m,) + tuple(P)
    D = np.zeros_like(U)
    inner_counts, history = [], []
    B_prev = None
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        stats = _Compressed(Y, U + D)
        pinv_gram = np.linalg.pinv(stats.XtX, rcond=1e-12, hermitian=True)
        obj_hist = []
        e_prev = None
        inner_ok = False
        for it in range(1, max_inner + 1):
            YXc = _project_image_modes(stats.YX, factors)
            G = pinv_gram @ unfold(YXc, 0)
            core = fold(G, 0, shape_core)
            obj_hist.append(stats.objective(G, YXc))
            if update_factors:
                _sweep_factors(stats.YX, core, factors)
                YXc = _project_image_modes(stats.YX, factors)
                obj_hist.append(stats.objective(G, YXc))
            e = np.sqrt(obj_hist[-1])
            if e_prev is not None and _rel_change(e, e_prev) < tol:
                inner_ok = True
                break
            e_prev = e
            if not update_factors:
                # the core step is exact, so one pass is the fixed point
                inner_ok = True
                break
        inner_counts.append(it)
        history.append(obj_hist)
        B = tucker_reconstruct(core, factors, first_mode=1)
        if not update_disturbance:
            converged = inner_ok
            break
        if B_prev is not None and frobenius(B - B_prev) <= tol * max(frobenius(B_prev), 1e-300):
            converged = inner_ok
            break
        if outer == max_outer:
            break
        B_prev = B
        Cy = unfold(project_to_core(Y, factors, first_mode=1), 0)
        D = _d_update(Cy, U, G)
    return EstimationResult(
        B_hat=B,
        core_hat=core,
        factors_hat=tuple(factors),
        D_hat=D,
        residual_norm=residual_norm(Y, U + D, B),
        inner_iterations=inner_counts,
        outer_iterations=outer,
        converged=converged,
        method="als",
        history=history,
    )


# ----------------------------------------------------------------------------
# GLRP


def glrp_core_objective(Cy: np.ndarray, X: np.ndarray, A: np.ndarray, C: np.ndarray, lambda1: float,
                        lambda2: float) -> float:
    n = X.shape[0]
    R = Cy - X @ (np.eye(A.shape[0]) + A) @ C
    return float(np.sum(R * R) / n + lambda1 * np.sum(np.linalg.norm(C, axis=1)) + lambda2 * np.sum(A * A))


def _group_lasso_gram(ZtZ: np.ndarray, ZtCy: np.ndarray, n: int, lambda1: float, C0: np.ndarray,
                      tol: float, max_sweeps: int) -> tuple:
    C = np.array(C0, dtype=float, copy=True, order="C")
    return group_lasso_bcd(np.ascontiguousarray(ZtZ, dtype=float), np.ascontiguousarray(ZtCy, dtype=float),
                           n * lambda1 / 2.0, C, float(tol), int(max_sweeps))


def group_lasso_update(Cy1: np.ndarray, U: np.ndarray, A: np.ndarray, lambda1: float, tol: float = 1e-10,
                       C0: Optional[np.ndarray] = None, max_sweeps: int = 10000) -> np.ndarray:
    """Row-sparse core minimizing ``(1/n)||Cy1 - U(I+A)C||^2 + lambda1 sum_j ||C[j]||``.

    Cyclic block coordinate descent over the rows of ``C`` with exact group
    soft-threshold updates, stopped when no entry moves by more than
    ``tol`` (relative to the largest entry, at least 1).
    """
    Cy1, U, A = (np.asarray(a, dtype=float) for a in (Cy1, U, A))
    if not (np.all(np.isfinite(Cy1)) and np.all(np.isfinite(U)) and np.all(np.isfinite(A))):
        raise ValueError("group_lasso_update received non-finite input")
    if lambda1 < 0:
        raise ValueError("lambda1 must be non-negative")
    n, m = U.shape
    Z = U @ (np.eye(m) + A)
    C0 = np.zeros((m, Cy1.shape[1])) if C0 is None else C0
    C, _, _ = _group_lasso_gram(Z.T @ Z, Z.T @ Cy1, n, lambda1, C0, tol, max_sweeps)
    return C


def group_lasso_kkt(Cy1: np.ndarray, U: np.ndarray, A: np.ndarray, C: np.ndarray, lambda1: float) -> dict:
    """Optimality certificate for :func:`group_lasso_update`.

    Returns the worst stationarity residual over active rows
    (``||grad_j + lambda1 c_j/||c_j|| ||``) and the worst excess
    ``||grad_j|| - lambda1`` over zero rows, with
    ``grad = -(2/n) Z^T (Cy1 - Z C)``.
    """
    n, m = U.shape
    Z = U @ (np.eye(m) + A)
    grad = -(2.0 / n) * Z.T @ (Cy1 - Z @ C)
    norms = np.linalg.norm(C, axis=1)
    active = norms > 0
    stat = 0.0
    if np.any(active):
        res = grad[active] + lambda1 * C[active] / norms[active, None]
        stat = float(np.max(np.linalg.norm(res, axis=1)))
    excess = -np.inf
    if np.any(~active):
        excess = float(np.max(np.linalg.norm(grad[~active], axis=1)) - lambda1)
    return {"stationarity": stat, "zero_row_excess": excess, "active_rows": int(active.sum())}


def ridge_update(Cy1: np.ndarray, U: np.ndarray, C: np.ndarray, lambda2: float) -> np.ndarray:
    """Correlation matrix minimizing ``(1/n)||Cy1 - U(I+A)C||^2 + lambda2 ||A||^2``.

    Solves ``(C C^T kron U^T U + n lambda2 I) vec(A) = vec(U^T R0 C^T)`` with
    ``R0 = Cy1 - U C``; ``lambda2 = 0`` falls back to the minimum-norm
    least-squares solution.
    """
    Cy1, U, C = (np.asarray(a, dtype=float) for a in (Cy1, U, C))
    if lambda2 < 0:
        raise ValueError("lambda2 must be non-negative")
    n, m = U.shape
    R0 = Cy1 - U @ C
    H = np.kron(C @ C.T, U.T @ U)
    rhs = (U.T @ R0 @ C.T).ravel(order="F")
    if lambda2 > 0:
        a = np.linalg.solve(H + n * lambda2 * np.eye(m * m), rhs)
    else:
        a = ls_pinv_solve(H, rhs)
    return a.reshape((m, m), order="F")


def select_lambda1(U: np.ndarray, lambda2: float, p: Optional[int] = None, m_core: int = 1,
                   n: Optional[int] = None, c0: float = 1.0) -> float:
    """Data-driven group-lasso level for a given ridge level.

    ``lambda1 = c0 sqrt(max_j M_jj) (sqrt(m_core/n) + sqrt(2 log p / n))`` with
    ``M = U^T Q2 U / n`` and ``Q2 = I - U (U^T U - n lambda2 I)^{-1} U^T``.
    """
    U = np.asarray(U, dtype=float)
    n_rows, m = U.shape
    n = n_rows if n is None else n
    p = m if p is None else p
    if lambda2 < 0:
        raise ValueError("lambda2 must be non-negative")
    S = U.T @ U - n * lambda2 * np.eye(m)
    s = np.linalg.svd(S, compute_uv=False)
    if s.min() <= 1e-10 * max(s.max(), 1.0):
        raise ValueError(
            f"U^T U - n*lambda2*I is singular at lambda2={lambda2}; choose a different lambda2"
        )
    # U^T Q2 U = U^T U - U^T U S^{-1} U^T U
    G = U.T @ U
    M = (G - G @ np.linalg.solve(S, G)) / n
    peak = float(np.max(np.diag(M)))
    if peak < 0:
        raise ValueError(f"max diagonal of M is negative at lambda2={lambda2}; choose a different lambda2")
    return c0 * np.sqrt(peak) * (np.sqrt(m_core / n) + np.sqrt(2.0 * np.log(p) / n))


def algorithm2(data: OfflineDataset, P: Sequence[int], tuning: GlrpTuning = GlrpTuning(), tol: float = REL_TOL,
               max_inner: int = MAX_INNER, max_outer: int = MAX_OUTER,
               factors: Optional[Sequence[np.ndarray]] = None, update_factors: bool = True,
               update_disturbance: bool = True) -> EstimationResult:
    """Tensor-on-vector regression by group lasso with ridge-penalized correlation.

    The core step alternates :func:`group_lasso_update` and
    :func:`ridge_update` until the GLRP objective settles; factors are then
    updated by Procrustes steps against the design ``X (I + A_hat)``.  The
    reported parameter is ``B_hat = C_hat x V_hat`` (``A_hat`` is a nuisance
    describing the recipe/disturbance correlation).
    """
    Y, U, factors = _init(data, P, factors)
    n, m = U.shape
    K = int(np.prod(P))
    lam2 = float(tuning.lambda2)
    lam1 = tuning.lambda1
    if lam1 is None:
        lam1 = select_lambda1(U, lam2, p=m, m_core=K, n=n, c0=tuning.c0)
    lam1 = float(lam1)
    shape_core = (m,) + tuple(P)
    I = np.eye(m)
    D = np.zeros_like(U)
    A = np.zeros((m, m))
    G = np.zeros((m, K))
    inner_counts, history = [], []
    B_prev = None
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        stats = _Compressed(Y, U + D)
        XtX = stats.XtX
        XtX_eig = np.linalg.eigh(XtX)
        obj_hist = []
        e_prev = None
        inner_ok = False
        for it in range(1, max_inner + 1):
            YXc = _project_image_modes(stats.YX, factors)
            XtCy = unfold(YXc, 0)
            prev_alt = None
            for _ in range(tuning.alt_max):
                Mx = I + A
                G, _, _ = _group_lasso_gram(Mx.T @ XtX @ Mx, Mx.T @ XtCy, n, lam1, G, tuning.lasso_tol,
                                            tuning.lasso_max_sweeps)
                A = _ridge_gram(XtX, XtCy, G, n, lam2, XtX_eig)
                G, A = _rescale_rows(G, A, lam1, lam2)
                fit = stats.objective((I + A) @ G, YXc)
                cur = fit / n + lam1 * float(np.sum(np.linalg.norm(G, axis=1))) + lam2 * float(np.sum(A * A))
                obj_hist.append(cur)
                if prev_alt is not None and _rel_change(cur, prev_alt) < tuning.alt_tol:
                    break
                prev_alt = cur
            core = fold(G, 0, shape_core)
            if update_factors:
                _sweep_factors(stats.YX, core, factors, mix=I + A)
                YXc = _project_image_modes(stats.YX, factors)
                fit = stats.objective((I + A) @ G, YXc)
                obj_hist.append(fit / n + lam1 * float(np.sum(np.linalg.norm(G, axis=1)))
                                + lam2 * float(np.sum(A * A)))
            # stop on the reported residual e = ||Y - X * B_hat|| (B_hat excludes A)
            e = np.sqrt(stats.objective(G, YXc))
            if e_prev is not None and _rel_change(e, e_prev) < tol:
                inner_ok = True
                break
            e_prev = e
            if not update_factors:
                inner_ok = True
                break
        inner_counts.append(it)
        history.append(obj_hist)
        B = tucker_reconstruct(core, factors, first_mode=1)
        if not update_disturbance:
            converged = inner_ok
            break
        if B_prev is not None and frobenius(B - B_prev) <= tol * max(frobenius(B_prev), 1e-300):
            converged = inner_ok
            break
        if outer == max_outer:
            break
        B_prev = B
        Cy = unfold(project_to_core(Y, factors, first_mode=1), 0)
        D = _d_update(Cy, U, G)
    return EstimationResult(
        B_hat=B,
        core_hat=core,
        factors_hat=tuple(factors),
        D_hat=D,
        residual_norm=residual_norm(Y, U + D, B),
        inner_iterations=inner_counts,
        outer_iterations=outer,
        converged=converged,
        method="glrp",
        A_hat=A,
        lambda1=lam1,
        lambda2=lam2,
        history=history,
    )


def _rescale_rows(C: np.ndarray, A: np.ndarray, lambda1: float, lambda2: float) -> tuple:
    """Exact minimization over row scalings that leave ``(I + A) C`` unchanged.

    Row ``j`` of ``C`` becomes ``c_j / s`` and column ``j`` of ``I + A``
    becomes ``s (I + A)[:, j]``; only the penalties depend on ``s``, through
    the convex ``lambda1 ||c_j|| / s + lambda2 ||s M_j - e_j||^2``.
    Alternating group-lasso and ridge steps move along these directions very
    slowly, so this step speeds convergence without changing the objective's
    minimizers.
    """
    if lambda1 <= 0 or lambda2 <= 0:
        return C, A
    m = A.shape[0]
    M = np.eye(m) + A
    C = C.copy()
    rn = np.sqrt(np.einsum("ij,ij->i", C, C)).tolist()
    mm = np.einsum("ij,ij->j", M, M).tolist()
    diag = np.diag(M).tolist()
    for j in range(m):
        alpha, a2, mjj = lambda1 * rn[j], mm[j], diag[j]
        if alpha == 0 or a2 == 0:
            continue
        # stationary point: s^3 - p s^2 - q = 0 has exactly one positive root
        p, q = mjj / a2, alpha / (2.0 * lambda2 * a2)
        s = max(p, 0.0) + q ** (1.0 / 3.0)
        for _ in range(100):
            g = (s - p) * s * s - q
            step = g / (3.0 * s * s - 2.0 * p * s)
            s -= step
            if abs(step) <= 1e-15 * s:
                break
        f = lambda t: alpha / t + lambda2 * (t * t * a2 - 2.0 * t * mjj + 1.0)
        if s > 0 and f(s) < f(1.0):
            C[j] /= s
            M[:, j] *= s
    return C, M - np.eye(m)


def _ridge_gram(XtX: np.ndarray, XtCy: np.ndarray, C: np.ndarray, n: int, lambda2: float,
                XtX_eig: Optional[tuple] = None) -> np.ndarray:
    """:func:`ridge_update` from ``X^T X`` and ``X^T Cy`` via the two Gram eigenbases.

    With ``X^T X = Q diag(s) Q^T`` and ``C C^T = W diag(l) W^T`` the normal
    equations ``X^T X A C C^T + n lambda2 A = R`` decouple into
    ``A = Q [(Q^T R W) / (s_i l_j + n lambda2)] W^T``.
    """
    s_x, Qx = np.linalg.eigh(XtX) if XtX_eig is None else XtX_eig
    l_c, Wc = np.linalg.eigh(C @ C.T)
    R = (XtCy - XtX @ C) @ C.T
    denom = np.outer(np.clip(s_x, 0.0, None), np.clip(l_c, 0.0, None)) + n * lambda2
    T = Qx.T @ R @ Wc
    if lambda2 > 0:
        T = T / denom
    else:
        keep = denom > PINV_RTOL * max(float(denom.max()), 1e-300)
        T = np.where(keep, T / np.where(keep, denom, 1.0), 0.0)
    return Qx @ T @ Wc.T


@dataclass
class SlicedEstimate:
    """Per-slice fits along the last image mode, stacked into one parameter."""

    parts: list
    B_hat: np.ndarray

    @property
    def residual_norm(self) -> float:
        return float(np.sqrt(sum(r.residual_norm ** 2 for r in self.parts)))

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.parts)


def estimate_by_slice(data: OfflineDataset, P: Sequence[int], estimator=algorithm1, **kwargs) -> SlicedEstimate:
    """Fit each slice of the last image mode separately and stack the slices.

    Slice ``s`` is the ``n x Q1 x Q2`` output ``Y[..., s]`` fitted with core
    extents ``P[:-1]``; the returned ``B_hat`` stacks the slice parameters
    along the last mode.
    """
    Y = np.asarray(data.Y)
    parts = [estimator(OfflineDataset(U=data.U, Y=Y[..., s], n_cycles=data.n_cycles), tuple(P[:-1]), **kwargs)
             for s in range(Y.shape[-1])]
    return SlicedEstimate(parts=parts, B_hat=np.stack([r.B_hat for r in parts], axis=-1))
