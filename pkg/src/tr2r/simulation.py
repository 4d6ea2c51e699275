"""Ground-truth process models, offline datasets and closed-loop plants.

The plant is the linear image-valued process

    Y_t = (u_t + d_t) * B + E_t,

where ``u_t`` is the m-vector recipe, ``d_t`` the recipe-space (type-1)
disturbance, ``B`` the ``m x Q1 x Q2 x Q3`` parameter tensor and ``E_t`` the
image-space (type-2) noise field.  ``x * B`` contracts ``x`` against mode 0 of
``B``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Optional, Protocol, Sequence

import numpy as np

from .tensor import frobenius, orthonormalize, tucker_reconstruct, unfold

__all__ = [
    "PlantConfig",
    "DisturbanceSpec",
    "DisturbanceState",
    "NoiseFieldSpec",
    "NoiseState",
    "ProcessModel",
    "OfflineDataset",
    "RunRecord",
    "Controller",
    "DIVERGENCE_LIMIT",
    "make_sin_basis",
    "generate_parameter",
    "generate_offline",
    "step_disturbance",
    "generate_noise_field",
    "plant_output",
    "simulate_closed_loop",
    "ControllerError",
]

DIVERGENCE_LIMIT = 1e12


class ControllerError(RuntimeError):
    """A controller returned a recipe that is not a finite m-vector."""


@dataclass(frozen=True)
class PlantConfig:
    m: int = 6
    Q: tuple = (20, 30, 2)
    P: tuple = (2, 3, 2)
    n_cycles: int = 10
    runs_per_cycle: int = 30
    seed: int = 0
    noise_sd: float = 1.0
    sparsity_rows: Optional[int] = 3

    def __post_init__(self):
        object.__setattr__(self, "Q", tuple(int(q) for q in self.Q))
        object.__setattr__(self, "P", tuple(int(p) for p in self.P))
        if len(self.Q) != len(self.P):
            raise ValueError("Q and P must have the same length")
        if any(p < 1 or p > q for p, q in zip(self.P, self.Q)):
            raise ValueError(f"core extents {self.P} must satisfy 1 <= P_i <= Q_i for Q = {self.Q}")
        if self.m < 1 or self.runs_per_cycle < 1 or self.n_cycles < 1:
            raise ValueError("m, n_cycles and runs_per_cycle must be positive")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        rows = self.m if self.sparsity_rows is None else self.sparsity_rows
        if not 0 <= rows <= self.m:
            raise ValueError(f"sparsity_rows must lie in [0, m={self.m}]")

    @property
    def n(self) -> int:
        return self.n_cycles * self.runs_per_cycle

    @property
    def active_rows(self) -> int:
        return self.m if self.sparsity_rows is None else self.sparsity_rows

    @classmethod
    def full_scale(cls, **overrides) -> "PlantConfig":
        return cls(**{"Q": (100, 200, 2), **overrides})

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PlantConfig":
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Recipe-space disturbance model.

    kinds: ``iid`` (N(0, sd^2) per component), ``linear`` (``A^T u + W``),
    ``ima`` (IMA(1,1) with parameter ``theta``) and ``arima`` (ARIMA(1,1,1)
    with ``phi`` and ``theta``).  IMA/ARIMA act on each component
    independently.
    """

    kind: str = "iid"
    sd: float = 1.0
    A: Optional[np.ndarray] = None
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        if self.kind not in ("iid", "linear", "ima", "arima"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.sd < 0:
            raise ValueError("sd must be non-negative")
        if not abs(self.theta) < 1 or not abs(self.phi) < 1:
            raise ValueError("|theta| and |phi| must be below 1")
        if self.kind == "linear":
            if self.A is None:
                raise ValueError("linear disturbance needs a correlation matrix A")
            A = np.asarray(self.A, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError("A must be a square matrix")
            object.__setattr__(self, "A", A)

    @classmethod
    def iid(cls, sd=1.0):
        return cls("iid", sd)

    @classmethod
    def linear(cls, A, sd=1.0):
        return cls("linear", sd, A=np.asarray(A, dtype=float))

    @classmethod
    def scaled_identity(cls, a: float, m: int, sd=1.0):
        return cls.linear(a * np.eye(m), sd)

    @classmethod
    def ima(cls, theta, sd=1.0):
        return cls("ima", sd, theta=theta)

    @classmethod
    def arima(cls, phi, theta, sd=1.0):
        return cls("arima", sd, theta=theta, phi=phi)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], m: Optional[int] = None) -> "DisturbanceSpec":
        d = dict(d)
        if "a" in d:
            if m is None:
                raise ValueError("scalar correlation 'a' needs the recipe dimension m")
            a = d.pop("a")
            d.setdefault("kind", "linear")
            d["A"] = a * np.eye(m)
        if d.get("A") is not None:
            d["A"] = np.asarray(d["A"], dtype=float)
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "sd": self.sd, "theta": self.theta, "phi": self.phi}
        if self.A is not None:
            out["A"] = np.asarray(self.A).tolist()
        return out


@dataclass(frozen=True)
class DisturbanceState:
    d_prev: np.ndarray
    diff_prev: np.ndarray
    eps_prev: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "DisturbanceState":
        z = np.zeros(m)
        return cls(z, z, z)


@dataclass(frozen=True)
class NoiseFieldSpec:
    """Image-space noise regime with a change point at run ``t_c``.

    Before ``t_c`` every element is N(0, sigma0^2).  From ``t_c`` on:
    ``mean_shift`` adds ``mu`` (default ``3 * sigma0``), ``var_shift`` uses
    sd ``sigma1`` (default ``2 * sigma0``), ``ima``/``arima`` evolve each
    element as an IMA(1,1)/ARIMA(1,1,1) chain driven by N(0, sigma0^2)
    innovations whose history starts with the last in-control draw.
    """

    case: str = "ic"
    sigma0: float = 1.0
    t_c: int = 21
    mu: Optional[float] = None
    sigma1: Optional[float] = None
    theta: float = 0.8
    phi: float = 0.25

    def __post_init__(self):
        if self.case not in ("ic", "mean_shift", "var_shift", "ima", "arima"):
            raise ValueError(f"unknown noise case {self.case!r}")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.t_c < 1:
            raise ValueError("t_c must be >= 1")
        if self.sigma1 is not None and not self.sigma1 > 0:
            raise ValueError("sigma1 must be positive")
        if not abs(self.theta) < 1 or not abs(self.phi) < 1:
            raise ValueError("|theta| and |phi| must be below 1")

    @property
    def shift(self) -> float:
        return 3.0 * self.sigma0 if self.mu is None else float(self.mu)

    @property
    def shifted_sd(self) -> float:
        return 2.0 * self.sigma0 if self.sigma1 is None else float(self.sigma1)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NoiseFieldSpec":
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseState:
    field_prev: Optional[np.ndarray] = None
    diff_prev: Optional[np.ndarray] = None
    eps_prev: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ProcessModel:
    """Tucker-form parameter: ``B = core x_1 V1 x_2 V2 x_3 V3`` (mode 0 = recipes)."""

    core: np.ndarray
    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(np.asarray(f, dtype=float) for f in self.factors))
        object.__setattr__(self, "core", np.asarray(self.core, dtype=float))
        object.__setattr__(self, "_B", tucker_reconstruct(self.core, self.factors, first_mode=1))

    @property
    def B(self) -> np.ndarray:
        return self._B

    @property
    def m(self) -> int:
        return self.core.shape[0]

    @property
    def Q(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def P(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors)

    @property
    def core_matrix(self) -> np.ndarray:
        """Mode-0 unfolding of the core, ``m x prod(P)``."""
        return unfold(self.core, 0)


@dataclass
class OfflineDataset:
    U: np.ndarray
    Y: np.ndarray
    D: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    n_cycles: int = 1

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[1]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.Y.shape[1:])


@dataclass
class RunRecord:
    u: np.ndarray
    d: np.ndarray
    Y: Optional[np.ndarray]
    E: Optional[np.ndarray]
    y_norm: np.ndarray
    e_norm: np.ndarray
    diverged: bool = False

    @property
    def n_runs(self) -> int:
        return len(self.y_norm)

    @property
    def mae(self) -> float:
        if self.diverged:
            return float("inf")
        if self.n_runs == 0:
            raise ValueError("empty run record")
        return float(np.mean(self.y_norm))

    def running_mae(self) -> np.ndarray:
        return np.cumsum(self.y_norm) / np.arange(1, self.n_runs + 1)


class Controller(Protocol):
    def start(self) -> tuple: ...

    def step(self, state, Y: np.ndarray) -> tuple: ...


def make_sin_basis(Q: int, P: int) -> np.ndarray:
    """Orthonormal sine basis with column ``k`` proportional to ``sin(pi k j / Q)``.

    ``P == Q`` returns the identity (the sine template degenerates there,
    e.g. the 2 x 2 direction mode).
    """
    if not 1 <= P <= Q:
        raise ValueError(f"need 1 <= P <= Q, got P={P}, Q={Q}")
    if P == Q:
        return np.eye(Q)
    j = np.arange(1, Q + 1)[:, None] / Q
    k = np.arange(1, P + 1)[None, :]
    return orthonormalize(np.sin(np.pi * k * j))


def generate_parameter(cfg: PlantConfig, rng: np.random.Generator) -> ProcessModel:
    """Random row-sparse core with ``cfg.active_rows`` standard-normal recipe rows."""
    core = np.zeros((cfg.m,) + cfg.P)
    rows = np.sort(rng.choice(cfg.m, size=cfg.active_rows, replace=False))
    core[rows] = rng.standard_normal((len(rows),) + cfg.P)
    factors = tuple(make_sin_basis(q, p) for q, p in zip(cfg.Q, cfg.P))
    return ProcessModel(core, factors)


def plant_output(B: np.ndarray, x: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``x * B + E`` for a single run (x an m-vector) or stacked runs (x n x m)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.tensordot(x, B, axes=(0, 0)) + E
    return np.tensordot(x, B, axes=(1, 0)) + E


def step_disturbance(spec: DisturbanceSpec, state: DisturbanceState, u_t: np.ndarray,
                     rng: np.random.Generator) -> tuple:
    """Advance the recipe-space disturbance one run; returns ``(d_t, state')``."""
    m = len(state.d_prev)
    eps = spec.sd * rng.standard_normal(m)
    if spec.kind == "iid":
        d = eps
        diff = d - state.d_prev
    elif spec.kind == "linear":
        d = spec.A.T @ np.asarray(u_t, dtype=float) + eps
        diff = d - state.d_prev
    elif spec.kind == "ima":
        diff = eps - spec.theta * state.eps_prev
        d = state.d_prev + diff
    else:
        diff = spec.phi * state.diff_prev + eps - spec.theta * state.eps_prev
        d = state.d_prev + diff
    return d, DisturbanceState(d, diff, eps)


def generate_noise_field(spec: NoiseFieldSpec, t: int, state: NoiseState, rng: np.random.Generator,
                         shape: Sequence[int]) -> tuple:
    """Noise field ``E_t`` for run ``t`` (1-based); returns ``(E_t, state')``."""
    if t < 1:
        raise ValueError("run index t starts at 1")
    shape = tuple(shape)
    z = rng.standard_normal(shape)
    if spec.case == "ic" or t < spec.t_c:
        eps = spec.sigma0 * z
        return eps, NoiseState(eps, np.zeros(shape), eps)
    if spec.case == "mean_shift":
        return spec.shift + spec.sigma0 * z, state
    if spec.case == "var_shift":
        return spec.shifted_sd * z, state
    eps = spec.sigma0 * z
    prev = state.field_prev if state.field_prev is not None else np.zeros(shape)
    eps_prev = state.eps_prev if state.eps_prev is not None else np.zeros(shape)
    diff_prev = state.diff_prev if state.diff_prev is not None else np.zeros(shape)
    if spec.case == "ima":
        diff = eps - spec.theta * eps_prev
    else:
        diff = spec.phi * diff_prev + eps - spec.theta * eps_prev
    E = prev + diff
    return E, NoiseState(E, diff, eps)


def generate_offline(cfg: PlantConfig, dist: DisturbanceSpec, rng: np.random.Generator,
                     model: Optional[ProcessModel] = None) -> tuple:
    """Offline dataset of ``cfg.n`` runs; returns ``(model, dataset)``.

    Recipes are i.i.d. N(0, 1); the disturbance state restarts at every
    production cycle.  A model is generated from `rng` unless supplied.
    """
    rng_model, rng_u, rng_d, rng_e = rng.spawn(4)
    if model is None:
        model = generate_parameter(cfg, rng_model)
    n = cfg.n
    U = rng_u.standard_normal((n, cfg.m))
    D = np.empty((n, cfg.m))
    for c in range(cfg.n_cycles):
        state = DisturbanceState.zeros(cfg.m)
        for r in range(cfg.runs_per_cycle):
            t = c * cfg.runs_per_cycle + r
            D[t], state = step_disturbance(dist, state, U[t], rng_d)
    E = cfg.noise_sd * rng_e.standard_normal((n,) + model.Q)
    Y = plant_output(model.B, U + D, E)
    return model, OfflineDataset(U=U, Y=Y, D=D, E=E, n_cycles=cfg.n_cycles)


def simulate_closed_loop(model: ProcessModel, controller: Controller, dist: DisturbanceSpec,
                         noise: NoiseFieldSpec, T: int, rng: np.random.Generator,
                         store: bool = True) -> RunRecord:
    """Run `T` closed-loop runs of the plant under `controller`.

    The loop stops early and flags divergence once ``||Y_t||_F`` exceeds
    ``DIVERGENCE_LIMIT``; the record's MAE is then ``inf``.
    """
    rng_d, rng_e = rng.spawn(2)
    m, shape = model.m, model.Q
    dstate = DisturbanceState.zeros(m)
    nstate = NoiseState()
    u, cstate = controller.start()
    us, ds, ys, es, y_norm, e_norm = [], [], [], [], [], []
    diverged = False
    for t in range(1, T + 1):
        u = np.asarray(u, dtype=float)
        if u.shape != (m,) or not np.all(np.isfinite(u)):
            raise ControllerError(f"controller produced an invalid recipe at run {t}: {u!r}")
        d, dstate = step_disturbance(dist, dstate, u, rng_d)
        E, nstate = generate_noise_field(noise, t, nstate, rng_e, shape)
        Y = plant_output(model.B, u + d, E)
        us.append(u)
        ds.append(d)
        yn = frobenius(Y)
        y_norm.append(yn)
        e_norm.append(frobenius(E))
        if store:
            ys.append(Y)
            es.append(E)
        if not np.isfinite(yn) or yn > DIVERGENCE_LIMIT:
            diverged = True
            break
        u, cstate = controller.step(cstate, Y)
    return RunRecord(
        u=np.array(us),
        d=np.array(ds),
        Y=np.array(ys) if store else None,
        E=np.array(es) if store else None,
        y_norm=np.array(y_norm),
        e_norm=np.array(e_norm),
        diverged=diverged,
    )


@dataclass
class _NoControl:
    m: int

    def start(self):
        return np.zeros(self.m), None

    def step(self, state, Y):
        return np.zeros(self.m), None


def no_control(m: int) -> Controller:
    return _NoControl(m)


__all__.append("no_control")
