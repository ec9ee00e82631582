"""Problem data for the weakly coupled backward LQ population model.

Every agent ``k`` has the backward state

    dx_k = (A x_k + B u_k + C z_k + f) dt + z_k dW_k,    x_k(T) = xi_k,

driven by its own scalar Brownian motion ``W_k``, and the cost

    J_k = 1/2 E[ int |x_k - Gamma1 x^(N) - eta1|_Q^2 + |u_k|_R^2 + |z_k|_H^2 dt ]
        + 1/2 E[ |x_k(0) - Gamma0 x^(N)(0) - eta0|_G^2 ].

Coefficients are constant in time.  Terminal data are affine in the
agent's own Brownian motion: ``xi_k = alpha W_k(T) + c``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Mapping

import numpy as np

PSD_TOL = 1e-10
MODES = ("game", "social", "limit")


class DimensionError(ValueError):
    """Coefficient shapes are inconsistent with (n, r)."""


def _matrix(value: Any, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1 and cols == 1 and arr.shape[0] == rows:
        arr = arr.reshape(rows, 1)
    if arr.shape != (rows, cols):
        raise DimensionError(f"{name} must have shape ({rows}, {cols}), got {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def _vector(value: Any, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    elif arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    if arr.shape != (n,):
        raise DimensionError(f"{name} must have shape ({n},), got {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal value ``xi = alpha * W(T) + c`` with ``alpha`` an n x 1 column."""

    alpha: np.ndarray
    c: np.ndarray

    @classmethod
    def build(cls, alpha: Any, c: Any, n: int) -> "TerminalSpec":
        return cls(_matrix(alpha, n, 1, "terminal.alpha"), _vector(c, n, "terminal.c"))

    def sample(self, w_terminal: np.ndarray) -> np.ndarray:
        """Realised terminal values for an array of scalar ``W(T)`` samples."""
        w = np.asarray(w_terminal, dtype=float)
        return w[..., None] * self.alpha[:, 0] + self.c

    @property
    def mean(self) -> np.ndarray:
        return np.array(self.c)


@dataclass(frozen=True)
class ModelParams:
    n: int
    r: int
    N: int
    T: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    f: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray
    G: np.ndarray
    Gamma1: np.ndarray
    eta1: np.ndarray
    Gamma0: np.ndarray
    eta0: np.ndarray
    terminal: TerminalSpec

    @classmethod
    def build(
        cls,
        *,
        n: int = 1,
        r: int = 1,
        N: int,
        T: float,
        A: Any,
        B: Any,
        C: Any,
        Q: Any,
        R: Any,
        H: Any,
        G: Any,
        Gamma1: Any,
        eta1: Any,
        Gamma0: Any,
        eta0: Any,
        f: Any = None,
        alpha: Any = None,
        c: Any = None,
    ) -> "ModelParams":
        """Construct from scalars, nested lists or arrays; scalars become 1 x 1.

        Omitted f and c default to zero and alpha to a column of ones.
        """
        n, r, N = int(n), int(r), int(N)
        if n < 1 or r < 1:
            raise DimensionError("state and control dimensions must be positive")
        if N < 1:
            raise DimensionError("population size N must be positive")
        if not float(T) > 0:
            raise DimensionError("horizon T must be positive")
        f = np.zeros(n) if f is None else f
        c = np.zeros(n) if c is None else c
        alpha = np.ones((n, 1)) if alpha is None else alpha
        return cls(
            n=n,
            r=r,
            N=N,
            T=float(T),
            A=_matrix(A, n, n, "A"),
            B=_matrix(B, n, r, "B"),
            C=_matrix(C, n, n, "C"),
            f=_vector(f, n, "f"),
            Q=_matrix(Q, n, n, "Q"),
            R=_matrix(R, r, r, "R"),
            H=_matrix(H, n, n, "H"),
            G=_matrix(G, n, n, "G"),
            Gamma1=_matrix(Gamma1, n, n, "Gamma1"),
            eta1=_vector(eta1, n, "eta1"),
            Gamma0=_matrix(Gamma0, n, n, "Gamma0"),
            eta0=_vector(eta0, n, "eta0"),
            terminal=TerminalSpec.build(alpha, c, n),
        )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ModelParams":
        data = dict(data)
        terminal = data.pop("terminal", None) or {}
        unknown = set(data) - {
            "n", "r", "N", "T", "A", "B", "C", "f", "Q", "R", "H", "G",
            "Gamma1", "eta1", "Gamma0", "eta0", "alpha", "c",
        }
        if unknown:
            raise DimensionError(f"unknown model fields: {sorted(unknown)}")
        if terminal:
            data.setdefault("alpha", terminal.get("alpha"))
            data.setdefault("c", terminal.get("c"))
        return cls.build(**data)

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {"n": self.n, "r": self.r, "N": self.N, "T": self.T}
        for name in ("A", "B", "C", "f", "Q", "R", "H", "G", "Gamma1", "eta1", "Gamma0", "eta0"):
            out[name] = getattr(self, name).tolist()
        out["terminal"] = {"alpha": self.terminal.alpha.tolist(), "c": self.terminal.c.tolist()}
        return out

    def replace(self, **changes: Any) -> "ModelParams":
        """Copy with some coefficients changed; values are re-validated."""
        data = {
            "n": self.n, "r": self.r, "N": self.N, "T": self.T,
            "A": self.A, "B": self.B, "C": self.C, "f": self.f, "Q": self.Q,
            "R": self.R, "H": self.H, "G": self.G, "Gamma1": self.Gamma1,
            "eta1": self.eta1, "Gamma0": self.Gamma0, "eta0": self.eta0,
            "alpha": self.terminal.alpha, "c": self.terminal.c,
        }
        data.update(changes)
        return ModelParams.build(**data)

    @cached_property
    def identity(self) -> np.ndarray:
        return np.eye(self.n)

    @cached_property
    def BRB(self) -> np.ndarray:
        """``B R^{-1} B^T``."""
        return self.B @ np.linalg.solve(self.R, self.B.T)


def reference_example(**changes: Any) -> ModelParams:
    """The scalar 30-agent example: A=0.1, B=2, C=1, Q=1, R=5, H=1, G=2,
    Gamma1=Gamma0=0.5, eta1=eta0=1, T=1 and xi_i = W_i(T)."""
    base = dict(
        n=1, r=1, N=30, T=1.0, A=0.1, B=2.0, C=1.0, Q=1.0, R=5.0, H=1.0, G=2.0,
        Gamma1=0.5, eta1=1.0, Gamma0=0.5, eta0=1.0, f=0.0, alpha=1.0, c=0.0,
    )
    base.update(changes)
    return ModelParams.build(**base)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.T
        return t

    def __len__(self) -> int:
        return self.steps + 1

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


@dataclass(frozen=True)
class SocialCoefficients:
    Q_Gamma: np.ndarray
    eta1_bar: np.ndarray
    G_Gamma: np.ndarray
    eta0_bar: np.ndarray


def social_transforms(p: ModelParams) -> SocialCoefficients:
    Q, G, g1, g0 = p.Q, p.G, p.Gamma1, p.Gamma0
    return SocialCoefficients(
        Q_Gamma=Q @ g1 + g1.T @ Q - g1.T @ Q @ g1,
        eta1_bar=Q @ p.eta1 - g1.T @ Q @ p.eta1,
        G_Gamma=G @ g0 + g0.T @ G - g0.T @ G @ g0,
        eta0_bar=G @ p.eta0 - g0.T @ G @ p.eta0,
    )


@dataclass(frozen=True)
class CouplingWeights:
    """Mode-dependent data of the filtered Hamiltonian system.

    The filtered adjoint of agent k solves

        dp = -[A^T p + Q_fluct (x - Ex) + Q_mean Ex - eta_run] dt - (C^T p + H z) dW,
        p(0) = -[G_fluct (x(0) - Ex(0)) + G_mean Ex(0)] + zeta0,

    so the game, social and infinite-population problems differ only here.
    """

    mode: str
    Q_fluct: np.ndarray
    Q_mean: np.ndarray
    eta_run: np.ndarray
    G_fluct: np.ndarray
    G_mean: np.ndarray
    zeta0: np.ndarray


def coupling_weights(p: ModelParams, mode: str) -> CouplingWeights:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    eye = p.identity
    if mode == "game":
        q1 = eye - p.Gamma1 / p.N
        g0 = eye - p.Gamma0 / p.N
        return CouplingWeights(
            mode=mode,
            Q_fluct=q1.T @ p.Q @ q1,
            Q_mean=q1.T @ p.Q @ (eye - p.Gamma1),
            eta_run=q1.T @ p.Q @ p.eta1,
            G_fluct=g0.T @ p.G @ g0,
            G_mean=g0.T @ p.G @ (eye - p.Gamma0),
            zeta0=g0.T @ p.G @ p.eta0,
        )
    sc = social_transforms(p)
    inv_n = 1.0 / p.N if mode == "social" else 0.0
    return CouplingWeights(
        mode=mode,
        Q_fluct=p.Q - sc.Q_Gamma * inv_n,
        Q_mean=p.Q - sc.Q_Gamma,
        eta_run=sc.eta1_bar,
        G_fluct=p.G - sc.G_Gamma * inv_n,
        G_mean=p.G - sc.G_Gamma,
        zeta0=sc.eta0_bar,
    )


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def format(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.detail}".rstrip() for c in self.checks]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _eig_check(name: str, M: np.ndarray, *, sign: int, strict: bool = False) -> Check:
    """Definiteness of a symmetric matrix via its extreme eigenvalue."""
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12):
        return Check(name, False, "not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    if sign > 0:
        lam = eig.min()
        ok = lam > PSD_TOL if strict else lam >= -PSD_TOL
        return Check(name, bool(ok), f"min eigenvalue {lam:.6g}")
    lam = eig.max()
    ok = lam < -PSD_TOL if strict else lam <= PSD_TOL
    return Check(name, bool(ok), f"max eigenvalue {lam:.6g}")


def _game_checks(p: ModelParams) -> list[Check]:
    arrays = [p.A, p.B, p.C, p.f, p.Q, p.R, p.H, p.G, p.Gamma1, p.eta1, p.Gamma0,
              p.eta0, p.terminal.alpha, p.terminal.c]
    finite = all(np.all(np.isfinite(a)) for a in arrays) and np.isfinite(p.T)
    checks = [Check("finite coefficients", bool(finite))]
    if not finite:
        return checks
    checks += [
        _eig_check("R > 0", p.R, sign=1, strict=True),
        _eig_check("Q ⩾ 0", p.Q, sign=1),
        _eig_check("H ⩾ 0", p.H, sign=1),
        _eig_check("G ⩾ 0", p.G, sign=1),
    ]
    return checks


def validate_game_params(p: ModelParams) -> ValidationReport:
    return ValidationReport(tuple(_game_checks(p)))


def validate_social_params(p: ModelParams) -> ValidationReport:
    checks = _game_checks(p)
    if checks[0].passed:
        sc = social_transforms(p)
        checks += [
            _eig_check("Q_Γ ⩽ 0", sc.Q_Gamma, sign=-1),
            _eig_check("G_Γ ⩽ 0", sc.G_Gamma, sign=-1),
        ]
    return ValidationReport(tuple(checks))


def validate(p: ModelParams, mode: str) -> ValidationReport:
    return validate_game_params(p) if mode == "game" else validate_social_params(p)


def with_population(p: ModelParams, N: int) -> ModelParams:
    return replace(p, N=int(N))
