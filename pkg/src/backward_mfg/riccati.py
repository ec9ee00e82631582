"""Deterministic matrix ODEs: decoupling Riccati equations and friends.

All equations are integrated on a uniform grid with classical RK4 (or
explicit Euler on request).  Paths keep their field values at the nodes so
that later equations can query them between nodes by cubic Hermite
interpolation, which preserves fourth-order accuracy when one equation's
coefficients come from another.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import CouplingWeights, ModelParams, TimeGrid, coupling_weights, social_transforms

RCOND_MIN = 1e-12
METHODS = ("rk4", "euler")


class BlowUpError(ArithmeticError):
    """A matrix ODE produced a non-finite value."""

    def __init__(self, node: int, t: float, what: str = "ODE"):
        self.node = node
        self.t = t
        super().__init__(f"{what} blew up at node {node} (t={t:.6g})")


class SingularityError(np.linalg.LinAlgError):
    """A matrix that must be inverted is numerically singular."""

    def __init__(self, what: str, t: Optional[float] = None, rcond: float = 0.0):
        self.what = what
        self.t = t
        where = "" if t is None else f" at t={t:.6g}"
        super().__init__(f"{what} is singular{where} (rcond={rcond:.3g})")


def checked_inverse(mat: np.ndarray, what: str, t: Optional[float] = None) -> np.ndarray:
    """LU inverse, rejected when the 1-norm reciprocal condition estimate is tiny."""
    try:
        inv = np.linalg.inv(mat)
    except np.linalg.LinAlgError:
        raise SingularityError(what, t) from None
    rcond = 1.0 / (np.abs(mat).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())
    if not rcond > RCOND_MIN:
        raise SingularityError(what, t, rcond)
    return inv


def checked_solve(mat: np.ndarray, rhs: np.ndarray, what: str, t: Optional[float] = None) -> np.ndarray:
    return checked_inverse(mat, what, t) @ rhs


@dataclass(frozen=True)
class MatrixPath:
    """Array-valued function sampled on a grid, with its derivative at each node."""

    grid: TimeGrid
    values: np.ndarray
    derivs: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.values.shape[0] != len(self.grid):
            raise ValueError("path length does not match grid")
        self.values.setflags(write=False)
        if self.derivs is not None:
            self.derivs.setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def at(self, t: float) -> np.ndarray:
        """Value at time ``t``; exact at nodes, cubic Hermite in between."""
        dt = self.grid.dt
        s = t / dt
        i = int(np.floor(s + 1e-9))
        i = min(max(i, 0), self.grid.steps)
        frac = s - i
        if abs(frac) < 1e-9 or i == self.grid.steps:
            return self.values[i]
        y0, y1 = self.values[i], self.values[i + 1]
        if self.derivs is None:
            return (1 - frac) * y0 + frac * y1
        m0, m1 = self.derivs[i], self.derivs[i + 1]
        if abs(frac - 0.5) < 1e-9:
            return 0.5 * (y0 + y1) + 0.125 * dt * (m0 - m1)
        f2, f3 = frac * frac, frac * frac * frac
        return ((2 * f3 - 3 * f2 + 1) * y0 + (f3 - 2 * f2 + frac) * dt * m0
                + (-2 * f3 + 3 * f2) * y1 + (f3 - f2) * dt * m1)

    def sup_norm(self) -> float:
        return float(max(_norm(v) for v in self.values))

    def sup_distance(self, other: "MatrixPath") -> float:
        return float(max(_norm(a - b) for a, b in zip(self.values, other.values)))


def _norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(x, 2)) if x.ndim == 2 else float(np.linalg.norm(x))


Field = Callable[[float, np.ndarray], np.ndarray]


def integrate_matrix_ode(
    rhs: Field,
    boundary: np.ndarray,
    direction: str,
    grid: TimeGrid,
    method: str = "rk4",
    what: str = "ODE",
) -> MatrixPath:
    """Fixed-step solution of ``S' = rhs(t, S)`` from ``S(0)`` (forward) or ``S(T)`` (backward)."""
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    t_nodes = grid.nodes
    dt = grid.dt
    S0 = np.array(boundary, dtype=float)
    values = np.empty((len(grid),) + S0.shape)
    if direction == "forward":
        order = range(grid.steps)
        start, h = 0, dt
    else:
        order = range(grid.steps, 0, -1)
        start, h = grid.steps, -dt
    values[start] = S0
    S = S0
    for i in order:
        t = t_nodes[i]
        # Overflow is reported below as a blow-up, not as a numpy warning.
        with np.errstate(over="ignore", invalid="ignore"):
            if method == "rk4":
                k1 = rhs(t, S)
                k2 = rhs(t + 0.5 * h, S + 0.5 * h * k1)
                k3 = rhs(t + 0.5 * h, S + 0.5 * h * k2)
                k4 = rhs(t + h, S + h * k3)
                S = S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            else:
                S = S + h * rhs(t, S)
        j = i + 1 if direction == "forward" else i - 1
        if not np.all(np.isfinite(S)):
            raise BlowUpError(j, float(t_nodes[j]), what)
        values[j] = S
    derivs = np.empty_like(values)
    for i, t in enumerate(t_nodes):
        derivs[i] = rhs(t, values[i])
    return MatrixPath(grid, values, derivs)


@dataclass(frozen=True)
class Coupling:
    """Coefficients derived from Sigma(t) that recur in every decoupled equation."""

    S: np.ndarray      # (I + Sigma H)^{-1} Sigma
    D: np.ndarray      # (I + Sigma H)^{-1}
    BB: np.ndarray     # B R^{-1} B^T + C S C^T


def coupling_at(p: ModelParams, sigma: np.ndarray, t: Optional[float] = None) -> Coupling:
    D = checked_inverse(p.identity + sigma @ p.H, "I + Sigma H", t)
    S = D @ sigma
    return Coupling(S=S, D=D, BB=p.BRB + p.C @ S @ p.C.T)


@dataclass(frozen=True)
class RiccatiBundle:
    params: ModelParams
    weights: CouplingWeights
    Sigma: MatrixPath
    K: MatrixPath
    Pi: MatrixPath
    M: MatrixPath
    method: str = "rk4"

    def __post_init__(self) -> None:
        object.__setattr__(self, "_cache", {})

    @property
    def mode(self) -> str:
        return self.weights.mode

    @property
    def grid(self) -> TimeGrid:
        return self.Sigma.grid

    def coupling(self, t: float) -> Coupling:
        """Coupling terms at ``t``, memoised on the half-step lattice used by RK4."""
        half = 2.0 * t / self.grid.dt
        key = round(half)
        if abs(half - key) > 1e-9:
            return coupling_at(self.params, self.Sigma.at(t), t)
        cache = self._cache
        if key not in cache:
            cache[key] = coupling_at(self.params, self.Sigma.at(t), t)
        return cache[key]


def _sigma_field(p: ModelParams, q_fluct: np.ndarray) -> Field:
    A, BRB, C = p.A, p.BRB, p.C

    def rhs(t: float, S: np.ndarray) -> np.ndarray:
        cs = coupling_at(p, S, t).S
        return A @ S + S @ A.T + S @ q_fluct @ S - BRB - C @ cs @ C.T

    return rhs


def _k_field(p: ModelParams, q_mean: np.ndarray, coupling: Callable[[float], Coupling]) -> Field:
    A, BRB, C = p.A, p.BRB, p.C

    def rhs(t: float, K: np.ndarray) -> np.ndarray:
        cs = coupling(t).S
        return A @ K + K @ A.T + K @ q_mean @ K - BRB - C @ cs @ C.T

    return rhs


def _forward_field(p: ModelParams, weight: np.ndarray, coupling: Callable[[float], Coupling]) -> Field:
    """Field of ``P' = -P A - A^T P + P BB(t) P - weight``."""
    A = p.A

    def rhs(t: float, P: np.ndarray) -> np.ndarray:
        bb = coupling(t).BB
        return -P @ A - A.T @ P + P @ bb @ P - weight

    return rhs


def build_riccatis(p: ModelParams, grid: TimeGrid, mode: str, method: str = "rk4") -> RiccatiBundle:
    """Sigma, K backward from zero; Pi, M forward from the initial-cost weights."""
    w = coupling_weights(p, mode)
    zero = np.zeros((p.n, p.n))
    sigma = integrate_matrix_ode(_sigma_field(p, w.Q_fluct), zero, "backward", grid, method, "Sigma")
    partial = RiccatiBundle(p, w, sigma, sigma, sigma, sigma, method)
    k = integrate_matrix_ode(_k_field(p, w.Q_mean, partial.coupling), zero, "backward", grid, method, "K")
    pi = integrate_matrix_ode(_forward_field(p, w.Q_fluct, partial.coupling), -w.G_fluct, "forward", grid, method, "Pi")
    m = integrate_matrix_ode(_forward_field(p, w.Q_mean, partial.coupling), -w.G_mean, "forward", grid, method, "M")
    bundle = RiccatiBundle(p, w, sigma, k, pi, m, method)
    object.__setattr__(bundle, "_cache", partial._cache)
    return bundle


def build_game_riccatis(p: ModelParams, grid: TimeGrid, method: str = "rk4") -> RiccatiBundle:
    return build_riccatis(p, grid, "game", method)


def build_social_riccatis(p: ModelParams, grid: TimeGrid, method: str = "rk4") -> RiccatiBundle:
    return build_riccatis(p, grid, "social", method)


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class LimitBundle:
    """Infinite-population social equations together with the direct-approach gain."""

    bundle: RiccatiBundle
    MTilde: MatrixPath

    @property
    def SigmaBar(self) -> MatrixPath:
        return self.bundle.Sigma

    @property
    def KBar(self) -> MatrixPath:
        return self.bundle.K

    @property
    def PiBar(self) -> MatrixPath:
        return self.bundle.Pi

    @property
    def MBar(self) -> MatrixPath:
        return self.bundle.M


def require_no_z_drift(p: ModelParams) -> None:
    if np.any(p.C != 0):
        raise UnsupportedConfiguration("limit comparison requires C=0")


def build_limit_riccatis(p: ModelParams, grid: TimeGrid, method: str = "rk4") -> LimitBundle:
    require_no_z_drift(p)
    bundle = build_riccatis(p, grid, "limit", method)
    sc = social_transforms(p)
    A, BRB, pi_bar = p.A, p.BRB, bundle.Pi

    def rhs(t: float, Mt: np.ndarray) -> np.ndarray:
        pb = pi_bar.at(t)
        return (-Mt @ A - A.T @ Mt + Mt @ BRB @ pb + pb @ BRB @ Mt
                + Mt @ BRB @ Mt + sc.Q_Gamma)

    m_tilde = integrate_matrix_ode(rhs, sc.G_Gamma, "forward", grid, method, "MTilde")
    return LimitBundle(bundle, m_tilde)
