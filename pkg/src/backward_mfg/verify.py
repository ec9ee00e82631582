"""Quantitative checks: costs, stationarity, optimality gaps, residuals and
finite-to-infinite population convergence sweeps."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .bsde import ResidualStats
from .model import ModelParams, TimeGrid
from .pathsim import AgentPath, Ensemble, Synthesis, brownian_increments, simulate_agents, synthesize
from .riccati import MatrixPath, build_limit_riccatis, integrate_matrix_ode, require_no_z_drift

COST_FLOOR = -1e-12
SLOPE_FLOOR = 1e-12


@dataclass(frozen=True)
class CostReport:
    J: np.ndarray
    dt: float
    rule: str = "trapezoid"
    replication_mean: Optional[np.ndarray] = None

    @property
    def J_soc(self) -> float:
        return float(self.J.sum())


def agent_costs(
    p: ModelParams,
    grid: TimeGrid,
    x: np.ndarray,
    u: np.ndarray,
    z: np.ndarray,
    xbar: np.ndarray,
) -> np.ndarray:
    """Cost of each path in ``x`` (agents, nodes, n) against the population mean ``xbar`` (nodes, n)."""
    x, u, z = np.atleast_3d(x), np.atleast_3d(u), np.atleast_3d(z)
    xbar = np.asarray(xbar, dtype=float)
    e = x - xbar @ p.Gamma1.T - p.eta1
    run = (np.einsum("ati,ij,atj->at", e, p.Q, e)
           + np.einsum("ati,ij,atj->at", u, p.R, u)
           + np.einsum("ati,ij,atj->at", z, p.H, z))
    e0 = x[:, 0] - p.Gamma0 @ xbar[0] - p.eta0
    initial = np.einsum("ai,ij,aj->a", e0, p.G, e0)
    J = 0.5 * (run @ grid.trapezoid_weights() + initial)
    if J.size and J.min() < COST_FLOOR:
        raise ArithmeticError(f"negative cost {J.min():.3g}: weights are not positive semidefinite")
    return J


def evaluate_costs(ens: Ensemble, p: Optional[ModelParams] = None) -> CostReport:
    p = p or ens.params
    J = agent_costs(p, ens.grid, ens.x, ens.u, ens.z, ens.xbar)
    return CostReport(J=J, dt=ens.grid.dt)


def stationarity_residual(agent: AgentPath, p: ModelParams) -> float:
    """sup over nodes of |B^T phat + R u|."""
    r = agent.phat @ p.B + agent.u @ p.R.T
    return float(np.linalg.norm(r, axis=-1).max())


def _feedback_adjoint(syn: Synthesis, x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Pi x + (M - Pi) E x + zeta for paths of shape (..., nodes, n)."""
    b = syn.bundle
    ex = syn.Ex.values
    return (np.einsum("tij,...tj->...ti", b.Pi.values, x)
            + np.einsum("tij,tj->ti", b.M.values - b.Pi.values, ex) + zeta)


def feedback_control_residual(agent: AgentPath, syn: Synthesis) -> float:
    """sup |u - (-R^{-1} B^T [Pi x + (M - Pi) E x + zeta])|: the state-feedback route to u."""
    p = syn.params
    u_fb = -np.linalg.solve(p.R, p.B.T @ _feedback_adjoint(syn, agent.x, agent.zeta).T).T
    return float(np.linalg.norm(agent.u - u_fb, axis=-1).max())


@dataclass(frozen=True)
class DecouplingReport:
    sup: float
    sup_phat: float

    @property
    def relative(self) -> float:
        return self.sup / (1.0 + self.sup_phat)


def decoupling_residual(ens: Ensemble) -> DecouplingReport:
    """sup over agents and nodes of |phat - [Pi (x - E x) + M E x + zeta]|."""
    r = ens.phat - _feedback_adjoint(ens.synthesis, ens.x, ens.zeta)
    return DecouplingReport(
        sup=float(np.linalg.norm(r, axis=-1).max()),
        sup_phat=float(np.linalg.norm(ens.phat, axis=-1).max()),
    )


def fbsde_residual(ens: Ensemble) -> ResidualStats:
    """Per-step residual of the state equation, x(t+dt) - x(t) - drift dt - z dW."""
    p, dt = ens.params, ens.grid.dt
    x, u, z = ens.x, ens.u, ens.z
    dW = np.diff(ens.W, axis=1)
    drift = x[:, :-1] @ p.A.T + u[:, :-1] @ p.B.T + z[:, :-1] @ p.C.T + p.f
    r = x[:, 1:] - x[:, :-1] - drift * dt - z[:, :-1] * dW[:, :, None]
    return ResidualStats.from_steps(r, dt)


def nested_increments(seed: int, agent_ids: Sequence[int], grid: TimeGrid, refine: int) -> np.ndarray:
    """Increments on ``grid`` obtained by summing those of a ``refine``-times finer grid.

    Comparing step sizes on the same Brownian paths removes sampling noise
    from refinement ratios.
    """
    fine = brownian_increments(seed, agent_ids, TimeGrid(grid.T, grid.steps * refine))
    return fine.reshape(len(agent_ids), grid.steps, refine).sum(axis=2)


# -- optimality gap --------------------------------------------------------

Perturbation = Union[float, np.ndarray, Callable[[float], np.ndarray]]


def _as_callable(v: Perturbation, r: int, grid: TimeGrid) -> Callable[[float], np.ndarray]:
    if callable(v):
        return lambda t: np.asarray(v(t), dtype=float).reshape(r)
    arr = np.asarray(v, dtype=float)
    if arr.ndim <= 1 and arr.size in (1, r):
        const = np.broadcast_to(arr.reshape(-1), (r,)).copy()
        return lambda t: const
    path = MatrixPath(grid, arr.reshape(len(grid), r).copy())
    return path.at


def perturbation_state(p: ModelParams, grid: TimeGrid, v: Perturbation, method: str = "rk4") -> tuple[np.ndarray, np.ndarray]:
    """(dx, v) on the grid, where dx' = A dx + B v and dx(T) = 0; dz = 0 for deterministic v."""
    vf = _as_callable(v, p.r, grid)
    dx = integrate_matrix_ode(lambda t, y: p.A @ y + p.B @ vf(t), np.zeros(p.n), "backward", grid, method, "dx")
    return dx.values, np.stack([vf(t) for t in grid.nodes])


@dataclass(frozen=True)
class GapTable:
    epsilons: np.ndarray
    dJ: np.ndarray
    q: float
    l: float
    fit_residual: float
    estimator: str
    samples: int

    @property
    def linear_ratio(self) -> float:
        """|l| / (q max|eps|): zero at an optimum."""
        return abs(self.l) / (self.q * np.abs(self.epsilons).max())


def fit_quadratic(eps: np.ndarray, dJ: np.ndarray) -> tuple[float, float, float]:
    """Least-squares dJ = q eps^2 + l eps; returns (q, l, relative residual)."""
    X = np.stack([eps * eps, eps], axis=1)
    (q, l), *_ = np.linalg.lstsq(X, dJ, rcond=None)
    scale = np.linalg.norm(dJ)
    rel = float(np.linalg.norm(X @ [q, l] - dJ) / scale) if scale > 0 else 0.0
    return float(q), float(l), rel


def _deviation_costs(p, grid, x, u, z, xbar, dx, v, eps, criterion, population=None):
    """Cost change caused by each agent in x deviating alone by eps.

    ``criterion="own"`` is the deviating agent's cost; ``"social"`` adds the
    change it causes in everyone else's cost through the population mean.
    ``population`` is the number of other agents sharing the mean path when
    x holds a single representative path instead of the whole population.
    """
    shifted = xbar + eps * dx / p.N
    base = agent_costs(p, grid, x, u, z, xbar)
    own = agent_costs(p, grid, x + eps * dx, u + eps * v, z, shifted) - base
    if criterion == "own":
        return own
    spill = agent_costs(p, grid, x, u, z, shifted) - base
    others = (population - 1) * spill if population else spill.sum() - spill
    return own + others


def optimality_gap(
    p: ModelParams,
    mode: str,
    v: Perturbation,
    epsilons: Sequence[float],
    grid: TimeGrid,
    seed: int = 0,
    estimator: str = "mean",
    replications: int = 1,
    agents: Optional[Sequence[int]] = None,
    method: str = "rk4",
    synthesis: Optional[Synthesis] = None,
    workers: int = 1,
    criterion: Optional[str] = None,
) -> GapTable:
    """Unilateral-deviation cost change for u_k -> u_k + eps v, others fixed.

    The criterion defaults to the agent's own cost in game mode and to the
    social cost (sum over agents) in social mode.

    ``estimator="population"`` averages the realised change over the chosen
    agents (all by default) of ``replications`` simulated populations.
    ``estimator="mean"`` evaluates the expectation exactly: with deterministic
    v the change is linear in the paths plus a deterministic quadratic, so it
    equals the change computed on the mean paths.
    """
    criterion = criterion or ("own" if mode == "game" else "social")
    if criterion not in ("own", "social"):
        raise ValueError("criterion must be 'own' or 'social'")
    syn = synthesis or synthesize(p, mode, grid, method)
    dx, vv = perturbation_state(p, grid, v, method)
    eps = np.asarray(epsilons, dtype=float)
    if estimator == "mean":
        ex = syn.Ex.values
        x, u = ex[None], syn.Eu[None]
        z = np.zeros_like(x)  # dz = 0, so z only enters the base and deviated costs identically
        dJ = np.array([_deviation_costs(p, grid, x, u, z, ex, dx, vv, e, criterion, p.N)[0] for e in eps])
        samples = 1
    elif estimator == "population":
        rows = []
        for rep in range(replications):
            ids = np.arange(rep * p.N, (rep + 1) * p.N)
            ens = simulate_agents(syn, ids, seed, workers)
            sel = np.arange(p.N) if agents is None else np.asarray(agents)
            xbar = ens.xbar
            rows.append([
                _deviation_costs(p, grid, ens.x, ens.u, ens.z, xbar, dx, vv, e, criterion)[sel] for e in eps
            ])
        per = np.concatenate([np.asarray(r) for r in rows], axis=1)  # (eps, samples)
        dJ = per.mean(axis=1)
        samples = per.shape[1]
    else:
        raise ValueError("estimator must be 'mean' or 'population'")
    q, l, rel = fit_quadratic(eps, dJ)
    return GapTable(eps, dJ, q, l, rel, estimator, samples)


# -- convergence sweep -----------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    used: int


def loglog_fit(Ns: Sequence[float], values: Sequence[float]) -> SlopeFit:
    """OLS fit of log(value) on log(N), skipping values below the ODE accuracy floor."""
    N = np.asarray(Ns, dtype=float)
    y = np.asarray(values, dtype=float)
    keep = y > SLOPE_FLOOR
    if keep.sum() < 2:
        return SlopeFit(float("nan"), float("nan"), float("nan"), int(keep.sum()))
    lx, ly = np.log(N[keep]), np.log(y[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / tot if tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), float(r2), int(keep.sum()))


SWEEP_METRICS = ("sigma_sup", "pi_sup", "phi_sq", "beta_sq", "zeta_sq", "x_sq", "z_sq")


@dataclass(frozen=True)
class SweepReport:
    Ns: tuple[int, ...]
    metrics: dict[str, np.ndarray]
    fits: dict[str, SlopeFit] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.Ns)) < 4:
            raise ValueError("a sweep needs at least 4 distinct population sizes")
        if any(b <= a for a, b in zip(self.Ns, self.Ns[1:])):
            raise ValueError("population sizes must be strictly increasing")

    def rows(self) -> list[tuple[int, str, float]]:
        return [(N, name, float(vals[i])) for name, vals in self.metrics.items() for i, N in enumerate(self.Ns)]


def _integrated_sq_gap(a: np.ndarray, b: np.ndarray, grid: TimeGrid) -> float:
    d = a - b
    sq = np.sum(d * d, axis=-1)
    if sq.ndim == 2:
        sq = sq.mean(axis=0)
    return float(sq @ grid.trapezoid_weights())


def convergence_sweep(
    p: ModelParams,
    Ns: Sequence[int],
    grid: TimeGrid,
    paths: int = 200,
    seed: int = 0,
    method: str = "rk4",
    workers: int = 1,
) -> SweepReport:
    """Gaps between the N-agent social solution and its infinite-population limit.

    All population sizes reuse the same ``paths`` Brownian streams, so the
    Monte-Carlo error largely cancels in the N-dependence.
    """
    require_no_z_drift(p)
    Ns = tuple(int(N) for N in Ns)
    limit = synthesize(p, "limit", grid, method, bundle=build_limit_riccatis(p, grid, method).bundle)
    ids = list(range(paths))
    dW = brownian_increments(seed, ids, grid)
    lim = simulate_agents(limit, ids, seed, dW=dW)

    def entry(N: int) -> dict[str, float]:
        syn = synthesize(p.replace(N=N), "social", grid, method)
        ens = simulate_agents(syn, ids, seed, dW=dW)
        b, lb = syn.bundle, limit.bundle
        return {
            "sigma_sup": b.Sigma.sup_distance(lb.Sigma),
            "pi_sup": b.Pi.sup_distance(lb.Pi),
            "phi_sq": _integrated_sq_gap(ens.phi, lim.phi, grid),
            "beta_sq": _integrated_sq_gap(syn.phi.a.values, limit.phi.a.values, grid),
            "zeta_sq": _integrated_sq_gap(ens.zeta, lim.zeta, grid),
            "x_sq": _integrated_sq_gap(ens.x, lim.x, grid),
            "z_sq": _integrated_sq_gap(ens.z, lim.z, grid),
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(entry, Ns))
    else:
        results = [entry(N) for N in Ns]
    metrics = {name: np.array([r[name] for r in results]) for name in SWEEP_METRICS}
    fits = {name: loglog_fit(Ns, vals) for name, vals in metrics.items()}
    return SweepReport(Ns, metrics, fits)


# -- gain identities -------------------------------------------------------


@dataclass(frozen=True)
class GainCoincidence:
    identity_gap: float   # sup |MTilde + PiBar - MBar|
    gain_gap: float       # sup |R^{-1} B^T (MTilde - MBar + PiBar)| * sup |E x|
    mtilde_sup: float


def gain_coincidence_check(p: ModelParams, grid: TimeGrid, method: str = "rk4") -> GainCoincidence:
    """Compare the direct-approach mean gain with the limiting social one."""
    lb = build_limit_riccatis(p, grid, method)
    diff = lb.MTilde.values + lb.PiBar.values - lb.MBar.values
    identity_gap = max(np.linalg.norm(d, 2) for d in diff)
    gain = np.einsum("ij,tjk->tik", np.linalg.solve(p.R, p.B.T), diff)
    syn = synthesize(p, "limit", grid, method, check=False, bundle=lb.bundle)
    ex_sup = float(np.linalg.norm(syn.Ex.values, axis=-1).max())
    gain_sup = max(np.linalg.norm(g, 2) for g in gain)
    return GainCoincidence(float(identity_gap), float(gain_sup * ex_sup), lb.MTilde.sup_norm())


def mode_gain_difference(p: ModelParams, grid: TimeGrid, method: str = "rk4") -> float:
    """Largest gap between game and social feedback gains: Pi, M - Pi and E zeta."""
    g = synthesize(p, "game", grid, method, check=False)
    s = synthesize(p, "social", grid, method, check=False)
    gb, sb = g.bundle, s.bundle
    gaps = [
        np.abs(gb.Pi.values - sb.Pi.values).max(),
        np.abs((gb.M.values - gb.Pi.values) - (sb.M.values - sb.Pi.values)).max(),
        np.abs(g.Ezeta.values - s.Ezeta.values).max(),
    ]
    return float(max(gaps))
