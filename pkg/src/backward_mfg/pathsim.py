"""Mean paths, per-agent stochastic paths and the N-agent ensemble.

Only zeta is simulated (Euler-Maruyama).  Everything else is algebraic in
(W, zeta) through the two decoupling relations

    x = Sigma (p - Ep) + K Ep + phi,      p = Pi (x - Ex) + M Ex + zeta,

which give p - Ep = (I - Pi Sigma)^{-1} [Pi (phi - Ephi) + (zeta - Ezeta)]
and Ep = (I - M K)^{-1} (M Ephi + Ezeta).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bsde import AffineBsdeSolution, PhiMoments, solve_phi_affine
from .model import ModelParams, TimeGrid, validate
from .riccati import (
    MatrixPath,
    RiccatiBundle,
    SingularityError,
    build_riccatis,
    checked_solve,
    integrate_matrix_ode,
)

PHAT_VARIANTS = ("derived", "printed")


class ValidationFailed(ValueError):
    def __init__(self, report):
        self.report = report
        super().__init__("model fails the standing assumptions:\n" + report.format())


def solve_mean_zeta(p: ModelParams, bundle: RiccatiBundle, moments: PhiMoments, grid: TimeGrid) -> MatrixPath:
    """E[zeta] forward from zeta0."""
    w = bundle.weights

    def rhs(t: float, ez: np.ndarray) -> np.ndarray:
        m = bundle.M.at(t)
        cp = bundle.coupling(t)
        eb = moments.Ebeta.at(t)
        return (m @ cp.BB - p.A.T) @ ez - m @ p.C @ cp.D @ eb - m @ p.f + w.eta_run

    return integrate_matrix_ode(rhs, w.zeta0, "forward", grid, bundle.method, "E zeta")


def solve_mean_state(
    p: ModelParams,
    bundle: RiccatiBundle,
    moments: PhiMoments,
    Ezeta: MatrixPath,
    Exi: np.ndarray,
    grid: TimeGrid,
) -> MatrixPath:
    """E[x] backward from E[xi] under the feedback strategy."""

    def rhs(t: float, ex: np.ndarray) -> np.ndarray:
        m = bundle.M.at(t)
        cp = bundle.coupling(t)
        return ((p.A - cp.BB @ m) @ ex - cp.BB @ Ezeta.at(t)
                + p.C @ cp.D @ moments.Ebeta.at(t) + p.f)

    return integrate_matrix_ode(rhs, np.asarray(Exi, dtype=float), "backward", grid, bundle.method, "E x")


def mean_adjoint(bundle: RiccatiBundle, moments: PhiMoments, Ezeta: MatrixPath, variant: str = "derived") -> np.ndarray:
    """E[p] at every node from the two mean relations."""
    eye = bundle.params.identity
    out = np.empty_like(Ezeta.values)
    for i, t in enumerate(bundle.grid.nodes):
        m, k = bundle.M[i], bundle.K[i]
        rhs = m @ moments.Ephi[i] + Ezeta[i]
        if variant == "derived":
            out[i] = checked_solve(eye - m @ k, rhs, "I - M K", t)
        else:
            out[i] = checked_solve(eye - bundle.Pi[i] @ bundle.Sigma[i], rhs, "I - Pi Sigma", t)
    return out


def mean_state_algebraic(bundle: RiccatiBundle, moments: PhiMoments, Ezeta: MatrixPath) -> np.ndarray:
    """E[x] = K E[p] + E[phi]: the second route to the mean state."""
    ep = mean_adjoint(bundle, moments, Ezeta)
    return np.einsum("tij,tj->ti", bundle.K.values, ep) + moments.Ephi.values


@dataclass(frozen=True)
class Synthesis:
    """Deterministic ingredients of the decentralised feedback strategy."""

    params: ModelParams
    grid: TimeGrid
    bundle: RiccatiBundle
    phi: AffineBsdeSolution
    Ezeta: MatrixPath
    Ex: MatrixPath
    phat_variant: str = "derived"

    @property
    def mode(self) -> str:
        return self.bundle.mode

    @property
    def moments(self) -> PhiMoments:
        return self.phi.moments()

    @property
    def Ep(self) -> np.ndarray:
        return mean_adjoint(self.bundle, self.moments, self.Ezeta, self.phat_variant)

    @property
    def Eu(self) -> np.ndarray:
        p = self.params
        return -np.linalg.solve(p.R, p.B.T @ self.Ep.T).T


def synthesize(
    p: ModelParams,
    mode: str,
    grid: TimeGrid,
    method: str = "rk4",
    phat_variant: str = "derived",
    check: bool = True,
    bundle: Optional[RiccatiBundle] = None,
) -> Synthesis:
    """Riccati equations, then the phi BSDE, then the two mean paths."""
    if phat_variant not in PHAT_VARIANTS:
        raise ValueError(f"phat_variant must be one of {PHAT_VARIANTS}")
    if check:
        report = validate(p, mode)
        if not report.passed:
            raise ValidationFailed(report)
    if bundle is None:
        bundle = build_riccatis(p, grid, mode, method)
    phi = solve_phi_affine(p, bundle, grid)
    moments = phi.moments()
    ez = solve_mean_zeta(p, bundle, moments, grid)
    ex = solve_mean_state(p, bundle, moments, ez, p.terminal.mean, grid)
    return Synthesis(p, grid, bundle, phi, ez, ex, phat_variant)


@dataclass(frozen=True)
class RngStreamSpec:
    seed: int
    agent_id: int

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.agent_id),))
        return np.random.Generator(np.random.Philox(ss))

    def increments(self, grid: TimeGrid) -> np.ndarray:
        return self.generator().standard_normal(grid.steps) * np.sqrt(grid.dt)


def brownian_increments(seed: int, agent_ids: Sequence[int], grid: TimeGrid) -> np.ndarray:
    return np.stack([RngStreamSpec(seed, k).increments(grid) for k in agent_ids]) if len(agent_ids) else np.zeros((0, grid.steps))


@dataclass(frozen=True)
class _NodeTable:
    """Per-node coefficient arrays used by the vectorised simulation."""

    Sigma: np.ndarray
    K: np.ndarray
    Pi: np.ndarray
    M: np.ndarray
    S: np.ndarray
    D: np.ndarray
    a: np.ndarray
    b: np.ndarray
    Ezeta: np.ndarray
    Ep: np.ndarray
    fluct_gain: np.ndarray
    inv_ips: np.ndarray
    drift_gain: np.ndarray
    drift_const: np.ndarray
    diff_const: np.ndarray
    diff_gain: np.ndarray
    control_gain: np.ndarray


def _node_table(syn: Synthesis) -> _NodeTable:
    p, b = syn.params, syn.bundle
    w = b.weights
    eye = p.identity
    nodes = syn.grid.nodes
    n = p.n
    shape = (len(nodes), n, n)
    S, D, inv_ips = np.empty(shape), np.empty(shape), np.empty(shape)
    drift_gain, diff_gain = np.empty(shape), np.empty(shape)
    drift_const, diff_const = np.empty((len(nodes), n)), np.empty((len(nodes), n))
    a, bb, ez = syn.phi.a.values, syn.phi.b.values, syn.Ezeta.values
    for i, t in enumerate(nodes):
        sig, pi, m = b.Sigma[i], b.Pi[i], b.M[i]
        cp = b.coupling(t)
        S[i], D[i] = cp.S, cp.D
        inv_ips[i] = checked_solve(eye - pi @ sig, eye, "I - Pi Sigma", t)
        cd = p.C @ cp.D
        drift_gain[i] = pi @ cp.BB - p.A.T
        drift_const[i] = (-pi @ cd @ a[i] + (m - pi) @ cp.BB @ ez[i] + (pi - m) @ cd @ a[i]
                          - m @ p.f + w.eta_run)
        diff_const[i] = -(pi + p.H) @ cp.D @ a[i]
        diff_gain[i] = -(eye - pi @ sig) @ checked_solve(eye + p.H @ sig, eye, "I + H Sigma", t) @ p.C.T
    fluct_gain = b.Pi.values if syn.phat_variant == "derived" else b.Sigma.values
    return _NodeTable(
        Sigma=b.Sigma.values, K=b.K.values, Pi=b.Pi.values, M=b.M.values, S=S, D=D,
        a=a, b=bb, Ezeta=ez, Ep=syn.Ep, fluct_gain=fluct_gain, inv_ips=inv_ips,
        drift_gain=drift_gain, drift_const=drift_const, diff_const=diff_const,
        diff_gain=diff_gain, control_gain=-np.linalg.solve(p.R, p.B.T),
    )


def _rows(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Apply M to each row of X; row results do not depend on the batch size."""
    return np.einsum("pj,ij->pi", X, M)


def _simulate_block(syn: Synthesis, tab: _NodeTable, dW: np.ndarray) -> dict[str, np.ndarray]:
    grid, p = syn.grid, syn.params
    P, n, nodes = dW.shape[0], p.n, len(grid)
    dt = grid.dt
    W = np.zeros((P, nodes))
    W[:, 1:] = np.cumsum(dW, axis=1)
    out = {k: np.empty((P, nodes, n)) for k in ("phi", "zeta", "phat", "x", "z")}
    u = np.empty((P, nodes, p.r))
    zeta = np.broadcast_to(syn.bundle.weights.zeta0, (P, n)).copy()
    for i in range(nodes):
        phi = W[:, i : i + 1] * tab.a[i] + tab.b[i]
        dev = _rows(phi - tab.b[i], tab.fluct_gain[i]) + (zeta - tab.Ezeta[i])
        pdev = _rows(dev, tab.inv_ips[i])
        phat = pdev + tab.Ep[i]
        x = _rows(pdev, tab.Sigma[i]) + tab.K[i] @ tab.Ep[i] + phi
        z = tab.D[i] @ tab.a[i] - _rows(phat, tab.S[i] @ p.C.T)
        out["phi"][:, i] = phi
        out["zeta"][:, i] = zeta
        out["phat"][:, i] = phat
        out["x"][:, i] = x
        out["z"][:, i] = z
        u[:, i] = _rows(phat, tab.control_gain)
        if i < grid.steps:
            drift = _rows(zeta, tab.drift_gain[i]) + tab.drift_const[i]
            diff = tab.diff_const[i] + _rows(phat, tab.diff_gain[i])
            zeta = zeta + drift * dt + diff * dW[:, i : i + 1]
    out["u"] = u
    out["W"] = W
    return out


@dataclass(frozen=True)
class AgentPath:
    k: int
    t: np.ndarray
    W: np.ndarray
    phi: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    phat: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    xi: np.ndarray


@dataclass(frozen=True)
class Ensemble:
    """Simulated agents stored as stacked arrays (agent, node, component)."""

    synthesis: Synthesis
    agent_ids: np.ndarray
    W: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    phat: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    costs: Optional[object] = None

    @property
    def params(self) -> ModelParams:
        return self.synthesis.params

    @property
    def grid(self) -> TimeGrid:
        return self.synthesis.grid

    @property
    def size(self) -> int:
        return int(self.x.shape[0])

    @property
    def beta(self) -> np.ndarray:
        return self.synthesis.phi.a.values

    @property
    def xi(self) -> np.ndarray:
        return self.synthesis.params.terminal.sample(self.W[:, -1])

    @property
    def xbar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    @property
    def Ex(self) -> np.ndarray:
        return self.synthesis.Ex.values

    @property
    def agents(self) -> list[AgentPath]:
        return [self.agent(j) for j in range(self.size)]

    def agent(self, j: int) -> AgentPath:
        return AgentPath(
            k=int(self.agent_ids[j]), t=self.grid.nodes, W=self.W[j], phi=self.phi[j],
            beta=self.beta, zeta=self.zeta[j], phat=self.phat[j], x=self.x[j],
            z=self.z[j], u=self.u[j], xi=self.xi[j],
        )

    def with_costs(self, costs) -> "Ensemble":
        from dataclasses import replace

        return replace(self, costs=costs)


def simulate_agents(
    syn: Synthesis,
    agent_ids: Sequence[int],
    seed: int,
    workers: int = 1,
    dW: Optional[np.ndarray] = None,
) -> Ensemble:
    """Simulate the given agents; output is independent of ``workers``."""
    agent_ids = np.asarray(agent_ids, dtype=np.int64)
    if dW is None:
        dW = brownian_increments(seed, agent_ids.tolist(), syn.grid)
    tab = _node_table(syn)
    workers = max(1, int(workers))
    if workers == 1 or len(agent_ids) < 2:
        blocks = [_simulate_block(syn, tab, dW)]
    else:
        chunks = np.array_split(np.arange(len(agent_ids)), min(workers, len(agent_ids)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(lambda idx: _simulate_block(syn, tab, dW[idx]), chunks))
    cat = {k: np.concatenate([blk[k] for blk in blocks]) for k in blocks[0]}
    return Ensemble(syn, agent_ids, cat["W"], cat["phi"], cat["zeta"], cat["phat"], cat["x"], cat["z"], cat["u"])


def simulate_agent(syn: Synthesis, stream: RngStreamSpec) -> AgentPath:
    return simulate_agents(syn, [stream.agent_id], stream.seed).agent(0)


def simulate_population(
    p: ModelParams,
    mode: str,
    seed: int,
    grid: TimeGrid,
    method: str = "rk4",
    phat_variant: str = "derived",
    workers: int = 1,
    replication: int = 0,
    synthesis: Optional[Synthesis] = None,
) -> Ensemble:
    """All N agents of one population; replication r uses agent streams r*N .. r*N+N-1."""
    from .verify import evaluate_costs

    syn = synthesis or synthesize(p, mode, grid, method, phat_variant)
    ids = np.arange(replication * p.N, (replication + 1) * p.N)
    ens = simulate_agents(syn, ids, seed, workers)
    return ens.with_costs(evaluate_costs(ens, p))


__all__ = [
    "AgentPath", "Ensemble", "RngStreamSpec", "SingularityError", "Synthesis",
    "ValidationFailed", "brownian_increments", "mean_adjoint", "mean_state_algebraic",
    "simulate_agent", "simulate_agents", "simulate_population", "solve_mean_state",
    "solve_mean_zeta", "synthesize",
]
