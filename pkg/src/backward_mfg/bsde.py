"""The auxiliary mean-field BSDE for (phi_k, beta_k).

    dphi = [D phi + L E[phi] + C (I + Sigma H)^{-1} beta + g] dt + beta dW,   phi(T) = xi,

with D = A + Sigma Q_fluct, L = K Q_mean - Sigma Q_fluct, g = f - K eta_run.

For ``xi = alpha W(T) + c`` the solution is ``phi = a W + b``, ``beta = a`` with
deterministic (a, b) solving linear terminal-value ODEs.  A least-squares
Monte-Carlo solver handles general terminal functions and doubles as an
independent check of the affine reduction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import ModelParams, TimeGrid
from .riccati import MatrixPath, RiccatiBundle, integrate_matrix_ode

RIDGE = 1e-8
COND_LIMIT = 1e10


class RegressionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PhiMoments:
    Ephi: MatrixPath
    Ebeta: MatrixPath


@dataclass(frozen=True)
class AffineBsdeSolution:
    a: MatrixPath
    b: MatrixPath
    mode: str

    def moments(self) -> PhiMoments:
        return PhiMoments(Ephi=self.b, Ebeta=self.a)

    def phi(self, W: np.ndarray) -> np.ndarray:
        """phi on the grid for scalar Brownian paths ``W`` of shape (..., nodes)."""
        W = np.asarray(W, dtype=float)
        return W[..., None] * self.a.values + self.b.values


def _driver(p: ModelParams, bundle: RiccatiBundle, t: float):
    """(D, L, C (I + Sigma H)^{-1}, g) at time t."""
    w = bundle.weights
    sigma, k = bundle.Sigma.at(t), bundle.K.at(t)
    D = p.A + sigma @ w.Q_fluct
    L = k @ w.Q_mean - sigma @ w.Q_fluct
    CD = p.C @ bundle.coupling(t).D
    g = p.f - k @ w.eta_run
    return D, L, CD, g


def solve_phi_affine(p: ModelParams, bundle: RiccatiBundle, grid: TimeGrid) -> AffineBsdeSolution:
    if len(bundle.grid) != len(grid) or bundle.grid.T != grid.T:
        raise ValueError("bundle and grid disagree")

    def rhs(t: float, Y: np.ndarray) -> np.ndarray:
        D, L, CD, g = _driver(p, bundle, t)
        a, b = Y[:, 0], Y[:, 1]
        return np.stack([D @ a, (D + L) @ b + CD @ a + g], axis=1)

    terminal = np.stack([p.terminal.alpha[:, 0], p.terminal.c], axis=1)
    ab = integrate_matrix_ode(rhs, terminal, "backward", grid, bundle.method, "phi")
    a = MatrixPath(grid, ab.values[:, :, 0].copy(), ab.derivs[:, :, 0].copy())
    b = MatrixPath(grid, ab.values[:, :, 1].copy(), ab.derivs[:, :, 1].copy())
    return AffineBsdeSolution(a, b, bundle.mode)


@dataclass(frozen=True)
class ResidualStats:
    """Per-step residuals of a discretised SDE identity.

    ``rms`` is the root mean square over steps and paths; ``defect_rms`` is the
    root mean square over the grid of the accumulated residual, i.e. how far
    the path drifts from the Euler-integrated identity.
    """

    max_abs: float
    rms: float
    defect_rms: float
    dt: float

    @classmethod
    def from_steps(cls, r: np.ndarray, dt: float) -> "ResidualStats":
        # r: (paths, steps, n)
        r = np.asarray(r, dtype=float)
        if r.ndim == 2:
            r = r[None]
        sq = np.sum(r * r, axis=-1)
        acc = np.cumsum(r, axis=1)
        acc_sq = np.sum(acc * acc, axis=-1)
        return cls(
            max_abs=float(np.sqrt(sq.max())),
            rms=float(np.sqrt(sq.mean())),
            defect_rms=float(np.sqrt(acc_sq.mean())),
            dt=dt,
        )


def phi_residual(sol: AffineBsdeSolution, p: ModelParams, bundle: RiccatiBundle, W: np.ndarray) -> ResidualStats:
    grid = bundle.grid
    W = np.atleast_2d(np.asarray(W, dtype=float))
    dt = grid.dt
    phi = sol.phi(W)
    Ephi, beta = sol.b.values, sol.a.values
    r = np.empty((W.shape[0], grid.steps, p.n))
    for i, t in enumerate(grid.nodes[:-1]):
        D, L, CD, g = _driver(p, bundle, t)
        drift = phi[:, i] @ D.T + L @ Ephi[i] + CD @ beta[i] + g
        dW = W[:, i + 1] - W[:, i]
        r[:, i] = phi[:, i + 1] - phi[:, i] - drift * dt - dW[:, None] * beta[i]
    return ResidualStats.from_steps(r, dt)


@dataclass(frozen=True)
class RegressionSolution:
    W: np.ndarray          # (paths, nodes)
    phi: np.ndarray        # (paths, nodes, n)
    beta: np.ndarray       # (paths, nodes, n)
    phi0_stderr: np.ndarray
    beta0_stderr: np.ndarray

    @property
    def phi0(self) -> np.ndarray:
        return self.phi[:, 0].mean(axis=0)

    @property
    def beta0(self) -> np.ndarray:
        return self.beta[:, 0].mean(axis=0)


def _regress(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Fitted values of a least-squares regression of Y on the columns of X."""
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    if np.linalg.cond(Xs) > COND_LIMIT:
        warnings.warn("ill-conditioned regression basis; using ridge fallback", RegressionWarning, stacklevel=3)
        gram = Xs.T @ Xs + RIDGE * np.eye(Xs.shape[1])
        coef = np.linalg.solve(gram, Xs.T @ Y)
    else:
        coef = np.linalg.lstsq(Xs, Y, rcond=None)[0]
    return Xs @ coef


def solve_phi_regression(
    p: ModelParams,
    bundle: RiccatiBundle,
    grid: TimeGrid,
    paths: int,
    degree: int,
    seed: int = 0,
    terminal: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> RegressionSolution:
    """Backward Euler least-squares Monte-Carlo scheme on polynomial features of W(t).

    ``terminal`` maps W(T) of shape (paths,) to xi of shape (paths, n); the
    affine terminal spec of ``p`` is used when omitted.
    """
    if degree < 1:
        raise ValueError("basis degree must be at least 1")
    rng = np.random.default_rng(seed)
    dt = grid.dt
    dW = rng.standard_normal((paths, grid.steps)) * np.sqrt(dt)
    W = np.concatenate([np.zeros((paths, 1)), np.cumsum(dW, axis=1)], axis=1)
    xi = p.terminal.sample(W[:, -1]) if terminal is None else np.asarray(terminal(W[:, -1]), dtype=float)
    xi = xi.reshape(paths, p.n)
    phi = np.empty((paths, len(grid), p.n))
    beta = np.empty_like(phi)
    phi[:, -1] = xi
    beta0_samples = None
    # OLS with an intercept preserves sample means, so the time-zero value is
    # driven by the terminal sample: its spread sets the Monte-Carlo error.
    phi0_se = xi.std(axis=0, ddof=1) / np.sqrt(paths)
    Y = xi
    for i in range(grid.steps - 1, -1, -1):
        t = grid.nodes[i]
        if i == 0:
            # W(0) = 0: conditional expectations are plain means.
            beta0_samples = Y * dW[:, i : i + 1] / dt
            b_hat = np.broadcast_to(beta0_samples.mean(axis=0), Y.shape)
            y_hat = np.broadcast_to(Y.mean(axis=0), Y.shape)
        else:
            X = np.vander(W[:, i], degree + 1, increasing=True)
            b_hat = _regress(X, Y * dW[:, i : i + 1] / dt)
            y_hat = _regress(X, Y)
        D, L, CD, g = _driver(p, bundle, t)
        drift = y_hat @ D.T + L @ y_hat.mean(axis=0) + b_hat @ CD.T + g
        Y = y_hat - drift * dt
        phi[:, i] = Y
        beta[:, i] = b_hat
    # The scheme gives beta on [t_i, t_{i+1}); hold the last value at T.
    beta[:, -1] = beta[:, -2]
    beta0_se = beta0_samples.std(axis=0, ddof=1) / np.sqrt(paths)
    return RegressionSolution(W, phi, beta, phi0_se, beta0_se)
