"""Euler-Maruyama Monte-Carlo simulation of the mean-field SDE.

Under linear feedback u = K x + Kbar E[x] the state advances as

    x[k+1] = x[k] + (F x[k] + Fbar xbar[k]) dt
           + (G x[k] + Gbar xbar[k]) sqrt(dt) xi[k],

where xbar is the deterministically propagated mean (its ODE is exact for
the linear closed loop, so the controller never sees the ensemble average;
the cross-path average is kept only as a verification statistic) and

    F = A + B K           Fbar = Abar + B Kbar + Bbar (K + Kbar)
    G = C + D K           Gbar = Cbar + D Kbar + Dbar (K + Kbar).

Each path draws from its own counter-based stream keyed by (seed, path
index), so enlarging the ensemble never reshuffles existing paths.  Paths
are simulated in fixed-size chunks; full trajectories are kept only on a
strided snapshot grid while cost quadrature runs at full resolution through
per-path trapezoid accumulators of x x', x xbar' and the terminal state,
which is enough to evaluate any quadratic cost afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CostSpec,
    Gains,
    MeanFieldSystem,
    _as_matrix,
    _as_vector,
    is_psd,
    symmetrize,
)

CHUNK = 1024          # paths per vectorized block (fixed: keeps sums reproducible)
MAX_SNAPSHOTS = 201   # per-path states are stored on a grid of at most this size


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DeterministicInitial:
    x0: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.x0, dtype=float).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("x0: non-finite entries")
        object.__setattr__(self, "x0", arr)

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.x0

    @property
    def second_moment(self) -> np.ndarray:
        return np.outer(self.x0, self.x0)


@dataclass(frozen=True, eq=False)
class GaussianInitial:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = symmetrize(_as_matrix(self.cov, mu.shape[0], mu.shape[0], "cov"))
        if not is_psd(cov):
            raise ValueError("cov: not positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)

    def sqrt_cov(self) -> np.ndarray:
        w, v = np.linalg.eigh(self.cov)
        return v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Step size, horizon, ensemble size, seed and initial law."""

    dt: float
    T: float
    paths: int
    seed: int
    initial: DeterministicInitial | GaussianInitial

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt: expected > 0, got {self.dt!r}")
        if not self.T >= self.dt:
            raise ValueError(f"T: expected >= dt, got {self.T!r}")
        if not self.paths >= 1:
            raise ValueError(f"paths: expected >= 1, got {self.paths!r}")

    @property
    def nsteps(self) -> int:
        return max(1, int(round(self.T / self.dt)))


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Simulation output: summary curves plus per-path cost statistics.

    ``mean`` is the propagated mean, ``emp_mean``/``emp_second`` the
    cross-path moments on the full grid.  ``int_xx`` and ``int_xxbar`` are
    per-path trapezoid integrals of x x' and x xbar' over [0, T];
    ``int_xbarxbar`` is the (deterministic) integral of xbar xbar'.
    Snapshots of the states themselves live on ``snapshot_grid``.
    """

    grid: np.ndarray
    mean: np.ndarray
    emp_mean: np.ndarray
    emp_second: np.ndarray
    snapshot_grid: np.ndarray
    snapshot_states: np.ndarray
    terminal_states: np.ndarray
    int_xx: np.ndarray
    int_xxbar: np.ndarray
    int_xbarxbar: np.ndarray
    config: SimConfig
    gains: Gains

    @property
    def paths(self) -> int:
        return self.terminal_states.shape[0]

    def second_moment_trace(self) -> np.ndarray:
        """E[x' x] over the grid (empirical)."""
        return np.trace(self.emp_second, axis1=1, axis2=2)

    def mean_norm_sq(self) -> np.ndarray:
        """||xbar||^2 of the propagated mean over the grid."""
        return np.einsum("ki,ki->k", self.mean, self.mean)


def _closed_loop_sim_matrices(sys: MeanFieldSystem, g: Gains):
    kk = g.total
    F = sys.A + sys.B @ g.K
    Fbar = sys.Abar + sys.B @ g.Kbar + sys.Bbar @ kk
    G = sys.C + sys.D @ g.K
    Gbar = sys.Cbar + sys.D @ g.Kbar + sys.Dbar @ kk
    return F, Fbar, G, Gbar


def propagate_mean(sys: MeanFieldSystem, g: Gains | None, xbar0,
                   cfg: SimConfig) -> np.ndarray:
    """RK4 of the mean ODE dxbar/dt = [(A+Abar) + (B+Bbar)(K+Kbar)] xbar."""
    if g is None:
        g = Gains.zero(sys.n, sys.m)
    M = (sys.A + sys.Abar) + (sys.B + sys.Bbar) @ g.total
    x = _as_vector(xbar0, sys.n, "xbar0")
    K = cfg.nsteps
    h = cfg.dt
    out = np.empty((K + 1, sys.n))
    out[0] = x
    for k in range(K):
        k1 = M @ x
        k2 = M @ (x + 0.5 * h * k1)
        k3 = M @ (x + 0.5 * h * k2)
        k4 = M @ (x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return out


def _path_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, index]))


def simulate_paths(sys: MeanFieldSystem, g: Gains | None, cfg: SimConfig) -> Ensemble:
    """Euler-Maruyama ensemble under u = K x + Kbar E[x] (open loop when g is None)."""
    if cfg.initial.n != sys.n:
        raise ValueError(f"initial: expected dimension {sys.n}, got {cfg.initial.n}")
    gains = Gains.zero(sys.n, sys.m) if g is None else g
    n = sys.n
    K = cfg.nsteps
    dt = cfg.dt
    sqdt = math.sqrt(dt)
    grid = np.arange(K + 1) * dt
    F, Fbar, G, Gbar = _closed_loop_sim_matrices(sys, gains)
    Ft, Fbart, Gt, Gbart = F.T, Fbar.T, G.T, Gbar.T

    xbar = propagate_mean(sys, gains, cfg.initial.mean, cfg)

    stride = max(1, math.ceil(K / (MAX_SNAPSHOTS - 1)))
    snap_idx = np.arange(0, K + 1, stride)
    if snap_idx[-1] != K:
        snap_idx = np.append(snap_idx, K)

    emp_mean = np.zeros((K + 1, n))
    emp_second = np.zeros((K + 1, n, n))
    snapshots = np.empty((cfg.paths, len(snap_idx), n))
    terminal = np.empty((cfg.paths, n))
    int_xx = np.zeros((cfg.paths, n, n))
    int_xxbar = np.zeros((cfg.paths, n, n))

    weights = np.full(K + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    int_xbarxbar = np.einsum("k,ki,kj->ij", weights, xbar, xbar)

    gaussian = isinstance(cfg.initial, GaussianInitial)
    sqrt_cov = cfg.initial.sqrt_cov() if gaussian else None

    for start in range(0, cfg.paths, CHUNK):
        stop = min(start + CHUNK, cfg.paths)
        csize = stop - start
        noise = np.empty((csize, K))
        init_draw = np.empty((csize, n)) if gaussian else None
        for i in range(csize):
            stream = _path_stream(cfg.seed, start + i)
            if gaussian:
                init_draw[i] = stream.standard_normal(n)
            noise[i] = stream.standard_normal(K)
        if gaussian:
            x = cfg.initial.mean + init_draw @ sqrt_cov.T
        else:
            x = np.tile(cfg.initial.x0, (csize, 1))

        snap_ptr = 0
        cw = weights[0]
        emp_mean[0] += x.sum(axis=0)
        emp_second[0] += np.einsum("pi,pj->ij", x, x)
        int_xx[start:stop] += cw * np.einsum("pi,pj->pij", x, x)
        int_xxbar[start:stop] += cw * np.einsum("pi,j->pij", x, xbar[0])
        if snap_idx[0] == 0:
            snapshots[start:stop, 0] = x
            snap_ptr = 1

        for k in range(K):
            drift = x @ Ft + xbar[k] @ Fbart
            diff = x @ Gt + xbar[k] @ Gbart
            x = x + drift * dt + diff * (sqdt * noise[:, k][:, None])
            if not np.all(np.isfinite(x)):
                bad = np.where(~np.isfinite(x).all(axis=1))[0][0]
                raise SimulationError(f"non-finite state at path {start + bad}, step {k + 1}")
            kk1 = k + 1
            cw = weights[kk1]
            emp_mean[kk1] += x.sum(axis=0)
            emp_second[kk1] += np.einsum("pi,pj->ij", x, x)
            int_xx[start:stop] += cw * np.einsum("pi,pj->pij", x, x)
            int_xxbar[start:stop] += cw * np.einsum("pi,j->pij", x, xbar[kk1])
            if snap_ptr < len(snap_idx) and snap_idx[snap_ptr] == kk1:
                snapshots[start:stop, snap_ptr] = x
                snap_ptr += 1
        terminal[start:stop] = x

    emp_mean /= cfg.paths
    emp_second /= cfg.paths
    return Ensemble(grid=grid, mean=xbar, emp_mean=emp_mean, emp_second=emp_second,
                    snapshot_grid=grid[snap_idx], snapshot_states=snapshots,
                    terminal_states=terminal, int_xx=int_xx, int_xxbar=int_xxbar,
                    int_xbarxbar=int_xbarxbar, config=cfg, gains=gains)


def estimate_cost(ens: Ensemble, cost: CostSpec,
                  include_terminal: bool = False) -> tuple[float, float]:
    """Trapezoidal cost estimate and its cross-path standard error.

    The running integrand x'Qx + xbar'Qbar xbar + u'Ru + ubar'Rbar ubar is
    evaluated per path from the stored quadrature statistics; the terms in
    the propagated mean are deterministic and contribute no sampling
    variance.
    """
    g = ens.gains
    kk = g.total
    Wxx = ens.int_xx
    Wxxb = ens.int_xxbar
    Wbb = ens.int_xbarxbar
    # u'Ru = x'(K'RK)x + 2 x'(K'R Kbar) xbar + xbar'(Kbar'R Kbar) xbar
    A1 = cost.Q + g.K.T @ cost.R @ g.K
    A2 = g.K.T @ cost.R @ g.Kbar
    det_mat = cost.Qbar + g.Kbar.T @ cost.R @ g.Kbar + kk.T @ cost.Rbar @ kk
    per_path = (np.einsum("ij,pij->p", A1, Wxx)
                + 2.0 * np.einsum("ij,pij->p", A2, Wxxb))
    det = float(np.sum(det_mat * Wbb))
    if include_terminal:
        xT = ens.terminal_states
        per_path = per_path + np.einsum("pi,ij,pj->p", xT, cost.Pterm, xT)
        mT = ens.mean[-1]
        det += float(mT @ cost.Pbarterm @ mT)
    estimate = float(per_path.mean()) + det
    stderr = float(per_path.std(ddof=1) / math.sqrt(ens.paths)) if ens.paths > 1 else 0.0
    return estimate, stderr


def lyapunov_trace(ens: Ensemble, P, Pbar) -> np.ndarray:
    """V(t) = mean over paths of x'P x + xbar'Pbar xbar on the full grid."""
    n = ens.mean.shape[1]
    P = _as_matrix(P, n, n, "P")
    Pbar = _as_matrix(Pbar, n, n, "Pbar")
    return (np.einsum("ij,kij->k", P, ens.emp_second)
            + np.einsum("ki,ij,kj->k", ens.mean, Pbar, ens.mean))
