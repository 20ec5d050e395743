"""Backward integration of the coupled Riccati differential equations.

The pair (P, Pbar) obeys, backwards from the terminal weights,

    -dP/dt    = Q + P A + A' P + C' P C - M1' pinv(Ups1) M1
    -dPbar/dt = Qbar + P Abar + Abar' P + (A+Abar)' Pbar + Pbar (A+Abar)
                + Cbar' P Cbar + C' P Cbar + Cbar' P C
                + M1' pinv(Ups1) M1 - M2' pinv(Ups2) M2

with

    Ups1 = R + D' P D                  M1 = B' P + D' P C
    Ups2 = R + Rbar + (D+Dbar)' P (D+Dbar)
    M2   = (B+Bbar)' (P+Pbar) + (D+Dbar)' P (C+Cbar)

and the feedback gains K = -pinv(Ups1) M1, Kbar = -(pinv(Ups2) M2 - pinv(Ups1) M1).
A solution point is *regular* when Ups_i pinv(Ups_i) M_i = M_i for i = 1, 2;
on the strictly-solvable branch Ups1, Ups2 are positive definite and the
pseudoinverses are ordinary inverses.

The integrator is fixed-step classical RK4 with symmetrization of P, Pbar
after every stage; n = m = 1 instances run on a plain-float fast path that
reproduces the matrix path to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import (
    BLOWUP_LIMIT,
    CostSpec,
    Diverged,
    Gains,
    Irregular,
    MeanFieldSystem,
    _as_matrix,
    _as_vector,
    _check_dimensions,
    min_eigenvalue,
    sym_pinv,
    symmetrize,
)

REGULAR_TOL = 1e-8          # tolerance in Ups pinv(Ups) M = M
SOLVABLE_EIG_TOL = 1e-10    # strict-positivity threshold on Ups eigenvalues
GRID_SNAP_TOL = 1e-9        # how close a query time must be to a grid point


def default_steps(T: float) -> int:
    return max(2000, math.ceil(4000.0 * T))


class RiccatiAux(NamedTuple):
    """Stationary-equation building blocks evaluated at one (P, Pbar)."""

    Ups1: np.ndarray
    Ups2: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    regular: bool


class CoupledRhs(NamedTuple):
    """Negated time derivatives (-dP/dt, -dPbar/dt) plus the auxiliaries."""

    dP: np.ndarray
    dPbar: np.ndarray
    aux: RiccatiAux


class _Coeffs:
    """Precomputed transposes and sums for the inner integration loop."""

    def __init__(self, sys: MeanFieldSystem, cost: CostSpec):
        self.A, self.Abar, self.C, self.Cbar = sys.A, sys.Abar, sys.C, sys.Cbar
        self.ApA = sys.A + sys.Abar
        self.CC = sys.C + sys.Cbar
        self.Bt = sys.B.T
        self.BBt = (sys.B + sys.Bbar).T
        self.D, self.DD = sys.D, sys.D + sys.Dbar
        self.Dt, self.DDt = sys.D.T, self.DD.T
        self.Ct, self.Cbart = sys.C.T, sys.Cbar.T
        self.Q, self.Qbar = cost.Q, cost.Qbar
        self.R, self.RpR = cost.R, cost.R + cost.Rbar
        self.B, self.Bbar, self.BB = sys.B, sys.Bbar, sys.B + sys.Bbar
        self.Dbar = sys.Dbar
        self.Abart, self.ApAt = sys.Abar.T, self.ApA.T


def _is_regular(ups, upinv, m) -> bool:
    gap = np.abs(ups @ (upinv @ m) - m).max(initial=0.0)
    return gap <= REGULAR_TOL * (1.0 + np.abs(m).max(initial=0.0))


def _rhs(c: _Coeffs, P: np.ndarray, Pbar: np.ndarray):
    """One evaluation of the coupled right-hand side.

    Returns (dP, dPbar, Ups1, Ups2, M1, M2, U1, U2, regular) where U1, U2 are
    the pseudoinverses (kept for gain extraction).
    """
    PD = P @ c.D
    Ups1 = c.R + c.Dt @ PD
    PDD = P @ c.DD
    Ups2 = c.RpR + c.DDt @ PDD
    PC = P @ c.C
    M1 = c.Bt @ P + c.Dt @ PC
    PCC = P @ c.CC
    M2 = c.BBt @ (P + Pbar) + c.DDt @ PCC
    U1 = sym_pinv(Ups1)
    U2 = sym_pinv(Ups2)
    K1 = U1 @ M1
    K2 = U2 @ M2
    T1 = M1.T @ K1
    T2 = M2.T @ K2
    PA = P @ c.A
    dP = c.Q + PA + PA.T + c.Ct @ PC - T1
    PAbar = P @ c.Abar
    PbA = Pbar @ c.ApA
    PCbar = P @ c.Cbar
    X = c.Ct @ PCbar
    dPbar = (c.Qbar + PAbar + PAbar.T + PbA + PbA.T
             + c.Cbart @ PCbar + X + X.T + T1 - T2)
    regular = _is_regular(Ups1, U1, M1) and _is_regular(Ups2, U2, M2)
    for name, term in (("Ups1", Ups1), ("Ups2", Ups2), ("M1", M1), ("M2", M2),
                       ("dP", dP), ("dPbar", dPbar)):
        if not np.all(np.isfinite(term)):
            raise ValueError(f"non-finite value in {name}")
    return dP, dPbar, Ups1, Ups2, M1, M2, K1, K2, regular


def coupled_rhs(P, Pbar, sys: MeanFieldSystem, cost: CostSpec) -> CoupledRhs:
    """Evaluate (-dP/dt, -dPbar/dt) and the auxiliaries at one point."""
    _check_dimensions(sys, cost)
    n = sys.n
    P = symmetrize(_as_matrix(P, n, n, "P"))
    Pbar = symmetrize(_as_matrix(Pbar, n, n, "Pbar"))
    c = _Coeffs(sys, cost)
    dP, dPbar, Ups1, Ups2, M1, M2, _, _, regular = _rhs(c, P, Pbar)
    return CoupledRhs(symmetrize(dP), symmetrize(dPbar),
                      RiccatiAux(Ups1, Ups2, M1, M2, regular))


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Grid solution of the coupled Riccati equations on [0, T].

    ``grid`` ascends from 0 to T; index N holds the terminal weights.  The
    auxiliaries and gains are stored per grid point.
    """

    grid: np.ndarray
    P: np.ndarray
    Pbar: np.ndarray
    Ups1: np.ndarray
    Ups2: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    K: np.ndarray
    Kbar: np.ndarray
    regular: np.ndarray

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def steps(self) -> int:
        return len(self.grid) - 1

    def index_of(self, t: float) -> int:
        """Grid index of time t; raises if t is off the grid (no interpolation)."""
        h = self.grid[1] - self.grid[0] if len(self.grid) > 1 else 1.0
        k = int(round(float(t) / h)) if h > 0 else 0
        if k < 0 or k >= len(self.grid) or abs(self.grid[k] - t) > GRID_SNAP_TOL * max(1.0, self.horizon):
            raise ValueError(f"t={t!r} is not a grid point (step {h:.3g}); no interpolation")
        return k

    def aux_at(self, t: float) -> RiccatiAux:
        k = self.index_of(t)
        return RiccatiAux(self.Ups1[k], self.Ups2[k], self.M1[k], self.M2[k],
                          bool(self.regular[k]))


class SolvabilityVerdict(NamedTuple):
    uniquely_solvable: bool
    offending_times: tuple[float, ...]


def _integrate_matrix(sys, cost, T, N, Pterm, Pbarterm):
    c = _Coeffs(sys, cost)
    n, m = sys.n, sys.m
    h = T / N
    grid = np.linspace(0.0, T, N + 1)
    P_arr = np.empty((N + 1, n, n))
    Pb_arr = np.empty((N + 1, n, n))
    U1_arr = np.empty((N + 1, m, m))
    U2_arr = np.empty((N + 1, m, m))
    M1_arr = np.empty((N + 1, m, n))
    M2_arr = np.empty((N + 1, m, n))
    K_arr = np.empty((N + 1, m, n))
    Kb_arr = np.empty((N + 1, m, n))
    reg_arr = np.empty(N + 1, dtype=bool)

    P = symmetrize(Pterm.copy())
    Pb = symmetrize(Pbarterm.copy())

    def record(k, P, Pb, ev):
        dP, dPb, Ups1, Ups2, M1, M2, K1, K2, regular = ev
        P_arr[k], Pb_arr[k] = P, Pb
        U1_arr[k], U2_arr[k], M1_arr[k], M2_arr[k] = Ups1, Ups2, M1, M2
        K_arr[k] = -K1
        Kb_arr[k] = K1 - K2
        reg_arr[k] = regular
        if not regular:
            raise Irregular(grid[k])
        return dP, dPb

    for k in range(N, 0, -1):
        k1 = record(k, P, Pb, _rhs(c, P, Pb))
        a2 = (symmetrize(P + 0.5 * h * k1[0]), symmetrize(Pb + 0.5 * h * k1[1]))
        k2 = _rhs(c, *a2)[:2]
        a3 = (symmetrize(P + 0.5 * h * k2[0]), symmetrize(Pb + 0.5 * h * k2[1]))
        k3 = _rhs(c, *a3)[:2]
        a4 = (symmetrize(P + h * k3[0]), symmetrize(Pb + h * k3[1]))
        k4 = _rhs(c, *a4)[:2]
        P = symmetrize(P + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]))
        Pb = symmetrize(Pb + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]))
        top = max(np.abs(P).max(initial=0.0), np.abs(Pb).max(initial=0.0))
        if not np.isfinite(top) or top > BLOWUP_LIMIT:
            raise Diverged(grid[k - 1], "Riccati integration")
    record(0, P, Pb, _rhs(c, P, Pb))
    return RiccatiSolution(grid, P_arr, Pb_arr, U1_arr, U2_arr, M1_arr, M2_arr,
                           K_arr, Kb_arr, reg_arr)


def _integrate_scalar(sys, cost, T, N, Pterm, Pbarterm):
    """n = m = 1 fast path; same scheme as the matrix path on floats."""
    a = float(sys.A[0, 0]); abar = float(sys.Abar[0, 0])
    b = float(sys.B[0, 0]); bbar = float(sys.Bbar[0, 0])
    cc = float(sys.C[0, 0]); cbar = float(sys.Cbar[0, 0])
    d = float(sys.D[0, 0]); dbar = float(sys.Dbar[0, 0])
    q = float(cost.Q[0, 0]); qbar = float(cost.Qbar[0, 0])
    r = float(cost.R[0, 0]); rprb = r + float(cost.Rbar[0, 0])
    apa = a + abar
    csum = cc + cbar
    bsum = b + bbar
    dsum = d + dbar
    bdc = b  # B' P term uses b; cross term d*P*c folded below

    h = T / N
    grid = np.linspace(0.0, T, N + 1)
    out = {name: np.empty(N + 1) for name in
           ("P", "Pb", "U1", "U2", "M1", "M2", "K", "Kb")}
    reg_arr = np.empty(N + 1, dtype=bool)

    def rhs(P, Pb):
        ups1 = r + d * d * P
        ups2 = rprb + dsum * dsum * P
        m1 = bdc * P + d * P * cc
        m2 = bsum * (P + Pb) + dsum * P * csum
        u1 = 1.0 / ups1 if abs(ups1) > 1e-10 else 0.0
        u2 = 1.0 / ups2 if abs(ups2) > 1e-10 else 0.0
        t1 = m1 * m1 * u1
        t2 = m2 * m2 * u2
        dP = q + 2.0 * a * P + cc * cc * P - t1
        dPb = (qbar + 2.0 * abar * P + 2.0 * apa * Pb
               + cbar * cbar * P + 2.0 * cc * cbar * P + t1 - t2)
        reg = (abs(ups1 * u1 * m1 - m1) <= REGULAR_TOL * (1.0 + abs(m1))
               and abs(ups2 * u2 * m2 - m2) <= REGULAR_TOL * (1.0 + abs(m2)))
        return dP, dPb, ups1, ups2, m1, m2, u1, u2, reg

    P = float(Pterm[0, 0]); Pb = float(Pbarterm[0, 0])

    def record(k, P, Pb, ev):
        dP, dPb, ups1, ups2, m1, m2, u1, u2, reg = ev
        out["P"][k] = P; out["Pb"][k] = Pb
        out["U1"][k] = ups1; out["U2"][k] = ups2
        out["M1"][k] = m1; out["M2"][k] = m2
        out["K"][k] = -u1 * m1; out["Kb"][k] = u1 * m1 - u2 * m2
        reg_arr[k] = reg
        if not reg:
            raise Irregular(grid[k])
        return dP, dPb

    for k in range(N, 0, -1):
        d1P, d1Pb = record(k, P, Pb, rhs(P, Pb))
        d2P, d2Pb = rhs(P + 0.5 * h * d1P, Pb + 0.5 * h * d1Pb)[:2]
        d3P, d3Pb = rhs(P + 0.5 * h * d2P, Pb + 0.5 * h * d2Pb)[:2]
        d4P, d4Pb = rhs(P + h * d3P, Pb + h * d3Pb)[:2]
        P = P + (h / 6.0) * (d1P + 2.0 * d2P + 2.0 * d3P + d4P)
        Pb = Pb + (h / 6.0) * (d1Pb + 2.0 * d2Pb + 2.0 * d3Pb + d4Pb)
        top = max(abs(P), abs(Pb))
        if not math.isfinite(top) or top > BLOWUP_LIMIT:
            raise Diverged(grid[k - 1], "Riccati integration")
    record(0, P, Pb, rhs(P, Pb))

    shape = (N + 1, 1, 1)
    return RiccatiSolution(grid, out["P"].reshape(shape), out["Pb"].reshape(shape),
                           out["U1"].reshape(shape), out["U2"].reshape(shape),
                           out["M1"].reshape(shape), out["M2"].reshape(shape),
                           out["K"].reshape(shape), out["Kb"].reshape(shape), reg_arr)


def integrate_backward(sys: MeanFieldSystem, cost: CostSpec, T: float,
                       steps: int | None = None) -> RiccatiSolution:
    """Integrate the coupled pair backwards from (Pterm, Pbarterm) over [0, T].

    Classical RK4 on a uniform grid, default max(2000, ceil(4000 T)) steps.
    Raises Diverged past an entry magnitude of 1e12 and Irregular when the
    pseudoinverse consistency condition fails at a grid point.
    """
    if not T > 0:
        raise ValueError(f"T: expected > 0, got {T!r}")
    N = default_steps(T) if steps is None else int(steps)
    if N < 1:
        raise ValueError(f"steps: expected >= 1, got {steps!r}")
    _check_dimensions(sys, cost)
    if sys.n == 1 and sys.m == 1:
        return _integrate_scalar(sys, cost, float(T), N, cost.Pterm, cost.Pbarterm)
    return _integrate_matrix(sys, cost, float(T), N, cost.Pterm, cost.Pbarterm)


def endpoint_backward(sys: MeanFieldSystem, cost: CostSpec, T: float, steps: int,
                      Pterm: np.ndarray | None = None,
                      Pbarterm: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(P, Pbar) at t = 0 only, without storing the grid.

    Same scheme as integrate_backward; used by the horizon-doubling ARE
    solver where the full grid is never needed.
    """
    n = sys.n
    Pterm = cost.Pterm if Pterm is None else symmetrize(_as_matrix(Pterm, n, n, "Pterm"))
    Pbarterm = cost.Pbarterm if Pbarterm is None else symmetrize(_as_matrix(Pbarterm, n, n, "Pbarterm"))
    N = int(steps)
    h = float(T) / N
    if sys.n == 1 and sys.m == 1:
        a = float(sys.A[0, 0]); abar = float(sys.Abar[0, 0])
        b = float(sys.B[0, 0]); bbar = float(sys.Bbar[0, 0])
        cc = float(sys.C[0, 0]); cbar = float(sys.Cbar[0, 0])
        d = float(sys.D[0, 0]); dbar = float(sys.Dbar[0, 0])
        q = float(cost.Q[0, 0]); qbar = float(cost.Qbar[0, 0])
        r = float(cost.R[0, 0]); rprb = r + float(cost.Rbar[0, 0])
        apa = a + abar; csum = cc + cbar; bsum = b + bbar; dsum = d + dbar

        def rhs(P, Pb):
            ups1 = r + d * d * P
            ups2 = rprb + dsum * dsum * P
            m1 = b * P + d * P * cc
            m2 = bsum * (P + Pb) + dsum * P * csum
            u1 = 1.0 / ups1 if abs(ups1) > 1e-10 else 0.0
            u2 = 1.0 / ups2 if abs(ups2) > 1e-10 else 0.0
            t1 = m1 * m1 * u1
            t2 = m2 * m2 * u2
            return (q + 2.0 * a * P + cc * cc * P - t1,
                    qbar + 2.0 * abar * P + 2.0 * apa * Pb
                    + cbar * cbar * P + 2.0 * cc * cbar * P + t1 - t2)

        P = float(Pterm[0, 0]); Pb = float(Pbarterm[0, 0])
        for k in range(N, 0, -1):
            d1P, d1Pb = rhs(P, Pb)
            d2P, d2Pb = rhs(P + 0.5 * h * d1P, Pb + 0.5 * h * d1Pb)
            d3P, d3Pb = rhs(P + 0.5 * h * d2P, Pb + 0.5 * h * d2Pb)
            d4P, d4Pb = rhs(P + h * d3P, Pb + h * d3Pb)
            P = P + (h / 6.0) * (d1P + 2.0 * d2P + 2.0 * d3P + d4P)
            Pb = Pb + (h / 6.0) * (d1Pb + 2.0 * d2Pb + 2.0 * d3Pb + d4Pb)
            top = max(abs(P), abs(Pb))
            if not math.isfinite(top) or top > BLOWUP_LIMIT:
                raise Diverged((k - 1) * h, "Riccati integration")
        return np.array([[P]]), np.array([[Pb]])

    c = _Coeffs(sys, cost)
    P = symmetrize(Pterm.copy()); Pb = symmetrize(Pbarterm.copy())
    for k in range(N, 0, -1):
        k1 = _rhs(c, P, Pb)[:2]
        k2 = _rhs(c, symmetrize(P + 0.5 * h * k1[0]), symmetrize(Pb + 0.5 * h * k1[1]))[:2]
        k3 = _rhs(c, symmetrize(P + 0.5 * h * k2[0]), symmetrize(Pb + 0.5 * h * k2[1]))[:2]
        k4 = _rhs(c, symmetrize(P + h * k3[0]), symmetrize(Pb + h * k3[1]))[:2]
        P = symmetrize(P + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]))
        Pb = symmetrize(Pb + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]))
        top = max(np.abs(P).max(initial=0.0), np.abs(Pb).max(initial=0.0))
        if not np.isfinite(top) or top > BLOWUP_LIMIT:
            raise Diverged((k - 1) * h, "Riccati integration")
    return P, Pb


def solvability_check(sol: RiccatiSolution) -> SolvabilityVerdict:
    """Strict solvability: Ups1 and Ups2 positive definite at every grid point."""
    lam1 = np.linalg.eigvalsh(sol.Ups1).min(axis=1)
    lam2 = np.linalg.eigvalsh(sol.Ups2).min(axis=1)
    bad = np.minimum(lam1, lam2) <= SOLVABLE_EIG_TOL
    times = tuple(float(t) for t in sol.grid[bad])
    return SolvabilityVerdict(not bad.any(), times)


def gains_at(sol: RiccatiSolution, t: float) -> Gains:
    """Feedback gains at a grid time (no interpolation)."""
    k = sol.index_of(t)
    return Gains(sol.K[k], sol.Kbar[k])


def optimal_cost(P0, Pbar0, x0mean, x0secondmoment) -> float:
    """Predicted optimal cost trace(P0 X0) + mean' Pbar0 mean.

    X0 is the initial second moment E[x0 x0']; requires X0 >= mean mean'.
    """
    P0 = np.atleast_2d(np.asarray(P0, dtype=float))
    n = P0.shape[0]
    Pbar0 = _as_matrix(Pbar0, n, n, "Pbar0")
    mu = _as_vector(x0mean, n, "x0mean")
    X0 = symmetrize(_as_matrix(x0secondmoment, n, n, "x0secondmoment"))
    scale = 1.0 + float(np.abs(X0).max(initial=0.0))
    if min_eigenvalue(X0 - np.outer(mu, mu)) < -1e-10 * scale:
        raise ValueError("x0secondmoment: not >= x0mean x0mean'")
    return float(np.trace(P0 @ X0) + mu @ Pbar0 @ mu)


@dataclass(frozen=True, eq=False)
class CostateSplit:
    """Decomposition Pbar = Pbar1 + Pbar2 + Pbar3 on the solution grid."""

    grid: np.ndarray
    Pbar1: np.ndarray
    Pbar2: np.ndarray
    Pbar3: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.Pbar1 + self.Pbar2 + self.Pbar3


def integrate_costate_split(sol: RiccatiSolution, sys: MeanFieldSystem,
                            cost: CostSpec) -> CostateSplit:
    """Backward RK4 of the three-way costate decomposition on sol's grid.

    (P, Pbar1, Pbar2, Pbar3) are integrated jointly so stage values of P and
    the gains are exact; the parts sum to Pbar of the coupled pair by
    construction, which the tests check against ``sol``.  Terminal values are
    (Pbarterm, 0, 0).
    """
    c = _Coeffs(sys, cost)
    n = sys.n
    N = sol.steps
    h = sol.horizon / N
    grid = sol.grid
    P = symmetrize(cost.Pterm.copy())
    B1 = symmetrize(cost.Pbarterm.copy())
    B2 = np.zeros((n, n))
    B3 = np.zeros((n, n))

    out1 = np.empty((N + 1, n, n)); out2 = np.empty((N + 1, n, n)); out3 = np.empty((N + 1, n, n))
    out1[N], out2[N], out3[N] = B1, B2, B3

    def rhs(P, B1, B2, B3):
        Pb = B1 + B2 + B3
        dP, _, Ups1, Ups2, M1, M2, K1, K2, regular = _rhs(c, P, symmetrize(Pb))
        if not regular:
            raise Irregular()
        Kt = -K1
        KpKb = -K2
        Kbt = KpKb - Kt
        PB = P @ c.B
        CtPD = c.Ct @ (P @ c.D)
        CtPDbar = c.Ct @ (P @ c.Dbar)
        CbtPC = c.Cbart @ (P @ c.C)
        CbtPD = c.Cbart @ (P @ c.D)
        CbtPCbar = c.Cbart @ (P @ c.Cbar)
        CbtPDbar = c.Cbart @ (P @ c.Dbar)
        d1 = (c.Qbar + P @ c.Abar + c.A.T @ B1 + B1 @ c.ApA + c.Ct @ (P @ c.Cbar)
              + (PB + CtPD) @ Kbt + CtPDbar @ KpKb
              + (P @ c.Bbar + B1 @ c.BB) @ KpKb)
        d2 = (B2 @ c.A + c.Abart @ P + c.ApAt @ B2 + CbtPC
              + (B2 @ c.B + CbtPD) @ Kt)
        d3 = (B2 @ c.Abar + B3 @ c.ApA + c.Abart @ B1 + c.ApAt @ B3 + CbtPCbar
              + (B2 @ c.B + CbtPD) @ Kbt
              + (CbtPDbar + B2 @ c.Bbar + B3 @ c.BB) @ KpKb)
        return dP, d1, d2, d3

    for k in range(N, 0, -1):
        k1 = rhs(P, B1, B2, B3)
        k2 = rhs(symmetrize(P + 0.5 * h * k1[0]), B1 + 0.5 * h * k1[1],
                 B2 + 0.5 * h * k1[2], B3 + 0.5 * h * k1[3])
        k3 = rhs(symmetrize(P + 0.5 * h * k2[0]), B1 + 0.5 * h * k2[1],
                 B2 + 0.5 * h * k2[2], B3 + 0.5 * h * k2[3])
        k4 = rhs(symmetrize(P + h * k3[0]), B1 + h * k3[1], B2 + h * k3[2], B3 + h * k3[3])
        P = symmetrize(P + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        B1 = B1 + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        B2 = B2 + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        B3 = B3 + (h / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        top = max(np.abs(B1).max(initial=0.0), np.abs(B2).max(initial=0.0),
                  np.abs(B3).max(initial=0.0), np.abs(P).max(initial=0.0))
        if not np.isfinite(top) or top > BLOWUP_LIMIT:
            raise Diverged(grid[k - 1], "costate split integration")
        out1[k - 1], out2[k - 1], out3[k - 1] = B1, B2, B3
    return CostateSplit(grid, out1, out2, out3)


def equilibrium_residual(x, xmean, g: Gains, aux: RiccatiAux) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the stationarity condition for u = K x + Kbar E[x].

    r1 = Ups1 (u - E[u]) + M1 (x - E[x]) tests the fluctuation channel,
    r2 = Ups2 E[u] + M2 E[x] the mean channel; both vanish at the optimal
    gains whenever the regular condition holds.
    """
    n = g.K.shape[1]
    x = _as_vector(x, n, "x")
    xmean = _as_vector(xmean, n, "xmean")
    u = g.K @ x + g.Kbar @ xmean
    umean = g.total @ xmean
    r1 = aux.Ups1 @ (u - umean) + aux.M1 @ (x - xmean)
    r2 = aux.Ups2 @ umean + aux.M2 @ xmean
    return r1, r2
