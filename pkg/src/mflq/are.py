"""Stationary (infinite-horizon) coupled algebraic Riccati equations.

The stationary pair (P, Pbar) zeroes the coupled Riccati right-hand sides:

    0 = Q + P A + A' P + C' P C - M1' pinv(Ups1) M1
    0 = Qbar + P Abar + Abar' P + (A+Abar)' Pbar + Pbar (A+Abar)
        + C' P Cbar + Cbar' P C + Cbar' P Cbar
        + M1' pinv(Ups1) M1 - M2' pinv(Ups2) M2

The solver follows the finite-horizon construction: zero-terminal backward
integrations over doubling horizons, with convergence declared on P0 and
P0 + Pbar0 (the two monotone quantities).  Divergence or horizon exhaustion
is the computational signature of a system that is not mean-square
stabilizable, and surfaces as NonConvergent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import spectra
from .core import (
    CostSpec,
    Diverged,
    Gains,
    Irregular,
    MeanFieldSystem,
    NonConvergent,
    ValidationReport,
    _as_matrix,
    closed_loop,
    lift,
    min_eigenvalue,
    sym_pinv,
    symmetrize,
    validate,
)
from .riccati import coupled_rhs, endpoint_backward

PD_CLASS_RTOL = 1e-8     # scale-aware strict-positivity threshold
PSD_CLASS_TOL = 1e-10    # slack for the semidefinite classification
DEFAULT_ARE_TOL = 1e-9
DEFAULT_MAX_HORIZON = 2.0 ** 14
INITIAL_HORIZON = 8.0
ARE_STEPS_PER_UNIT = 400  # RK4 density for the horizon-doubling integrations


class Definiteness(enum.Enum):
    POSITIVE_DEFINITE = "positive_definite"
    POSITIVE_SEMIDEFINITE = "positive_semidefinite"
    INDEFINITE = "indefinite"


def classify(P: np.ndarray, Pbar: np.ndarray) -> Definiteness:
    """Definiteness of the pair in the sense (P, P + Pbar)."""
    S = P + Pbar
    lam_p = min_eigenvalue(P)
    lam_s = min_eigenvalue(S)
    if (lam_p > PD_CLASS_RTOL * (1.0 + float(np.linalg.norm(P)))
            and lam_s > PD_CLASS_RTOL * (1.0 + float(np.linalg.norm(S)))):
        return Definiteness.POSITIVE_DEFINITE
    if lam_p >= -PSD_CLASS_TOL and lam_s >= -PSD_CLASS_TOL:
        return Definiteness.POSITIVE_SEMIDEFINITE
    return Definiteness.INDEFINITE


def are_residuals(P, Pbar, sys: MeanFieldSystem, cost: CostSpec):
    """Right-hand sides of the two stationary equations plus the regular flag.

    Both vanish exactly at a stationary pair; the evaluation reuses the
    dynamic right-hand side, of which the stationary equations are the
    fixed-point condition.
    """
    ev = coupled_rhs(P, Pbar, sys, cost)
    return ev.dP, ev.dPbar, ev.aux.regular


@dataclass(frozen=True, eq=False)
class AreSolution:
    """Converged stationary pair with auxiliaries, gains and classification."""

    P: np.ndarray
    Pbar: np.ndarray
    Ups1: np.ndarray
    Ups2: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    gains: Gains
    classification: Definiteness
    horizon_used: float
    residual_norms: tuple[float, float]
    regular: bool


def stationary_gains(P, Pbar, sys: MeanFieldSystem, cost: CostSpec) -> Gains:
    """Feedback pair K = -pinv(Ups1) M1, Kbar = -(pinv(Ups2) M2 - pinv(Ups1) M1).

    Requires the regular condition; raises Irregular otherwise.
    """
    ev = coupled_rhs(P, Pbar, sys, cost)
    if not ev.aux.regular:
        raise Irregular()
    k1 = sym_pinv(ev.aux.Ups1) @ ev.aux.M1
    k2 = sym_pinv(ev.aux.Ups2) @ ev.aux.M2
    return Gains(-k1, k1 - k2)


def solve_coupled_are(sys: MeanFieldSystem, cost: CostSpec,
                      tol: float = DEFAULT_ARE_TOL,
                      max_horizon: float = DEFAULT_MAX_HORIZON,
                      steps_per_unit: float = ARE_STEPS_PER_UNIT) -> AreSolution:
    """Stationary pair by horizon doubling of zero-terminal integrations.

    Starting at horizon 8 and doubling, convergence is declared once both
    ||P0(2T) - P0(T)||_F < tol (1 + ||P0(T)||_F) and the same for P0 + Pbar0.
    Raises NonConvergent on divergence or when max_horizon is exhausted.
    """
    report = validate(sys, cost, "infinite")
    if not report.ok:
        raise ValueError("assumption check failed:\n" + str(report))

    def run(T):
        steps = max(2000, math.ceil(steps_per_unit * T))
        return endpoint_backward(sys, cost, T, steps,
                                 np.zeros((sys.n, sys.n)), np.zeros((sys.n, sys.n)))

    T = INITIAL_HORIZON
    try:
        P_prev, Pb_prev = run(T)
        while True:
            if 2.0 * T > max_horizon:
                raise NonConvergent(max_horizon, "horizon limit reached before convergence")
            T *= 2.0
            P_new, Pb_new = run(T)
            dp = np.linalg.norm(P_new - P_prev)
            ds = np.linalg.norm((P_new + Pb_new) - (P_prev + Pb_prev))
            ok_p = dp < tol * (1.0 + np.linalg.norm(P_prev))
            ok_s = ds < tol * (1.0 + np.linalg.norm(P_prev + Pb_prev))
            if ok_p and ok_s:
                break
            P_prev, Pb_prev = P_new, Pb_new
    except Diverged as exc:
        raise NonConvergent(T, f"integration diverged at t={exc.time:.6g}") from exc
    except Irregular as exc:
        raise NonConvergent(T, "regular condition lost during integration") from exc

    P, Pbar = symmetrize(P_new), symmetrize(Pb_new)
    ev = coupled_rhs(P, Pbar, sys, cost)
    gains = stationary_gains(P, Pbar, sys, cost)
    return AreSolution(
        P=P, Pbar=Pbar,
        Ups1=ev.aux.Ups1, Ups2=ev.aux.Ups2, M1=ev.aux.M1, M2=ev.aux.M2,
        gains=gains,
        classification=classify(P, Pbar),
        horizon_used=T,
        residual_norms=(float(np.linalg.norm(ev.dP)), float(np.linalg.norm(ev.dPbar))),
        regular=ev.aux.regular,
    )


def _real_quadratic_roots(alpha: float, beta: float, gamma: float) -> list[float]:
    """Real roots of alpha x^2 + beta x + gamma, degenerating gracefully."""
    if alpha == 0.0 and beta == 0.0 and gamma == 0.0:
        raise ValueError("degenerate stationary polynomial (identically zero)")
    if alpha == 0.0:
        return [] if beta == 0.0 else [-gamma / beta]
    disc = beta * beta - 4.0 * alpha * gamma
    if disc < 0.0:
        return []
    sq = math.sqrt(disc)
    # Citardauq pairing keeps both roots accurate when beta dominates.
    qq = -0.5 * (beta + math.copysign(sq, beta))
    if qq == 0.0:
        return [0.0] if disc == 0.0 else sorted({0.0, -beta / alpha}, reverse=True)
    r1 = qq / alpha
    r2 = gamma / qq
    return sorted({r1, r2}, reverse=True) if disc > 0.0 else [r1]


def scalar_root_oracle(sys: MeanFieldSystem, cost: CostSpec) -> list[tuple[float, list[float]]]:
    """Closed-form stationary roots for n = m = 1, as an independent oracle.

    Clearing the pseudoinverse denominator Ups1 = r + d^2 P from the first
    stationary equation gives the quadratic

        [(2a + c^2) d^2 - (b + d c)^2] P^2 + [q d^2 + (2a + c^2) r] P + q r = 0;

    for each real root P, clearing Ups2 = r + rbar + (d+dbar)^2 P from the
    second equation gives a quadratic in Pbar (coefficients spelled out
    below).  Returns [(P, [Pbar roots])] sorted by P descending; the Pbar
    list is empty when the second quadratic has no real roots.
    """
    if sys.n != 1 or sys.m != 1:
        raise ValueError(f"scalar oracle needs n = m = 1, got n={sys.n}, m={sys.m}")
    a = float(sys.A[0, 0]); abar = float(sys.Abar[0, 0])
    b = float(sys.B[0, 0]); bbar = float(sys.Bbar[0, 0])
    c = float(sys.C[0, 0]); cbar = float(sys.Cbar[0, 0])
    d = float(sys.D[0, 0]); dbar = float(sys.Dbar[0, 0])
    q = float(cost.Q[0, 0]); qbar = float(cost.Qbar[0, 0])
    r = float(cost.R[0, 0]); rr = r + float(cost.Rbar[0, 0])
    twoac = 2.0 * a + c * c
    bdc = b + d * c
    p_roots = _real_quadratic_roots(twoac * d * d - bdc * bdc,
                                    q * d * d + twoac * r,
                                    q * r)

    bsum = b + bbar
    dsum = d + dbar
    csum = c + cbar
    out: list[tuple[float, list[float]]] = []
    for P in p_roots:
        ups1 = r + d * d * P
        ups2 = rr + dsum * dsum * P
        if abs(ups1) < 1e-12 or abs(ups2) < 1e-12:
            raise ValueError(f"stationary root P={P:.6g} makes an Ups denominator vanish")
        m1 = bdc * P
        # 0 = k0 + 2(a+abar) Pbar - (bsum Pbar + w)^2 / ups2, with
        # k0 collecting all Pbar-free terms and w = (bsum + dsum*csum) P.
        k0 = qbar + 2.0 * abar * P + (2.0 * c * cbar + cbar * cbar) * P + m1 * m1 / ups1
        w = (bsum + dsum * csum) * P
        twoapa = 2.0 * (a + abar)
        alpha = -bsum * bsum
        beta = twoapa * ups2 - 2.0 * bsum * w
        gamma = k0 * ups2 - w * w
        out.append((P, _real_quadratic_roots(alpha, beta, gamma)))
    return out


def closed_loop_lyapunov_residual(P, Pbar, gains: Gains, sys: MeanFieldSystem,
                                  cost: CostSpec) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the closed-loop rewrite of the stationary equations.

    L1 = Qcl + Acl' P + P Acl + Ccl' P Ccl over the fluctuation channel and
    L2 = Qbarcl + Abarcl' (P+Pbar) + (P+Pbar) Abarcl + Cbarcl' P Cbarcl over
    the mean channel; both vanish at a stationary pair with its own gains.
    """
    n = sys.n
    P = symmetrize(_as_matrix(P, n, n, "P"))
    Pbar = symmetrize(_as_matrix(Pbar, n, n, "Pbar"))
    cl = closed_loop(sys, cost, gains)
    S = P + Pbar
    L1 = cl.Q + cl.A.T @ P + P @ cl.A + cl.C.T @ P @ cl.C
    L2 = cl.Qbar + cl.Abar.T @ S + S @ cl.Abar + cl.Cbar.T @ P @ cl.Cbar
    return L1, L2


class VerdictKind(enum.Enum):
    STABILIZABLE_OBSERVABLE = "stabilizable_observable"
    STABILIZABLE_DETECTABLE = "stabilizable_detectable"
    NOT_STABILIZABLE = "not_stabilizable"
    ASSUMPTION_VIOLATED = "assumption_violated"

    @property
    def stabilizable(self) -> bool:
        return self in (VerdictKind.STABILIZABLE_OBSERVABLE,
                        VerdictKind.STABILIZABLE_DETECTABLE)


@dataclass(frozen=True, eq=False)
class StabilizationVerdict:
    kind: VerdictKind
    report: ValidationReport
    observable: bool | None
    detectable: bool | None
    solution: AreSolution | None
    abscissa: float | None
    reason: str

    @property
    def stabilizable(self) -> bool:
        return self.kind.stabilizable


def stabilization_verdict(sys: MeanFieldSystem, cost: CostSpec,
                          tmax: float = 64.0,
                          are_tol: float = DEFAULT_ARE_TOL,
                          max_horizon: float = DEFAULT_MAX_HORIZON) -> StabilizationVerdict:
    """Decide mean-square stabilizability.

    Combines the open-loop observability/detectability tests with the
    stationary solve: a detectable system is stabilizable iff the stationary
    pair exists positive semidefinite, an observable one iff it exists
    positive definite.  The closed-loop moment abscissa is attached as a
    cross-check whenever a solution exists.
    """
    report = validate(sys, cost, "infinite")
    if not report.ok:
        return StabilizationVerdict(VerdictKind.ASSUMPTION_VIOLATED, report,
                                    None, None, None, None,
                                    "standing assumptions violated")
    cl0 = closed_loop(sys, cost, Gains.zero(sys.n, sys.m))
    observable = spectra.exact_observability_test(cl0, tmax=tmax)
    detectable = spectra.exact_detectability_test(cl0, tmax=tmax)
    try:
        solution = solve_coupled_are(sys, cost, tol=are_tol, max_horizon=max_horizon)
    except NonConvergent as exc:
        return StabilizationVerdict(VerdictKind.NOT_STABILIZABLE, report,
                                    observable, detectable, None, None,
                                    f"stationary solve failed: {exc.reason}")
    abscissa = spectra.ms_stability(lift(closed_loop(sys, cost, solution.gains))).abscissa
    if observable and solution.classification is Definiteness.POSITIVE_DEFINITE:
        kind, reason = VerdictKind.STABILIZABLE_OBSERVABLE, \
            "observable with a positive definite stationary pair"
    elif detectable and solution.classification in (Definiteness.POSITIVE_DEFINITE,
                                                    Definiteness.POSITIVE_SEMIDEFINITE):
        kind, reason = VerdictKind.STABILIZABLE_DETECTABLE, \
            "detectable with a positive semidefinite stationary pair"
    else:
        kind, reason = VerdictKind.NOT_STABILIZABLE, \
            "stationary pair exists but has the wrong sign for the observability class"
    return StabilizationVerdict(kind, report, observable, detectable, solution,
                                abscissa, reason)
