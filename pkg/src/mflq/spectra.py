"""Mean-square stability, exact observability and exact detectability tests.

Stability of the lifted system d X = A X dt + C X dW is read off the linear
flow of its second moment, M(t) = E[X X']:

    dM/dt = A M + M A' + C M C'.

The operator is restricted to the symmetric-matrix subspace (which the flow
preserves); its spectral abscissa decides mean-square stability.

Observability is tested through finite-horizon output-energy Gramians: with
closed-loop channel coefficients (A, C, Abar, Cbar) and weights (Q, Qbar),

    -dH/dt = Q + A' H + H A + C' H C,            H(T) = 0,
    -dG/dt = Qbar + Abar' G + G Abar + Cbar' H Cbar,  G(T) = 0,

where G plays the role of H + Hbar: the output energy accumulated over [0, T]
from initial fluctuation z0 and initial mean mu0 is

    E[z0' H(0) z0] + mu0' G(0) mu0.

Exact observability asks both Gramians to become positive definite at some
horizon; exact detectability restricts the moment flow to the invariant
subspace generated by the Gramian null space and asks it to be stable there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import (
    BLOWUP_LIMIT,
    ClosedLoop,
    Diverged,
    LiftedSystem,
    lift,
    symmetrize,
)

STABILITY_TOL = 1e-9      # abscissa below -STABILITY_TOL counts as stable
RANK_CUTOFF = 1e-8        # relative singular-value cutoff for null spaces
GRAMIAN_POS_TOL = 1e-8    # min-eig threshold declaring a Gramian positive
GRAMIAN_STEPS_PER_UNIT = 200


def symmetric_basis(d: int) -> list[np.ndarray]:
    """Orthonormal (Frobenius) basis of d x d symmetric matrices."""
    basis = []
    for i in range(d):
        e = np.zeros((d, d))
        e[i, i] = 1.0
        basis.append(e)
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for i in range(d):
        for j in range(i + 1, d):
            e = np.zeros((d, d))
            e[i, j] = e[j, i] = inv_sqrt2
            basis.append(e)
    return basis


def moment_operator_symmetric(ls: LiftedSystem) -> np.ndarray:
    """Matrix of M -> A M + M A' + C M C' on the symmetric subspace."""
    basis = symmetric_basis(ls.dim)
    s = len(basis)
    op = np.empty((s, s))
    images = [ls.A @ bk + bk @ ls.A.T + ls.C @ bk @ ls.C.T for bk in basis]
    for k, img in enumerate(images):
        img = symmetrize(img)
        for j, bj in enumerate(basis):
            op[j, k] = float(np.sum(img * bj))
    return op


def _sym_coordinates(mat: np.ndarray, d: int) -> np.ndarray:
    """Coordinates of a symmetric matrix in the symmetric_basis ordering."""
    coords = [mat[i, i] for i in range(d)]
    sqrt2 = math.sqrt(2.0)
    for i in range(d):
        for j in range(i + 1, d):
            coords.append(sqrt2 * mat[i, j])
    return np.array(coords)


class StabilityResult(NamedTuple):
    stable: bool
    abscissa: float


def ms_stability(ls: LiftedSystem) -> StabilityResult:
    """Mean-square stability and spectral abscissa of the moment flow."""
    eigs = np.linalg.eigvals(moment_operator_symmetric(ls))
    abscissa = float(eigs.real.max())
    return StabilityResult(abscissa < -STABILITY_TOL, abscissa)


@dataclass(frozen=True, eq=False)
class GramianPair:
    """Finite-horizon output-energy Gramians (H0, H0 + Hbar0)."""

    H0: np.ndarray
    Hsum0: np.ndarray
    horizon: float


def _gramian_steps(T: float, steps: int | None) -> int:
    return max(1000, math.ceil(GRAMIAN_STEPS_PER_UNIT * T)) if steps is None else int(steps)


def observability_gramian(cl: ClosedLoop, T: float, steps: int | None = None) -> GramianPair:
    """Backward RK4 of the Gramian pair over [0, T] with zero terminal values."""
    if not T > 0:
        raise ValueError(f"T: expected > 0, got {T!r}")
    N = _gramian_steps(T, steps)
    h = T / N
    if cl.n == 1:
        a = float(cl.A[0, 0]); abar = float(cl.Abar[0, 0])
        c = float(cl.C[0, 0]); cbar = float(cl.Cbar[0, 0])
        q = float(cl.Q[0, 0]); qbar = float(cl.Qbar[0, 0])
        H = 0.0
        G = 0.0

        def rhs(H, G):
            return (q + 2.0 * a * H + c * c * H,
                    qbar + 2.0 * abar * G + cbar * cbar * H)

        for k in range(N, 0, -1):
            d1 = rhs(H, G)
            d2 = rhs(H + 0.5 * h * d1[0], G + 0.5 * h * d1[1])
            d3 = rhs(H + 0.5 * h * d2[0], G + 0.5 * h * d2[1])
            d4 = rhs(H + h * d3[0], G + h * d3[1])
            H = H + (h / 6.0) * (d1[0] + 2.0 * d2[0] + 2.0 * d3[0] + d4[0])
            G = G + (h / 6.0) * (d1[1] + 2.0 * d2[1] + 2.0 * d3[1] + d4[1])
            top = max(abs(H), abs(G))
            if not math.isfinite(top) or top > BLOWUP_LIMIT:
                raise Diverged((k - 1) * h, "Gramian integration")
        return GramianPair(np.array([[H]]), np.array([[G]]), float(T))

    At, Ct = cl.A.T, cl.C.T
    Abart, Cbart = cl.Abar.T, cl.Cbar.T
    H = np.zeros((cl.n, cl.n))
    G = np.zeros((cl.n, cl.n))

    def rhs(H, G):
        HA = H @ cl.A
        GA = G @ cl.Abar
        return (cl.Q + HA + HA.T + Ct @ H @ cl.C,
                cl.Qbar + GA + GA.T + Cbart @ H @ cl.Cbar)

    for k in range(N, 0, -1):
        d1 = rhs(H, G)
        d2 = rhs(symmetrize(H + 0.5 * h * d1[0]), symmetrize(G + 0.5 * h * d1[1]))
        d3 = rhs(symmetrize(H + 0.5 * h * d2[0]), symmetrize(G + 0.5 * h * d2[1]))
        d4 = rhs(symmetrize(H + h * d3[0]), symmetrize(G + h * d3[1]))
        H = symmetrize(H + (h / 6.0) * (d1[0] + 2.0 * d2[0] + 2.0 * d3[0] + d4[0]))
        G = symmetrize(G + (h / 6.0) * (d1[1] + 2.0 * d2[1] + 2.0 * d3[1] + d4[1]))
        top = max(np.abs(H).max(initial=0.0), np.abs(G).max(initial=0.0))
        if not np.isfinite(top) or top > BLOWUP_LIMIT:
            raise Diverged((k - 1) * h, "Gramian integration")
    return GramianPair(H, G, float(T))


def exact_observability_test(cl: ClosedLoop, tmax: float = 64.0,
                             tol: float = GRAMIAN_POS_TOL) -> bool:
    """True iff both Gramians turn positive definite somewhere on {1, 2, 4, ...}.

    Output energy grows with the horizon, so the doubling schedule can stop
    at the first positive pair.  A Gramian blow-up with the minimum
    eigenvalue still below tol means some direction stays output-silent
    while others explode: not observable.
    """
    T = 1.0
    while T <= tmax:
        try:
            pair = observability_gramian(cl, T)
        except Diverged:
            return False
        if (np.linalg.eigvalsh(symmetrize(pair.H0)).min() > tol
                and np.linalg.eigvalsh(symmetrize(pair.Hsum0)).min() > tol):
            return True
        T *= 2.0
    return False


def _largest_survivable_gramian(cl: ClosedLoop, tmax: float) -> GramianPair:
    T = tmax
    while T > 1.0:
        try:
            return observability_gramian(cl, T)
        except Diverged:
            T /= 2.0
    return observability_gramian(cl, T)


def _orth(cols: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    if cols.size == 0:
        return cols.reshape(cols.shape[0], 0)
    u, s, _ = np.linalg.svd(cols, full_matrices=False)
    keep = s > rtol * max(1.0, s.max(initial=0.0))
    return u[:, keep]


def exact_detectability_test(cl: ClosedLoop, tmax: float = 64.0,
                             tol: float = RANK_CUTOFF) -> bool:
    """True iff every output-silent direction is mean-square stable.

    The unobservable subspace is the null space of diag(H0, Hsum0) at the
    largest survivable horizon (eigenvalues below tol * max eigenvalue).
    The moment flow restricted to the invariant subspace generated by
    {v v' : v in null space} must then have spectral abscissa < -1e-9;
    vacuously true when the null space is trivial.
    """
    pair = _largest_survivable_gramian(cl, tmax)
    n = cl.n
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = symmetrize(pair.H0)
    big[n:, n:] = symmetrize(pair.Hsum0)
    w, v = np.linalg.eigh(big)
    wmax = float(np.abs(w).max(initial=0.0))
    null = v[:, np.abs(w) <= tol * wmax] if wmax > 0.0 else np.eye(2 * n)
    if null.shape[1] == 0:
        return True

    gen = moment_operator_symmetric(lift(cl))
    d = 2 * n
    seeds = []
    for i in range(null.shape[1]):
        for j in range(i, null.shape[1]):
            vv = np.outer(null[:, i], null[:, j])
            seeds.append(_sym_coordinates(symmetrize(vv + vv.T), d))
    basis = _orth(np.column_stack(seeds))
    for _ in range(gen.shape[0]):
        grown = _orth(np.column_stack([basis, gen @ basis]))
        if grown.shape[1] == basis.shape[1]:
            break
        basis = grown
    restricted = basis.T @ gen @ basis
    abscissa = float(np.linalg.eigvals(restricted).real.max())
    return abscissa < -STABILITY_TOL
