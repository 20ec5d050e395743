"""Domain types and lifted-system construction for linear mean-field LQ control.

The plant is the linear SDE driven by scalar Brownian motion

    dx = (A x + Abar E[x] + B u + Bbar E[u]) dt
       + (C x + Cbar E[x] + D u + Dbar E[u]) dW,

with quadratic running weights (Q, Qbar, R, Rbar) on (x, E[x], u, E[u]) and
terminal weights (Pterm, Pbarterm).  Mean-square behaviour is analysed through
the lifted 2n-dimensional state X = [x - E[x]; E[x]], whose closed-loop drift
is block diagonal and whose diffusion only feeds the fluctuation block.

Everything is dense float64; problem sizes are desk scale (n, m <= ~32).
All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np

# Numerical policy shared across the package.
PSD_TOL = 1e-10           # eigenvalue slack in positive-semidefiniteness tests
PINV_RCOND = 1e-10        # relative eigenvalue cutoff in symmetric pseudoinverses
SYMMETRY_WARN_TOL = 1e-9  # asymmetry beyond this warns at construction
BLOWUP_LIMIT = 1e12       # entry magnitude that declares an integration divergent


class Diverged(RuntimeError):
    """A matrix ODE integration blew past ``BLOWUP_LIMIT``."""

    def __init__(self, time: float, what: str = "integration"):
        super().__init__(f"{what} diverged at t={time:.6g} (entry magnitude > {BLOWUP_LIMIT:g})")
        self.time = float(time)


class Irregular(RuntimeError):
    """The pseudoinverse consistency condition failed where it was required."""

    def __init__(self, time: float | None = None):
        where = "" if time is None else f" at t={time:.6g}"
        super().__init__(f"regular condition violated{where}: Ups pinv(Ups) M != M")
        self.time = time


class NonConvergent(RuntimeError):
    """Horizon doubling did not reach a stationary solution."""

    def __init__(self, horizon: float, reason: str):
        super().__init__(f"no stationary solution up to horizon {horizon:g}: {reason}")
        self.horizon = float(horizon)
        self.reason = reason


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def min_eigenvalue(mat: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetrized matrix."""
    return float(np.linalg.eigvalsh(symmetrize(np.asarray(mat, dtype=float))).min())


def is_psd(mat: np.ndarray, tol: float = PSD_TOL) -> bool:
    return min_eigenvalue(mat) >= -tol


def sym_pinv(mat: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix.

    Eigendecomposition based: eigenvalues with magnitude above
    ``rcond * max(1, |lambda|_max)`` are inverted, the rest are zeroed.
    Coincides with the ordinary inverse when the matrix is definite.
    """
    mat = symmetrize(np.asarray(mat, dtype=float))
    if mat.shape == (1, 1):
        x = mat[0, 0]
        if abs(x) > rcond * max(1.0, abs(x)):
            return np.array([[1.0 / x]])
        return np.zeros((1, 1))
    w, v = np.linalg.eigh(mat)
    cutoff = rcond * max(1.0, float(np.abs(w).max(initial=0.0)))
    winv = np.where(np.abs(w) > cutoff, 1.0 / np.where(w == 0.0, 1.0, w), 0.0)
    return (v * winv) @ v.T


def _as_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.shape != (rows, cols):
        raise ValueError(f"{name}: expected {rows}x{cols}, got {'x'.join(map(str, arr.shape))}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


def _as_vector(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{name}: expected length-{n} vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def _symmetrized_input(value, n: int, name: str) -> np.ndarray:
    mat = _as_matrix(value, n, n, name)
    skew = float(np.abs(mat - mat.T).max(initial=0.0))
    if skew > SYMMETRY_WARN_TOL * (1.0 + float(np.abs(mat).max(initial=0.0))):
        warnings.warn(f"{name}: asymmetry {skew:.3g} symmetrized away", stacklevel=3)
    return symmetrize(mat)


@dataclass(frozen=True, eq=False)
class MeanFieldSystem:
    """Coefficient matrices of the mean-field SDE.

    A, Abar, C, Cbar are n x n; B, Bbar, D, Dbar are n x m.  Scalars are
    accepted wherever a 1x1 block is expected.
    """

    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"A: expected a square matrix, got shape {a.shape}")
        n = a.shape[0]
        b = np.asarray(self.B, dtype=float)
        if b.ndim == 0:
            b = b.reshape(1, 1)
        elif b.ndim == 1:
            b = b.reshape(-1, 1)
        if b.shape[0] != n:
            raise ValueError(f"B: expected {n} rows, got {b.shape[0]}")
        m = b.shape[1]
        object.__setattr__(self, "A", _frozen(_as_matrix(a, n, n, "A")))
        object.__setattr__(self, "B", _frozen(_as_matrix(b, n, m, "B")))
        for name, rows, cols in (("Abar", n, n), ("C", n, n), ("Cbar", n, n),
                                 ("Bbar", n, m), ("D", n, m), ("Dbar", n, m)):
            object.__setattr__(self, name, _frozen(_as_matrix(getattr(self, name), rows, cols, name)))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic weights; symmetric blocks are symmetrized on construction.

    Pterm / Pbarterm default to zero, the infinite-horizon convention.
    """

    Q: np.ndarray
    Qbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray
    Pterm: np.ndarray | None = None
    Pbarterm: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.Q, dtype=float)
        n = 1 if q.ndim == 0 else q.shape[0]
        r = np.asarray(self.R, dtype=float)
        m = 1 if r.ndim == 0 else r.shape[0]
        object.__setattr__(self, "Q", _frozen(_symmetrized_input(self.Q, n, "Q")))
        object.__setattr__(self, "Qbar", _frozen(_symmetrized_input(self.Qbar, n, "Qbar")))
        object.__setattr__(self, "R", _frozen(_symmetrized_input(self.R, m, "R")))
        object.__setattr__(self, "Rbar", _frozen(_symmetrized_input(self.Rbar, m, "Rbar")))
        pterm = np.zeros((n, n)) if self.Pterm is None else self.Pterm
        pbarterm = np.zeros((n, n)) if self.Pbarterm is None else self.Pbarterm
        object.__setattr__(self, "Pterm", _frozen(_symmetrized_input(pterm, n, "Pterm")))
        object.__setattr__(self, "Pbarterm", _frozen(_symmetrized_input(pbarterm, n, "Pbarterm")))

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True, eq=False)
class Gains:
    """State feedback K and mean feedback Kbar of u = K x + Kbar E[x]."""

    K: np.ndarray
    Kbar: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.K, dtype=float)
        if k.ndim == 0:
            k = k.reshape(1, 1)
        elif k.ndim == 1:
            k = k.reshape(1, -1)
        m, n = k.shape
        object.__setattr__(self, "K", _frozen(_as_matrix(k, m, n, "K")))
        object.__setattr__(self, "Kbar", _frozen(_as_matrix(self.Kbar, m, n, "Kbar")))

    @classmethod
    def zero(cls, n: int, m: int) -> "Gains":
        return cls(np.zeros((m, n)), np.zeros((m, n)))

    @property
    def total(self) -> np.ndarray:
        """K + Kbar, the gain acting on the mean channel."""
        return self.K + self.Kbar


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """Closed-loop coefficients of the fluctuation and mean channels.

    A, C drive x - E[x]; Abar, Cbar drive E[x] (Cbar feeds the fluctuation
    diffusion only).  Q and Qbar are the matching effective output weights.
    """

    A: np.ndarray
    C: np.ndarray
    Abar: np.ndarray
    Cbar: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    """2n-dimensional dynamics of X = [x - E[x]; E[x]].

    A is block diagonal, C has only the upper block row, Q is the block
    diagonal output weight.
    """

    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray

    @property
    def dim(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    min_eigenvalue: float


@dataclass(frozen=True)
class ValidationReport:
    mode: str
    checks: tuple[AssumptionCheck, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> tuple[AssumptionCheck, ...]:
        return tuple(c for c in self.checks if not c.passed)

    def __str__(self) -> str:
        lines = [f"validation ({self.mode} horizon):"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"  [{status}] {c.name} (min eig {c.min_eigenvalue:.3g})")
        return "\n".join(lines)


def _check_dimensions(sys: MeanFieldSystem, cost: CostSpec) -> None:
    if cost.Q.shape != (sys.n, sys.n):
        raise ValueError(f"Q: expected {sys.n}x{sys.n}, got {cost.Q.shape[0]}x{cost.Q.shape[1]}")
    if cost.R.shape != (sys.m, sys.m):
        raise ValueError(f"R: expected {sys.m}x{sys.m}, got {cost.R.shape[0]}x{cost.R.shape[1]}")
    if cost.Pterm.shape != (sys.n, sys.n):
        raise ValueError(f"Pterm: expected {sys.n}x{sys.n}, got {cost.Pterm.shape[0]}x{cost.Pterm.shape[1]}")


def validate(sys: MeanFieldSystem, cost: CostSpec,
             mode: Literal["finite", "infinite"] = "infinite") -> ValidationReport:
    """Check the standing positive-semidefiniteness assumptions.

    Dimension mismatches raise; assumption failures are reported, not raised.
    PSD means smallest eigenvalue >= -1e-10.
    """
    _check_dimensions(sys, cost)
    entries = [
        ("Q >= 0", cost.Q),
        ("Q + Qbar >= 0", cost.Q + cost.Qbar),
        ("R >= 0", cost.R),
        ("R + Rbar >= 0", cost.R + cost.Rbar),
    ]
    if mode == "finite":
        entries += [
            ("Pterm >= 0", cost.Pterm),
            ("Pterm + Pbarterm >= 0", cost.Pterm + cost.Pbarterm),
        ]
    elif mode != "infinite":
        raise ValueError(f"mode: expected 'finite' or 'infinite', got {mode!r}")
    checks = []
    for name, mat in entries:
        lam = min_eigenvalue(mat)
        checks.append(AssumptionCheck(name, lam >= -PSD_TOL, lam))
    return ValidationReport(mode, tuple(checks))


def closed_loop(sys: MeanFieldSystem, cost: CostSpec, g: Gains) -> ClosedLoop:
    """Apply u = K x + Kbar E[x] and collect the channelwise coefficients."""
    _check_dimensions(sys, cost)
    if g.K.shape != (sys.m, sys.n):
        raise ValueError(f"K: expected {sys.m}x{sys.n}, got {g.K.shape[0]}x{g.K.shape[1]}")
    kk = g.total
    return ClosedLoop(
        A=sys.A + sys.B @ g.K,
        C=sys.C + sys.D @ g.K,
        Abar=(sys.A + sys.Abar) + (sys.B + sys.Bbar) @ kk,
        Cbar=(sys.C + sys.Cbar) + (sys.D + sys.Dbar) @ kk,
        Q=symmetrize(cost.Q + g.K.T @ cost.R @ g.K),
        Qbar=symmetrize(cost.Q + cost.Qbar + kk.T @ (cost.R + cost.Rbar) @ kk),
    )


def lift(cl: ClosedLoop) -> LiftedSystem:
    """Assemble the 2n-dimensional dynamics of [x - E[x]; E[x]]."""
    n = cl.n
    z = np.zeros((n, n))
    return LiftedSystem(
        A=np.block([[cl.A, z], [z, cl.Abar]]),
        C=np.block([[cl.C, cl.Cbar], [z, z]]),
        Q=np.block([[cl.Q, z], [z, cl.Qbar]]),
    )


def open_loop_lift(sys: MeanFieldSystem, cost: CostSpec) -> LiftedSystem:
    """Lift of the uncontrolled system, weighted by diag(Q, Q + Qbar)."""
    return lift(closed_loop(sys, cost, Gains.zero(sys.n, sys.m)))


def moment_generator(ls: LiftedSystem) -> np.ndarray:
    """Linear operator of the second-moment flow of the lifted system.

    Returns G with G @ vec(X) = vec(A X + X A' + C X C') for the row-major
    vec; the orientation is pinned by that identity, which the tests check
    directly on random symmetric X.
    """
    eye = np.eye(ls.dim)
    return np.kron(ls.A, eye) + np.kron(eye, ls.A) + np.kron(ls.C, ls.C)
