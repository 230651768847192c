"""Exact solvers for the minimum-norm interpolation family.

    min (1/2)||w||^2  s.t.  Xw = y                      (equality)
    min (1/2)||w||^2  s.t.  (1/2)||Xw - y||^2 <= eps    (aggregated inequality)
    min (1/2)||w||^2  s.t.  -eps <= Xw - y <= eps       (componentwise box)

X is square with XX^T full rank. These are the ground-truth oracles for the
solver convergence tests: the equality dual is mu* = -(XX^T)^{-1} y with
w* = -X^T mu*, the inequality dual lambda*(eps) comes from a monotone
bisection, and the box problem is solved by brute-force active-set
enumeration. All linear systems go through QR with column pivoting; no
inverse is ever formed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "QpInstance",
    "QpSolution",
    "solve_eq_qp",
    "solve_ineq_qp",
    "solve_box_qp",
    "perturbation_check",
    "kkt_residual",
]

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class QpInstance:
    """Validated (X, y, eps) triple."""

    X: np.ndarray
    y: np.ndarray
    eps: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise ValueError(f"X must be square, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have length {X.shape[0]}, got {y.shape}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        smin = np.linalg.svd(X @ X.T, compute_uv=False)[-1]
        if smin <= _RANK_TOL:
            raise ValueError(f"XX^T is rank deficient (min singular value {smin:.3e})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class QpSolution:
    """Primal/dual pair with objective (1/2)||w||^2 and residual ||Xw - y||."""

    w: np.ndarray
    duals: object  # mu (eq), lambda (ineq scalar), or (mu_plus, mu_minus) (box)
    objective: float
    residual: float

    @property
    def dual_l1(self):
        if isinstance(self.duals, tuple):
            return float(sum(np.sum(np.abs(d)) for d in self.duals))
        return float(np.sum(np.abs(self.duals)))


def _qr_solve(A, b):
    """Backward-stable solve of Ax = b via QR with column pivoting."""
    q, r, piv = scipy.linalg.qr(A, pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.min() <= _RANK_TOL * max(1.0, diag.max()):
        raise np.linalg.LinAlgError("matrix is numerically rank deficient")
    x = np.empty_like(b, dtype=np.float64)
    x[piv] = scipy.linalg.solve_triangular(r, q.T @ b)
    return x


def solve_eq_qp(X, y):
    """Closed-form minimum-norm solution of Xw = y with its equality dual."""
    inst = QpInstance(X, y)
    mu = -_qr_solve(inst.X @ inst.X.T, inst.y)
    w = -inst.X.T @ mu
    residual = float(np.linalg.norm(inst.X @ w - inst.y))
    if residual > 1e-8 * max(1.0, np.linalg.norm(inst.y)):
        raise np.linalg.LinAlgError(f"equality solve left residual {residual:.3e}")
    return QpSolution(w=w, duals=mu, objective=0.5 * float(w @ w), residual=residual)


def _ineq_constraint_value(c, sigma, q2):
    # (1/2)||Xw(c) - y||^2 via the eigenvalues of X^T X; strictly increasing in c
    frac = c / (c + sigma)
    return 0.5 * float(np.sum(frac * frac * sigma * q2))


def solve_ineq_qp(X, y, eps):
    """Aggregated-inequality solution; lambda* = 1/c from bisection on c.

    If the origin is already feasible ((1/2)||y||^2 <= eps) the constraint is
    inactive and w* = 0 with lambda* = 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive for the inequality problem")
    inst = QpInstance(X, y, eps)
    if 0.5 * float(inst.y @ inst.y) <= eps:
        return QpSolution(
            w=np.zeros(inst.n),
            duals=0.0,
            objective=0.0,
            residual=float(np.linalg.norm(inst.y)),
        )
    sigma, v = np.linalg.eigh(inst.X.T @ inst.X)
    w0 = _qr_solve(inst.X, inst.y)
    q2 = (v.T @ w0) ** 2

    tol = 1e-12 * max(1.0, eps)
    c_lo = 1e-12
    while _ineq_constraint_value(c_lo, sigma, q2) > eps:
        c_lo *= 0.5
        if c_lo < 1e-300:
            raise RuntimeError("bisection bracket failure: constraint > eps at c -> 0")
    c_hi = 1.0
    while _ineq_constraint_value(c_hi, sigma, q2) <= eps:
        c_hi *= 2.0
        if c_hi > 1e300:
            raise RuntimeError("bisection bracket failure: constraint <= eps at c -> inf")
    # 2^-50 relative width is ~4 ulp; a hard iteration cap guards against
    # adjacent-float stalls
    for _ in range(200):
        if c_hi - c_lo <= 2.0**-50 * c_hi:
            break
        mid = 0.5 * (c_lo + c_hi)
        if _ineq_constraint_value(mid, sigma, q2) <= eps:
            c_lo = mid
        else:
            c_hi = mid
    c = 0.5 * (c_lo + c_hi)
    val = _ineq_constraint_value(c, sigma, q2)
    if abs(val - eps) > max(tol, 1e-9 * eps):
        raise RuntimeError(
            f"bisection did not meet tolerance: |constraint - eps| = {abs(val - eps):.3e} "
            f"at c in [{c_lo:.17g}, {c_hi:.17g}]"
        )
    w = _qr_solve(c * np.eye(inst.n) + inst.X.T @ inst.X, inst.X.T @ inst.y)
    return QpSolution(
        w=w,
        duals=1.0 / c,
        objective=0.5 * float(w @ w),
        residual=float(np.linalg.norm(inst.X @ w - inst.y)),
    )


def solve_box_qp(X, y, eps):
    """Exact box-constrained optimum by enumerating active sign patterns.

    A brute-force oracle: every one of the 3^n lower/inactive/upper patterns
    is tried, KKT candidates are kept, and the least-norm feasible candidate
    is returned. Capped at n <= 12.
    """
    inst = QpInstance(X, y, eps)
    n = inst.n
    if n > 12:
        raise ValueError("active-set enumeration is capped at n <= 12")
    X_, y_ = inst.X, inst.y
    tol = 1e-9 * max(1.0, float(np.max(np.abs(y_))), eps)

    best = None
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        s = np.array(pattern, dtype=np.float64)
        active = np.flatnonzero(s != 0)
        nu = np.zeros(n)
        if active.size:
            Xa = X_[active]
            try:
                nu_a = _qr_solve(Xa @ Xa.T, -(y_[active] + eps * s[active]))
            except np.linalg.LinAlgError:
                continue
            nu[active] = nu_a
            # dual feasibility: upper-active rows need nu >= 0, lower-active <= 0
            if np.any(s[active] * nu_a < -tol):
                continue
        w = -X_.T @ nu
        r = X_ @ w - y_
        if np.any(np.abs(r) > eps + tol):
            continue
        obj = 0.5 * float(w @ w)
        if best is None or obj < best[0]:
            best = (obj, w, nu, r)
    if best is None:
        raise RuntimeError("no KKT-consistent active set found (numerical failure)")
    obj, w, nu, r = best
    mu_plus = np.maximum(nu, 0.0)
    mu_minus = np.maximum(-nu, 0.0)
    return QpSolution(
        w=w,
        duals=(mu_plus, mu_minus),
        objective=obj,
        residual=float(np.linalg.norm(r)),
    )


def perturbation_check(X, y, eps, tol=1e-9):
    """Sandwich of the dual-value drop under box relaxation:

        eps * ||duals_eps||_1  <=  D*_0 - D*_eps  <=  eps * ||duals_0||_1

    Both sides come from exact solves (strong duality makes D* = P* here).
    """
    eq = solve_eq_qp(X, y)
    box = solve_box_qp(X, y, eps)
    gap = eq.objective - box.objective
    lower = eps * box.dual_l1
    upper = eps * eq.dual_l1
    return {
        "gap": gap,
        "lower": lower,
        "upper": upper,
        "holds": bool(lower <= gap + tol and gap <= upper + tol),
        "objective_eq": eq.objective,
        "objective_box": box.objective,
        "dual_l1_eq": eq.dual_l1,
        "dual_l1_box": box.dual_l1,
    }


def kkt_residual(X, y, eps, solution, kind):
    """Max KKT violation (stationarity, feasibility, sign, complementarity)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = solution.w
    r = X @ w - y
    if kind == "eq":
        mu = solution.duals
        return max(
            float(np.max(np.abs(w + X.T @ mu))),
            float(np.max(np.abs(r))),
        )
    if kind == "ineq":
        lam = float(solution.duals)
        g = 0.5 * float(r @ r) - eps
        return max(
            float(np.max(np.abs(w + lam * (X.T @ r)))),
            max(0.0, g),
            max(0.0, -lam),
            abs(lam * g),
        )
    if kind == "box":
        mu_plus, mu_minus = solution.duals
        nu = mu_plus - mu_minus
        return max(
            float(np.max(np.abs(w + X.T @ nu))),
            max(0.0, float(np.max(np.abs(r))) - eps),
            max(0.0, -float(np.min(mu_plus)), -float(np.min(mu_minus))),
            float(np.max(np.abs(mu_plus * (r - eps)))),
            float(np.max(np.abs(mu_minus * (-r - eps)))),
        )
    raise ValueError(f"unknown KKT kind {kind!r}")
