"""Dual-ascent training loop over empirical Lagrangians.

Each iteration calls a primal oracle that (approximately) minimizes the
empirical Lagrangian at the current dual variables, then steps the duals
along the empirical constraint slacks: lambda is projected onto the
nonnegative orthant, mu is unconstrained. Slacks here are empirical means
(the raw-sum variant of the update only rescales the dual step size and is
not exposed).

The trajectory records, for step t, the post-oracle model theta(t) paired
with the pre-update duals gamma(t); the averaged Lagrangian of those pairs
is what the dual-value bound in `theorem2_report` controls.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import flatten_grads

__all__ = [
    "DualState",
    "ExactQPOracle",
    "GradientOracle",
    "SolverConfig",
    "TrajectoryRecord",
    "DivergenceError",
    "Adam",
    "empirical_lagrangian",
    "dual_step",
    "run_primal_dual",
    "terminated",
    "theorem2_report",
    "to_double_sided",
    "effective_duals",
]

# reserved leaf names binding the dual variables into the Lagrangian graph
LAM_LEAF = "lam"
MU_LEAF = "mu"


class DivergenceError(RuntimeError):
    """Raised when |Lagrangian| exceeds the divergence guard."""


@dataclass(frozen=True)
class DualState:
    """(lambda, mu) with lambda >= 0 componentwise."""

    lam: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        if lam.ndim != 1 or mu.ndim != 1:
            raise ValueError("dual vectors must be one-dimensional")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
            raise ValueError("dual variables must be finite")
        if lam.size and lam.min() < 0:
            raise ValueError("lambda must be nonnegative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    def concat(self):
        return np.concatenate([self.lam, self.mu])


@dataclass(frozen=True)
class ExactQPOracle:
    """Closed-form Lagrangian minimizer; only QP-style problems provide one."""


@dataclass(frozen=True)
class GradientOracle:
    """k optimizer steps on the empirical Lagrangian, warm-started."""

    k: int = 1
    optimizer: str = "adam"  # adam | sgd
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_decay_every: int = 0  # 0 disables the schedule

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("oracle step count must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class SolverConfig:
    eta: float
    primal_oracle: object = field(default_factory=GradientOracle)
    dual_optimizer: str = "ascent"  # ascent | adam
    dual_lr: float = 1e-3  # adam dual step size
    t_max: int = 1000
    window: int = 0  # 0 disables the moving-average termination rule
    delta: float = 0.0
    slack_tol: float = 0.0  # >0: stop once max constraint violation is below
    seed: int = 0
    divergence_cap: float = 1e12
    init_lam: np.ndarray | None = None
    init_mu: np.ndarray | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("dual step size must be positive")
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")
        if self.window < 0 or self.delta < 0:
            raise ValueError("termination rule needs window >= 1 and delta >= 0")


class Adam:
    """Standard bias-corrected Adam (descent direction)."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x, grad, lr=None):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x - (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)


def empirical_lagrangian(objective, ineq_slacks, eq_slacks):
    """Scalar Lagrangian expression: objective + lam.slacks + mu.slacks.

    Dual variables enter through the reserved leaves `lam` (length I) and
    `mu` (length J) so one graph serves every iteration.
    """
    total = T._lift(objective)
    if total.shape != ():
        raise ValueError("objective must be scalar")
    if ineq_slacks:
        lam = T.inp(LAM_LEAF, (len(ineq_slacks),))
        for i, s in enumerate(ineq_slacks):
            total = total + T.reshape(T.take(lam, [i]), ()) * s
    if eq_slacks:
        mu = T.inp(MU_LEAF, (len(eq_slacks),))
        for j, s in enumerate(eq_slacks):
            total = total + T.reshape(T.take(mu, [j]), ()) * s
    return total


def dual_step(duals, ineq_slacks, eq_slacks, eta):
    """Projected ascent: lam <- max(0, lam + eta*s), mu <- mu + eta*s."""
    s_i = np.asarray(ineq_slacks, dtype=np.float64).reshape(duals.lam.shape)
    s_e = np.asarray(eq_slacks, dtype=np.float64).reshape(duals.mu.shape)
    if (s_i.size and not np.all(np.isfinite(s_i))) or (
        s_e.size and not np.all(np.isfinite(s_e))
    ):
        raise ValueError("NaN slack in dual update")
    return DualState(
        lam=np.maximum(0.0, duals.lam + eta * s_i),
        mu=duals.mu + eta * s_e,
    )


@dataclass
class TrajectoryRecord:
    """Per-step log of a primal-dual run."""

    ineq_labels: list
    eq_labels: list
    steps: list = field(default_factory=list)
    lagrangian: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    slacks: list = field(default_factory=list)  # ineq then eq, per step
    lam: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    avg_lagrangian: list = field(default_factory=list)
    rho_hat: list = field(default_factory=list)  # oracle suboptimality, if known
    dist_sq: list = field(default_factory=list)  # ||gamma - gamma*||^2, if known

    def append(self, step, lag, obj, slacks, duals, rho=None, dist=None):
        self.steps.append(step)
        self.lagrangian.append(lag)
        self.objective.append(obj)
        self.slacks.append(np.asarray(slacks, dtype=np.float64))
        self.lam.append(duals.lam.copy())
        self.mu.append(duals.mu.copy())
        prev = self.avg_lagrangian[-1] if self.avg_lagrangian else 0.0
        n = len(self.lagrangian)
        self.avg_lagrangian.append(prev + (lag - prev) / n)
        if rho is not None:
            self.rho_hat.append(rho)
        if dist is not None:
            self.dist_sq.append(dist)

    def __len__(self):
        return len(self.steps)

    def header(self):
        cols = ["step", "lagrangian", "objective"]
        cols += [f"slack_{l}" for l in self.ineq_labels + self.eq_labels]
        cols += [f"lambda_{l}" for l in self.ineq_labels]
        cols += [f"mu_{l}" for l in self.eq_labels]
        cols.append("avg_lagrangian")
        return cols

    def to_csv(self, path):
        """One row per step, 17 significant digits, atomic write."""
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as f:
            f.write(",".join(self.header()) + "\n")
            for i in range(len(self.steps)):
                row = [f"{self.steps[i]}"]
                row += [f"{v:.17g}" for v in (self.lagrangian[i], self.objective[i])]
                row += [f"{v:.17g}" for v in self.slacks[i]]
                row += [f"{v:.17g}" for v in self.lam[i]]
                row += [f"{v:.17g}" for v in self.mu[i]]
                row.append(f"{self.avg_lagrangian[i]:.17g}")
                f.write(",".join(row) + "\n")
        os.replace(tmp, path)


def terminated(lagrangian_history, window, delta):
    """True iff the window moving average of the Lagrangian changed by less
    than delta over the last `window` steps. Needs 2*window points."""
    if window < 1:
        raise ValueError("window must be >= 1")
    h = np.asarray(lagrangian_history, dtype=np.float64)
    if h.size < 2 * window:
        return False
    recent = h[-window:].mean()
    earlier = h[-2 * window : -window].mean()
    return bool(abs(recent - earlier) < delta)


def _make_primal_stepper(oracle, theta0):
    if oracle.optimizer == "adam":
        opt = Adam(oracle.lr)
    else:
        opt = None
    state = {"steps": 0}

    def lr_now():
        if oracle.lr_decay_every and oracle.lr_decay != 1.0:
            return oracle.lr * oracle.lr_decay ** (state["steps"] // oracle.lr_decay_every)
        return oracle.lr

    def step(theta, grad):
        lr = lr_now()
        state["steps"] += 1
        if opt is not None:
            return opt.step(theta, grad, lr=lr)
        return theta - lr * grad

    return step


def run_primal_dual(problem, config):
    """Dual-ascent loop: oracle step, then projected dual step, per iteration.

    Deterministic given the problem and config. Returns the final model, the
    final duals, and the full trajectory. Raises DivergenceError when the
    Lagrangian magnitude exceeds the configured cap (exit code 3 in the CLI).
    """
    ineq = list(problem.ineq_constraints)
    eq = list(problem.eq_constraints)
    n_i, n_j = len(ineq), len(eq)
    ineq_labels = [l for l, _ in ineq]
    eq_labels = [l for l, _ in eq]

    lam = np.zeros(n_i) if config.init_lam is None else np.asarray(config.init_lam, float)
    mu = np.zeros(n_j) if config.init_mu is None else np.asarray(config.init_mu, float)
    duals = DualState(lam=lam, mu=mu)

    lag_expr = empirical_lagrangian(
        problem.objective, [s for _, s in ineq], [s for _, s in eq]
    )
    graph = T.Graph(lag_expr, T._lift(problem.objective), *[s for _, s in ineq + eq])
    param_names = [n for n, _ in problem.init_model.spec.param_shapes()]

    model = problem.init_model
    theta = np.array(model.theta)
    trajectory = TrajectoryRecord(ineq_labels=ineq_labels, eq_labels=eq_labels)

    oracle = config.primal_oracle
    exact = isinstance(oracle, ExactQPOracle)
    if exact and problem.exact_minimizer is None:
        raise ValueError("exact oracle requested but this problem has no closed form")
    primal_step = None if exact else _make_primal_stepper(oracle, theta)
    dual_adam = Adam(config.dual_lr) if config.dual_optimizer == "adam" else None

    def bindings(th):
        b = dict(problem.init_model.with_theta(th).param_bindings())
        if n_i:
            b[LAM_LEAF] = duals.lam
        if n_j:
            b[MU_LEAF] = duals.mu
        b.update(data)
        return b

    for t in range(config.t_max):
        data = problem.feed(t)
        # primal oracle at gamma(t)
        if exact:
            theta = problem.exact_minimizer(duals.lam, duals.mu)
        else:
            for _ in range(oracle.k):
                _, grads = graph.forward_and_grad(bindings(theta), wrt=param_names)
                theta = primal_step(theta, flatten_grads(model.spec, grads))
        values = graph.forward(bindings(theta))
        lag = float(values[0])
        obj = float(values[1])
        slacks = np.array([float(v) for v in values[2:]])
        if not np.isfinite(lag) or abs(lag) > config.divergence_cap:
            raise DivergenceError(f"Lagrangian diverged at step {t}: {lag}")
        rho = None
        if problem.qhat is not None:
            rho = lag - problem.qhat(duals.lam, duals.mu)
        dist = None
        if problem.dual_reference is not None:
            ref = np.concatenate(
                [np.asarray(v, dtype=np.float64) for v in problem.dual_reference]
            )
            diff = duals.concat() - ref
            dist = float(diff @ diff)
        trajectory.append(t, lag, obj, slacks, duals, rho=rho, dist=dist)

        s_i, s_e = slacks[:n_i], slacks[n_i:]
        if dual_adam is not None:
            stepped = dual_adam.step(duals.concat(), -slacks)
            duals = DualState(
                lam=np.maximum(0.0, stepped[:n_i]), mu=stepped[n_i:]
            )
        else:
            duals = dual_step(duals, s_i, s_e, config.eta)

        if config.slack_tol > 0:
            viol = 0.0
            if n_i:
                viol = max(viol, float(np.max(np.maximum(s_i, 0.0))))
            if n_j:
                viol = max(viol, float(np.max(np.abs(s_e))))
            if viol < config.slack_tol:
                break
        if config.window and terminated(
            trajectory.lagrangian, config.window, config.delta
        ):
            break

    return model.with_theta(theta), duals, trajectory


def theorem2_report(trajectory, d_star, rho, eta, B, U0, tol=1e-9):
    """Prefix-averaged Lagrangian bound check.

    For each prefix length T:
        lhs = |d_star - mean of the first T Lagrangian values|
        rhs = rho + U0 / (2 eta T) + 0.5 (I+J) eta B^2
    Reports per-prefix lhs/rhs/holds and the conjunction.
    """
    if d_star is None:
        raise ValueError("d_star is required (supply the exact dual optimum)")
    lags = np.asarray(trajectory.lagrangian, dtype=np.float64)
    if lags.size == 0:
        raise ValueError("empty trajectory")
    n_duals = len(trajectory.ineq_labels) + len(trajectory.eq_labels)
    prefixes = np.arange(1, lags.size + 1, dtype=np.float64)
    lhs = np.abs(d_star - np.cumsum(lags) / prefixes)
    rhs = rho + U0 / (2.0 * eta * prefixes) + 0.5 * n_duals * eta * B * B
    holds = lhs <= rhs + tol
    return {
        "lhs": lhs,
        "rhs": rhs,
        "holds": holds,
        "all_hold": bool(np.all(holds)),
        "rho": rho,
        "eta": eta,
        "B": B,
        "U0": U0,
    }


def effective_duals(mu_plus, mu_minus):
    """mu = mu_plus - mu_minus, the equality-problem dual recovered from a
    double-sided pair."""
    p = np.asarray(mu_plus, dtype=np.float64)
    m = np.asarray(mu_minus, dtype=np.float64)
    if p.shape != m.shape:
        raise ValueError("dual pair shapes differ")
    if (p.size and p.min() < 0) or (m.size and m.min() < 0):
        raise ValueError("double-sided duals must be nonnegative")
    return p - m


def to_double_sided(problem, eps):
    """Replace each equality h = 0 by the pair h - eps <= 0 and -h - eps <= 0.

    The transformed problem has I + 2J inequalities (the pair block is
    appended as all `+` slacks then all `-` slacks) and no equalities. The
    exact minimizer and dual-function hooks, when present, are adapted
    through mu = mu_plus - mu_minus.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    eq = list(problem.eq_constraints)
    n_i = len(problem.ineq_constraints)
    n_j = len(eq)
    plus = [(f"{label}+", s - eps) for label, s in eq]
    minus = [(f"{label}-", -s - eps) for label, s in eq]

    def split(lam):
        lam_orig = lam[:n_i]
        mu_eff = effective_duals(lam[n_i : n_i + n_j], lam[n_i + n_j :])
        return lam_orig, mu_eff

    exact = None
    if problem.exact_minimizer is not None:
        orig_min = problem.exact_minimizer

        def exact(lam, mu):
            lam_orig, mu_eff = split(lam)
            return orig_min(lam_orig, mu_eff)

    qhat = None
    if problem.qhat is not None:
        orig_qhat = problem.qhat

        def qhat(lam, mu):
            lam_orig, mu_eff = split(lam)
            penalty = eps * float(np.sum(lam[n_i:]))
            return orig_qhat(lam_orig, mu_eff) - penalty

    return dataclasses.replace(
        problem,
        name=f"{problem.name}_double_sided",
        ineq_constraints=tuple(problem.ineq_constraints) + tuple(plus + minus),
        eq_constraints=(),
        exact_minimizer=exact,
        qhat=qhat,
        dual_reference=None,
    )
