"""Expectation constraints over data streams and their slack expressions.

A constraint pairs a per-sample loss with the stream it is averaged over;
its slack is the empirical mean of that loss at the current model. Equality
slacks may take any sign, inequality slacks are compared against zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import forward_expr

__all__ = [
    "ConstraintKind",
    "ExpectationConstraint",
    "Slack",
    "eval_slack",
    "smooth_rate",
    "smooth_rate_expr",
    "make_dp_constraint",
    "make_prescribed_rate_constraint",
    "make_classwise_constraint",
    "make_pde_constraints",
    "cross_entropy_loss",
    "binary_cross_entropy",
    "DEFAULT_TEMPERATURE",
]

# sigmoid temperature for the smoothed indicator I{f(x) > 0.5}
DEFAULT_TEMPERATURE = 8.0


class ConstraintKind(enum.Enum):
    EQUALITY = "equality"
    INEQUALITY = "inequality"


@dataclass(frozen=True)
class ExpectationConstraint:
    """A loss-over-distribution term with its stream binding.

    `build` maps (model spec, batch dict of input exprs/arrays) to the scalar
    slack expression; `stream` names the sample stream feeding it.
    """

    kind: ConstraintKind
    label: str
    stream: str
    build: callable

    def slack_expr(self, spec, batch):
        expr = self.build(spec, batch)
        if expr.shape != ():
            raise ValueError(f"constraint {self.label!r} slack is not scalar")
        return expr


@dataclass(frozen=True)
class Slack:
    """Empirical mean of a constraint loss, with its differentiable expression."""

    value: float
    expr: object

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("slack is not finite")


# batch fields read as concrete index metadata by the builders, never lifted
# into the graph
META_FIELDS = ("y", "group")


def eval_slack(constraint, model, batch):
    """Empirical slack of `constraint` at `model` over a concrete batch.

    Data fields become input leaves named by their key (so the returned
    expression can be re-evaluated or differentiated); metadata fields
    (labels, group ids) stay concrete. The batch must be nonempty.
    """
    batch_exprs = {}
    bindings = dict(model.param_bindings())
    for key, val in batch.items():
        arr = np.asarray(val)
        if arr.size == 0:
            raise ValueError("empty batch")
        if key in META_FIELDS:
            batch_exprs[key] = arr
        else:
            arr = arr.astype(np.float64)
            batch_exprs[key] = T.inp(key, arr.shape)
            bindings[key] = arr
    expr = constraint.slack_expr(model.spec, batch_exprs)
    value = float(T.evaluate(expr, bindings))
    return Slack(value=value, expr=expr)


# ---------------------------------------------------------------------------
# fairness: smoothed positive rates
# ---------------------------------------------------------------------------

def smooth_rate_expr(fx, member_idx, alpha):
    """Mean of sigmoid(alpha * (f(x) - 0.5)) over the selected samples."""
    scores = T.sigmoid(alpha * (fx - 0.5))
    if member_idx is None:
        return T.mean(scores)
    return T.mean(T.take(scores, member_idx))


def smooth_rate(model, batch_x, group_mask, alpha=DEFAULT_TEMPERATURE):
    """Numeric smoothed positive rate of `model` on the masked group."""
    x = np.asarray(batch_x, dtype=np.float64)
    mask = np.asarray(group_mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ValueError("group mask length must match batch")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("empty group in batch")
    fx = forward_expr(model.spec, T.const(x))
    expr = smooth_rate_expr(fx, idx, alpha)
    return float(T.evaluate(expr, model.param_bindings()))


def _group_indices(batch, group):
    gids = batch["group"]
    if isinstance(gids, T.Expr):
        raise ValueError("group ids must be concrete arrays, not expressions")
    idx = np.flatnonzero(np.asarray(gids) == group)
    if idx.size == 0:
        raise ValueError(f"group {group!r} is empty in this batch")
    return idx


def make_dp_constraint(group, alpha=DEFAULT_TEMPERATURE, label=None):
    """Demographic-parity equality: smooth group rate == smooth overall rate."""

    def build(spec, batch):
        fx = forward_expr(spec, batch["x"])
        idx = _group_indices(batch, group)
        return smooth_rate_expr(fx, idx, alpha) - smooth_rate_expr(fx, None, alpha)

    return ExpectationConstraint(
        kind=ConstraintKind.EQUALITY,
        label=label or f"dp_{group}",
        stream="population",
        build=build,
    )


def make_prescribed_rate_constraint(group, rate, alpha=DEFAULT_TEMPERATURE, label=None):
    """Prescribed-rate equality: smooth group rate == rate, target absorbed."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"target rate must lie in (0, 1), got {rate}")

    def build(spec, batch):
        fx = forward_expr(spec, batch["x"])
        idx = _group_indices(batch, group)
        return smooth_rate_expr(fx, idx, alpha) - rate

    return ExpectationConstraint(
        kind=ConstraintKind.EQUALITY,
        label=label or f"rate_{group}",
        stream="population",
        build=build,
    )


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits, labels):
    """Per-sample multiclass cross entropy, shifted by the true-class logit.

    log(sum_j exp(z_j - z_y)) stays well-scaled as the fit improves because
    every exponent tends to -inf except the true class (which is exactly 0).
    """
    labels = np.asarray(labels, dtype=np.intp)
    n, _ = logits.shape
    true_logit = _take_rows(logits, labels)
    shifted = logits - T.reshape(true_logit, (n, 1))
    return T.log(T.sum_(T.exp(shifted), axis=1))


def _take_rows(mat, cols):
    """Pick mat[i, cols[i]] as an (n,) expression via flat gather."""
    n, k = mat.shape
    flat = T.reshape(mat, (n * k,))
    idx = np.arange(n) * k + np.asarray(cols, dtype=np.intp)
    return T.take(flat, idx)


def binary_cross_entropy(probs, y):
    """Mean of -[y log p + (1-y) log(1-p)] for probabilities p in (0,1)."""
    y = np.asarray(y, dtype=np.float64)
    return -T.mean(y * T.log(probs) + (1.0 - y) * T.log(1.0 - probs))


def binary_cross_entropy_logits(z, y):
    """Saturation-safe binary cross entropy over pre-sigmoid logits:
    mean of softplus(-z) + (1-y) z, with softplus(a) = relu(a) + log(1+e^{-|a|})."""
    y = np.asarray(y, dtype=np.float64)
    a = -z
    relu_a = T.maximum(a, 0.0)
    softplus = relu_a + T.log(1.0 + T.exp(a - 2.0 * relu_a))
    return T.mean(softplus + (1.0 - y) * z)


def make_classwise_constraint(klass, loss=None, label=None):
    """Equality constraint driving the class-conditional loss to zero."""

    def build(spec, batch):
        labels = np.asarray(batch["y"])
        idx = np.flatnonzero(labels == klass)
        if idx.size == 0:
            raise ValueError(f"class {klass!r} absent from dataset")
        logits = forward_expr(spec, batch["x"])
        if loss is not None:
            per_sample = loss(logits, labels)
        else:
            per_sample = cross_entropy_loss(logits, labels)
        return T.mean(T.take(per_sample, idx))

    return ExpectationConstraint(
        kind=ConstraintKind.EQUALITY,
        label=label or f"class_{klass}",
        stream=f"class_{klass}",
        build=build,
    )


# ---------------------------------------------------------------------------
# convection boundary value problem
# ---------------------------------------------------------------------------

def make_pde_constraints(beta, x_max=2 * np.pi, t_max=1.0, forward=None):
    """Equality constraints for the convection problem on [0,x_max]x[0,t_max]:
    transport residual, periodic boundary, sinusoidal initial condition.

    Batch fields: `pde_xt` interior points, `bc_left`/`bc_right` boundary
    point pairs, `ic_xt` initial points, all (N,2). Each slack is a mean
    squared residual. `forward` overrides the model map f(points expr) ->
    values expr, e.g. to push an analytic solution through the same slacks.
    """
    if not np.isfinite(beta):
        raise ValueError("convection speed must be finite")
    fwd = forward if forward is not None else forward_expr

    def build_pde(spec, batch):
        pts = batch["pde_xt"]
        if not (isinstance(pts, T.Expr) and pts.op == "leaf"):
            raise ValueError("pde_xt must be an input leaf named 'pde_xt'")
        n = pts.shape[0]
        f = fwd(spec, pts)
        d_dx = T.jvp(f, "pde_xt", np.tile([1.0, 0.0], (n, 1)))
        d_dt = T.jvp(f, "pde_xt", np.tile([0.0, 1.0], (n, 1)))
        return T.mean(T.square(d_dt + beta * d_dx))

    # boundary/initial constraints take prebuilt (N,2) point sets: the feed
    # fills the x column with 0 / x_max / sampled positions and the t column
    # with sampled times / 0
    def build_bc(spec, batch):
        left = fwd(spec, batch["bc_left"])
        right = fwd(spec, batch["bc_right"])
        return T.mean(T.square(left - right))

    def build_ic(spec, batch):
        pts = batch["ic_xt"]
        n = pts.shape[0]
        f = fwd(spec, pts)
        x_col = T.take(T.reshape(pts, (n * 2,)), np.arange(n) * 2)
        return T.mean(T.square(f - T.sin(x_col)))

    def mk(label, stream, build):
        return ExpectationConstraint(
            kind=ConstraintKind.EQUALITY, label=label, stream=stream, build=build
        )

    return [
        mk("pde", "interior", build_pde),
        mk("bc", "boundary", build_bc),
        mk("ic", "initial", build_ic),
    ]
