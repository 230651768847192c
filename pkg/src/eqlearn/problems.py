"""Assembly of solvable constrained problems and their data.

Covers the four experiment families: minimum-norm QPs (exact-oracle
convergence checks), fairness on tabular data (demographic parity and
prescribed rates), the convection boundary value problem, and classwise
interpolation, plus the metrics each one reports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import solver as S
from . import tensor as T
from .constraints import (
    DEFAULT_TEMPERATURE,
    binary_cross_entropy_logits,
    make_classwise_constraint,
    make_dp_constraint,
    make_pde_constraints,
    make_prescribed_rate_constraint,
)
from .models import ModelSpec, forward_expr, init_params, l2_penalty, predict
from .qp_oracle import solve_eq_qp

log = logging.getLogger(__name__)

__all__ = [
    "Problem",
    "TabularDataset",
    "TabularSchema",
    "CollocationSet",
    "load_and_preprocess",
    "compas_schema",
    "synth_fairness_dataset",
    "synth_classwise_dataset",
    "build_min_norm_problem",
    "build_fairness_problem",
    "build_convection_problem",
    "build_classwise_problem",
    "sample_collocation",
    "convection_truth",
    "relative_l2",
    "evaluation_grid",
    "hard_group_rates",
    "disparity",
    "accuracy",
]

X_MAX = 2 * np.pi
T_MAX = 1.0


@dataclass(frozen=True)
class Problem:
    """A ready-to-solve constrained learning problem.

    Constraint entries are (label, scalar slack expression) pairs realized
    over the model's parameter leaves plus whatever data leaves `feed`
    binds each step (static problems bake their data as constants and feed
    nothing).
    """

    name: str
    objective: object
    eq_constraints: tuple
    ineq_constraints: tuple
    init_model: object
    feed: object = lambda t: {}
    exact_minimizer: object = None  # (lam, mu) -> theta, QP-style problems only
    qhat: object = None  # (lam, mu) -> exact dual value, when available
    dual_reference: object = None  # (lam*, mu*) for distance logging
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray
    columns: tuple

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        g = np.asarray(self.group_ids)
        if f.ndim != 2 or len(f) != len(y) or len(f) != len(g):
            raise ValueError("features/labels/groups are inconsistent")
        if len(f) == 0:
            raise ValueError("empty dataset")
        if not np.all(np.isfinite(f)):
            raise ValueError("features contain non-finite values")
        if f.shape[1] != len(self.columns):
            raise ValueError("feature width does not match column schema")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "group_ids", g)

    @property
    def n(self):
        return len(self.labels)

    def groups(self):
        return sorted(np.unique(self.group_ids).tolist())


@dataclass
class TabularSchema:
    """Declarative preprocessing recipe for a CSV file.

    Encodings: `binary` maps a two-valued column to {0,1} given the value
    coded as 1; `bins` quantizes by explicit (lo, hi] intervals (the first
    interval also includes its left edge) followed by one-hot; `quantile_bins`
    quantizes by train-set quantiles; `onehot` one-hot encodes categoricals
    with train-set levels. Rows with unseen levels or out-of-bin values are
    reported and dropped.
    """

    target: str
    group: str
    keep: tuple = ()
    range_filters: tuple = ()  # (column, lo, hi) inclusive
    recode: dict = field(default_factory=dict)
    onehot: tuple = ()
    binary: dict = field(default_factory=dict)
    bins: dict = field(default_factory=dict)
    quantile_bins: dict = field(default_factory=dict)
    train_frac: float = 0.7


def compas_schema():
    """The recidivism-data recipe: screening-window filter, race clubbing,
    explicit count bins, 5 age quantiles, binary sex/charge-degree."""
    count_bins = ((0, 0.99), (0.99, 1), (1, 1000))
    return TabularSchema(
        target="two_year_recid",
        group="race",
        keep=(
            "sex",
            "age",
            "race",
            "juv_misd_count",
            "juv_other_count",
            "priors_count",
            "c_charge_degree",
        ),
        range_filters=(("days_b_screening_arrest", -30, 30),),
        recode={"race": {"Asian": "Other", "Native American": "Other"}},
        onehot=("race",),
        binary={"sex": "Male", "c_charge_degree": "F"},
        bins={
            "priors_count": ((0, 0.99), (0.99, 1), (1, 2), (2, 3), (3, 4), (4, 1000)),
            "juv_misd_count": count_bins,
            "juv_other_count": count_bins,
        },
        quantile_bins={"age": 5},
    )


def _bin_index(value, intervals):
    for i, (lo, hi) in enumerate(intervals):
        if (value == lo and i == 0) or lo < value <= hi:
            return i
    return -1


def load_and_preprocess(csv_path, schema, seed=0):
    """Filter, recode, split 70/30, and encode a CSV into train/test datasets.

    Deterministic given (file, schema, seed). Returns (train, test).
    """
    df = pd.read_csv(csv_path)
    if df.empty:
        raise ValueError(f"no rows in {csv_path}")
    needed = set(schema.keep) | {schema.target, schema.group}
    needed |= {c for c, _, _ in schema.range_filters}
    missing = needed - set(df.columns)
    if missing:
        raise ValueError(f"missing columns: {sorted(missing)}")

    for col, lo, hi in schema.range_filters:
        df = df[(df[col] >= lo) & (df[col] <= hi)]
    df = df[[c for c in schema.keep] + ([schema.target] if schema.target not in schema.keep else [])]
    for col, mapping in schema.recode.items():
        df[col] = df[col].replace(mapping)
    df = df.reset_index(drop=True)
    if df.empty:
        raise ValueError("all rows filtered out")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(df))
    n_train = int(round(schema.train_frac * len(df)))
    idx = {"train": perm[:n_train], "test": perm[n_train:]}
    frames = {k: df.iloc[v].reset_index(drop=True) for k, v in idx.items()}
    train = frames["train"]

    def encode(frame):
        keep_mask = np.ones(len(frame), dtype=bool)
        cols, mats = [], []
        for col in schema.keep:
            vals = frame[col]
            if col in schema.binary:
                pos = schema.binary[col]
                levels = set(train[col].unique())
                bad = ~vals.isin(levels)
                if bad.any():
                    log.warning("dropping %d rows with unseen %s levels", bad.sum(), col)
                    keep_mask &= ~bad.to_numpy()
                cols.append(col)
                mats.append((vals == pos).to_numpy(dtype=np.float64)[:, None])
            elif col in schema.bins:
                intervals = schema.bins[col]
                bidx = vals.map(lambda v: _bin_index(v, intervals)).to_numpy()
                bad = bidx < 0
                if bad.any():
                    log.warning("dropping %d rows outside %s bins", bad.sum(), col)
                    keep_mask &= ~bad
                onehot = np.zeros((len(frame), len(intervals)))
                ok = bidx >= 0
                onehot[np.arange(len(frame))[ok], bidx[ok]] = 1.0
                cols += [f"{col}_bin{i}" for i in range(len(intervals))]
                mats.append(onehot)
            elif col in schema.quantile_bins:
                k = schema.quantile_bins[col]
                edges = np.quantile(train[col].to_numpy(dtype=float), np.linspace(0, 1, k + 1)[1:-1])
                bidx = np.searchsorted(edges, vals.to_numpy(dtype=float), side="left")
                onehot = np.zeros((len(frame), k))
                onehot[np.arange(len(frame)), bidx] = 1.0
                cols += [f"{col}_q{i}" for i in range(k)]
                mats.append(onehot)
            elif col in schema.onehot:
                levels = sorted(train[col].unique().tolist())
                bad = ~vals.isin(levels)
                if bad.any():
                    log.warning("dropping %d rows with unseen %s levels", bad.sum(), col)
                    keep_mask &= ~bad.to_numpy()
                onehot = np.zeros((len(frame), len(levels)))
                for i, lv in enumerate(levels):
                    onehot[:, i] = (vals == lv).to_numpy(dtype=np.float64)
                cols += [f"{col}_{lv}" for lv in levels]
                mats.append(onehot)
            else:
                cols.append(col)
                mats.append(vals.to_numpy(dtype=np.float64)[:, None])
        X = np.hstack(mats)[keep_mask]
        y = frame[schema.target].to_numpy()[keep_mask]
        g = frame[schema.group].to_numpy()[keep_mask]
        return TabularDataset(features=X, labels=y, group_ids=g, columns=tuple(cols))

    return encode(frames["train"]), encode(frames["test"])


def synth_fairness_dataset(seed, n, group_specs, shift=0.9):
    """Gaussian two-feature data with group-dependent base rates plus group
    one-hot features, so an unconstrained classifier picks up the rate gap.

    `group_specs`: sequence of (share, base_rate) pairs, shares summing to 1.
    `shift` sets the class-mean separation of the informative features.
    """
    specs = [(float(s), float(r)) for s, r in group_specs]
    if len(specs) < 2:
        raise ValueError("need at least two groups")
    if abs(sum(s for s, _ in specs) - 1.0) > 1e-9:
        raise ValueError("group shares must sum to 1")
    if min(s for s, _ in specs) <= 0:
        raise ValueError("degenerate group with zero share")
    rng = np.random.default_rng(seed)
    counts = np.floor(np.array([s for s, _ in specs]) * n).astype(int)
    counts[0] += n - counts.sum()
    gs, ys, xs = [], [], []
    for g, ((_, rate), m) in enumerate(zip(specs, counts)):
        y = (rng.uniform(size=m) < rate).astype(int)
        mu = np.where(y[:, None] == 1, 1.0, -1.0)
        x = rng.normal(size=(m, 2)) + shift * mu
        gs.append(np.full(m, g))
        ys.append(y)
        xs.append(x)
    x = np.vstack(xs)
    y = np.concatenate(ys)
    g = np.concatenate(gs)
    onehot = np.zeros((n, len(specs)))
    onehot[np.arange(n), g] = 1.0
    features = np.hstack([x, onehot])
    perm = rng.permutation(n)
    cols = ("x1", "x2") + tuple(f"group_{i}" for i in range(len(specs)))
    return TabularDataset(
        features=features[perm], labels=y[perm], group_ids=g[perm], columns=cols
    )


def synth_classwise_dataset(seed, n_per_class, noise_levels, spread=0.6, radius=3.0):
    """Well-separated Gaussian blobs where a fraction `noise_levels[k]` of the
    samples labeled k actually come from other blobs."""
    k = len(noise_levels)
    if k < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(k) / k
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    xs, ys = [], []
    for c, p in enumerate(noise_levels):
        m = n_per_class
        m_noise = int(round(p * m))
        src = np.full(m, c)
        if m_noise:
            others = np.array([j for j in range(k) if j != c])
            src[:m_noise] = rng.choice(others, size=m_noise)
        x = centers[src] + spread * rng.normal(size=(m, 2))
        xs.append(x)
        ys.append(np.full(m, c))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(len(y))
    return TabularDataset(
        features=x[perm],
        labels=y[perm],
        group_ids=y[perm],
        columns=("x1", "x2"),
    )


# ---------------------------------------------------------------------------
# minimum-norm QP problems (exact-oracle vehicles)
# ---------------------------------------------------------------------------

def build_min_norm_problem(X, y):
    """min (1/2)||theta||^2 s.t. Xw = y, one equality per row.

    Compared against the closed forms: the Lagrangian minimizer is
    w = -X^T mu (bias 0), the dual function is -0.5||X^T mu||^2 - mu.y, and
    the dual optimum is mu* = -(XX^T)^{-1} y.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    spec = ModelSpec("linear", (n, 1))
    w = T.reshape(T.param("w0", (n, 1)), (n,))
    r = T.matmul(T.const(X), w) - T.const(y)
    eq = tuple((f"h{j}", T.reshape(T.take(r, [j]), ())) for j in range(n))
    sol = solve_eq_qp(X, y)

    def exact_minimizer(lam, mu):
        return np.concatenate([-X.T @ mu, [0.0]])

    def qhat(lam, mu):
        xtmu = X.T @ mu
        return float(-0.5 * xtmu @ xtmu - mu @ y)

    return Problem(
        name="min_norm_qp",
        objective=l2_penalty(spec, 1.0),
        eq_constraints=eq,
        ineq_constraints=(),
        init_model=init_params(spec, 0),
        feed=lambda t: {},
        exact_minimizer=exact_minimizer,
        qhat=qhat,
        dual_reference=(np.zeros(0), sol.duals),
        meta={"X": X, "y": y, "mu_star": sol.duals, "d_star": sol.objective},
    )


# ---------------------------------------------------------------------------
# fairness problems
# ---------------------------------------------------------------------------

def build_fairness_problem(dataset, mode="exact_dp", alpha=DEFAULT_TEMPERATURE,
                           rate=None, eps=None):
    """Logistic cross-entropy objective with one smoothed rate constraint per
    group: exact demographic parity, prescribed rates, or the double-sided
    relaxation of exact parity."""
    d = dataset.features.shape[1]
    spec = ModelSpec("logistic", (d, 1))
    x = T.const(dataset.features)
    logits = forward_expr(spec, x, squash=False)
    objective = binary_cross_entropy_logits(logits, dataset.labels)
    batch = {"x": x, "group": dataset.group_ids}

    if mode == "unconstrained":
        constraints = []
    elif mode == "exact_dp":
        constraints = [make_dp_constraint(g, alpha=alpha) for g in dataset.groups()]
    elif mode == "prescribed":
        if rate is None:
            raise ValueError("prescribed mode needs a target rate")
        constraints = [
            make_prescribed_rate_constraint(g, rate, alpha=alpha)
            for g in dataset.groups()
        ]
    elif mode == "double_sided":
        if eps is None:
            raise ValueError("double_sided mode needs eps")
        base = build_fairness_problem(dataset, mode="exact_dp", alpha=alpha)
        ds = S.to_double_sided(base, eps)
        ds.meta.update(base.meta)
        return ds
    else:
        raise ValueError(f"unknown fairness mode {mode!r}")

    eq = tuple((c.label, c.slack_expr(spec, batch)) for c in constraints)
    return Problem(
        name=f"fairness_{mode}",
        objective=objective,
        eq_constraints=eq,
        ineq_constraints=(),
        init_model=init_params(spec, 0),
        feed=lambda t: {},
        meta={"dataset": dataset, "alpha": alpha, "rate": rate},
    )


# ---------------------------------------------------------------------------
# convection boundary value problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollocationSet:
    """Sampled residual evaluation points for one solver step."""

    interior: np.ndarray  # (n, 2) of (x, t)
    boundary_t: np.ndarray
    initial_x: np.ndarray
    seed: object

    def __post_init__(self):
        pts = np.asarray(self.interior, dtype=np.float64)
        bt = np.asarray(self.boundary_t, dtype=np.float64)
        ix = np.asarray(self.initial_x, dtype=np.float64)
        if min(len(pts), len(bt), len(ix)) < 1:
            raise ValueError("collocation counts must be positive")
        if (
            pts[:, 0].min() < 0 or pts[:, 0].max() > X_MAX
            or pts[:, 1].min() < 0 or pts[:, 1].max() > T_MAX
            or bt.min() < 0 or bt.max() > T_MAX
            or ix.min() < 0 or ix.max() > X_MAX
        ):
            raise ValueError("collocation points fall outside the domain")
        object.__setattr__(self, "interior", pts)
        object.__setattr__(self, "boundary_t", bt)
        object.__setattr__(self, "initial_x", ix)

    def batch(self):
        n_b = len(self.boundary_t)
        return {
            "pde_xt": self.interior,
            "bc_left": np.column_stack([np.zeros(n_b), self.boundary_t]),
            "bc_right": np.column_stack([np.full(n_b, X_MAX), self.boundary_t]),
            "ic_xt": np.column_stack([self.initial_x, np.zeros(len(self.initial_x))]),
        }


def sample_collocation(n_pde=1000, n_bc=1000, n_ic=1000, seed=0, step=0):
    """Uniform samples over the domain; (seed, step) fully determine the draw
    so dynamic resampling stays reproducible."""
    if min(n_pde, n_bc, n_ic) < 1:
        raise ValueError("collocation counts must be positive")
    rng = np.random.default_rng([seed, step])
    xs = rng.uniform(0.0, X_MAX, size=n_pde)
    ts = rng.uniform(0.0, T_MAX, size=n_pde)
    return CollocationSet(
        interior=np.column_stack([xs, ts]),
        boundary_t=rng.uniform(0.0, T_MAX, size=n_bc),
        initial_x=rng.uniform(0.0, X_MAX, size=n_ic),
        seed=(seed, step),
    )


def build_convection_problem(beta, model_spec=None, alpha_reg=0.0,
                             n_collocation=1000, seed=0, dynamic=True):
    """Transport-equation problem: zero (or ridge) objective plus equality
    constraints for the PDE residual, periodic boundary, and sine initial
    condition, over dynamically resampled collocation points."""
    spec = model_spec or ModelSpec("mlp", (2, 50, 50, 50, 50, 1))
    n = n_collocation
    leaves = {
        "pde_xt": T.inp("pde_xt", (n, 2)),
        "bc_left": T.inp("bc_left", (n, 2)),
        "bc_right": T.inp("bc_right", (n, 2)),
        "ic_xt": T.inp("ic_xt", (n, 2)),
    }
    constraints = make_pde_constraints(beta)
    eq = tuple((c.label, c.slack_expr(spec, leaves)) for c in constraints)

    def feed(t):
        cs = sample_collocation(n, n, n, seed=seed, step=t if dynamic else 0)
        return cs.batch()

    return Problem(
        name=f"convection_beta{beta:g}",
        objective=l2_penalty(spec, alpha_reg),
        eq_constraints=eq,
        ineq_constraints=(),
        init_model=init_params(spec, seed),
        feed=feed,
        meta={"beta": beta, "n_collocation": n, "dynamic": dynamic},
    )


def convection_truth(x, t, beta):
    """Transport of the sine initial profile: sin(x - beta t)."""
    return np.sin(np.asarray(x, dtype=np.float64) - beta * np.asarray(t, dtype=np.float64))


def evaluation_grid(nx=128, nt=64):
    """Uniform (x, t) grid over the domain, flattened to (nx*nt, 2)."""
    xs = np.linspace(0.0, X_MAX, nx)
    ts = np.linspace(0.0, T_MAX, nt)
    gx, gt = np.meshgrid(xs, ts, indexing="ij")
    return np.column_stack([gx.ravel(), gt.ravel()])


def relative_l2(pred, truth):
    """sqrt(sum (pred - truth)^2 / sum truth^2) over matching grids."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    q = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError("prediction and truth grids differ in length")
    denom = float(q @ q)
    if denom == 0.0:
        raise ValueError("truth grid has zero norm")
    diff = p - q
    return float(np.sqrt(diff @ diff / denom))


# ---------------------------------------------------------------------------
# classwise interpolation
# ---------------------------------------------------------------------------

def build_classwise_problem(dataset, alpha_reg=1e-3, model_spec=None, loss=None):
    """Ridge objective with one equality per class driving the
    class-conditional loss to zero."""
    classes = sorted(np.unique(dataset.labels).tolist())
    if len(classes) < 2:
        raise ValueError("classwise interpolation needs at least two classes")
    d = dataset.features.shape[1]
    spec = model_spec or ModelSpec("mlp", (d, 64, 64, len(classes)))
    batch = {"x": T.const(dataset.features), "y": dataset.labels}
    eq = tuple(
        (f"class_{k}", make_classwise_constraint(k, loss=loss).slack_expr(spec, batch))
        for k in classes
    )
    return Problem(
        name="classwise_interpolation",
        objective=l2_penalty(spec, alpha_reg),
        eq_constraints=eq,
        ineq_constraints=(),
        init_model=init_params(spec, 0),
        feed=lambda t: {},
        meta={"dataset": dataset, "classes": classes, "alpha_reg": alpha_reg},
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def hard_group_rates(model, dataset):
    """Positive rate per group under the strict f(x) > 0.5 threshold."""
    scores = predict(model, dataset.features)
    hard = scores > 0.5
    return np.array([hard[dataset.group_ids == g].mean() for g in dataset.groups()])


def disparity(rates):
    """Spread of group rates: max - min."""
    r = np.asarray(rates, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no group rates")
    return float(r.max() - r.min())


def accuracy(model, dataset):
    scores = predict(model, dataset.features)
    return float(((scores > 0.5).astype(int) == dataset.labels).mean())
