"""Parameterized predictors: linear, logistic, and tanh MLPs.

Parameters live in one flat vector; the flattening order (per layer,
weights row-major then biases) is part of the public contract because
gradients and checkpoints depend on it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

__all__ = [
    "ModelSpec",
    "Model",
    "init_params",
    "predict",
    "forward_expr",
    "l2_penalty",
    "save_checkpoint",
    "load_checkpoint",
]

_KINDS = ("linear", "logistic", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a predictor f_theta.

    layer_sizes runs input -> output; linear/logistic use exactly two
    entries. Logistic forces a sigmoid output squash.
    """

    kind: str
    layer_sizes: tuple
    activation: str = "tanh"
    output_squash: str = "none"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        if self.kind in ("linear", "logistic") and len(sizes) != 2:
            raise ValueError(f"{self.kind} model takes (in, out) sizes, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        if self.kind == "logistic":
            object.__setattr__(self, "output_squash", "sigmoid")
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activation is supported")
        if self.output_squash not in ("none", "sigmoid"):
            raise ValueError(f"unknown output squash {self.output_squash!r}")

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def param_shapes(self):
        """Canonical (name, shape) pairs: w0, b0, w1, b1, ..."""
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            out.append((f"w{i}", (fan_in, fan_out)))
            out.append((f"b{i}", (fan_out,)))
        return out

    def param_names(self):
        return [name for name, _ in self.param_shapes()]

    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.shape != (self.spec.n_params(),):
            raise ValueError(
                f"theta has {th.shape} entries, spec wants {self.spec.n_params()}"
            )
        if not np.all(np.isfinite(th)):
            raise ValueError("theta entries must be finite")
        th = th.copy()
        th.flags.writeable = False
        object.__setattr__(self, "theta", th)

    def with_theta(self, theta):
        return Model(self.spec, theta)

    def param_bindings(self):
        """Unflatten theta into the named per-layer arrays."""
        out = {}
        pos = 0
        for name, shape in self.spec.param_shapes():
            n = int(np.prod(shape))
            out[name] = self.theta[pos : pos + n].reshape(shape)
            pos += n
        return out


def init_params(spec, seed):
    """Deterministic init: mlp weights U[-1/sqrt(fan_in), +1/sqrt(fan_in)],
    biases 0; linear/logistic start at theta = 0."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in spec.param_shapes():
        if spec.kind == "mlp" and name.startswith("w"):
            bound = 1.0 / np.sqrt(shape[0])
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            parts.append(np.zeros(int(np.prod(shape))))
    return Model(spec, np.concatenate(parts))


def forward_expr(spec, x, squash=True):
    """Expression for f_theta over parameter leaves, given an input expression.

    `x` must have shape (N, in_dim); the output is (N,) when out_dim == 1,
    else (N, out_dim). `squash=False` returns the pre-squash logits (for
    numerically stable cross-entropy terms).
    """
    x = T._lift(x)
    if len(x.shape) != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {spec.in_dim}")
    n = x.shape[0]
    h = x
    n_layers = len(spec.layer_sizes) - 1
    for i in range(n_layers):
        w = T.param(f"w{i}", (spec.layer_sizes[i], spec.layer_sizes[i + 1]))
        b = T.param(f"b{i}", (spec.layer_sizes[i + 1],))
        h = T.matmul(h, w) + b
        if i < n_layers - 1:
            h = T.tanh(h)
    if spec.output_squash == "sigmoid" and squash:
        h = T.sigmoid(h)
    if spec.out_dim == 1:
        h = T.reshape(h, (n,))
    return h


def predict(model, x):
    """Numeric f_theta(x); accepts one sample (d,) or a batch (N, d).

    Uses einsum contractions so each output row is computed independently of
    the batch size (BLAS GEMM results vary at the last ulp with the leading
    dimension, which would break batch-vs-per-row bit identity).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.in_dim:
        raise ValueError(f"input shape {x.shape} does not match model input size")
    spec = model.spec
    binds = model.param_bindings()
    h = x
    n_layers = len(spec.layer_sizes) - 1
    for i in range(n_layers):
        h = np.einsum("ij,jk->ik", h, binds[f"w{i}"]) + binds[f"b{i}"]
        if i < n_layers - 1:
            h = np.tanh(h)
    if spec.output_squash == "sigmoid":
        h = T._sigmoid(h)
    if spec.out_dim == 1:
        h = h[:, 0]
    return h[0] if single else h


def l2_penalty(spec, alpha):
    """(alpha/2) * ||theta||^2 as a differentiable scalar."""
    if alpha < 0:
        raise ValueError("penalty weight must be nonnegative")
    terms = [T.sum_(T.square(T.param(name, shape))) for name, shape in spec.param_shapes()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return (alpha / 2.0) * total


def flatten_grads(spec, grads):
    """Concatenate a per-leaf gradient dict in canonical parameter order."""
    return np.concatenate(
        [np.ravel(grads[name]) for name, _ in spec.param_shapes()]
    )


def _spec_dict(spec):
    return {
        "kind": spec.kind,
        "layer_sizes": list(spec.layer_sizes),
        "activation": spec.activation,
        "output_squash": spec.output_squash,
    }


def spec_from_dict(d):
    return ModelSpec(
        kind=d["kind"],
        layer_sizes=tuple(d["layer_sizes"]),
        activation=d.get("activation", "tanh"),
        output_squash=d.get("output_squash", "none"),
    )


def save_checkpoint(model, prefix):
    """Write `<prefix>.theta.csv` (single column) and `<prefix>.spec.json`."""
    theta_path = prefix + ".theta.csv"
    spec_path = prefix + ".spec.json"
    with open(theta_path + ".tmp", "w") as f:
        f.write("theta\n")
        for v in model.theta:
            f.write(f"{v:.17g}\n")
    os.replace(theta_path + ".tmp", theta_path)
    with open(spec_path + ".tmp", "w") as f:
        json.dump(_spec_dict(model.spec), f, indent=2)
        f.write("\n")
    os.replace(spec_path + ".tmp", spec_path)


def load_checkpoint(prefix):
    with open(prefix + ".spec.json") as f:
        spec = spec_from_dict(json.load(f))
    with open(prefix + ".theta.csv") as f:
        header = f.readline().strip()
        if header != "theta":
            raise ValueError(f"unexpected checkpoint header {header!r}")
        theta = np.array([float(line) for line in f if line.strip()])
    return Model(spec, theta)
