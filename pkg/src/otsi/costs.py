"""
Parametrized ground costs ``c(x, y; theta)``.

Two families are provided:

* `PolyCostModel` -- a polynomial with every monomial of total degree 1 or 2
  in the concatenated variables ``z = (x_1..x_dx, y_1..y_dy)``. The cost is
  linear in ``theta``, and the squared Euclidean distance is one point of the
  family (see `euclidean_init`).
* `MlpCostModel` -- a fully connected net ``(dx + dy) -> 100 -> 5 -> 1`` for
  inputs where the quadratic monomial count is too large.

Monomial order (``POLY_ORDER``): the ``D = dx + dy`` linear terms ``z_k`` in
index order, then the quadratic terms ``z_k * z_l`` for ``k <= l`` in
lexicographic order of ``(k, l)``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .core import CostMatrix, PointCloud
from .errors import InstanceError, SchemaError

POLY_ORDER = "deg1-2-lex-v1"
MLP_VERSION = "mlp-v1"


def n_monomials(dx, dy):
    D = dx + dy
    return D + D * (D + 1) // 2


def monomial_exponents(dx, dy):
    """Exponent pairs ``(k, l)`` for every monomial, ``l = -1`` for linear ones."""
    D = dx + dy
    lin = [(k, -1) for k in range(D)]
    quad = [(k, l) for k in range(D) for l in range(k, D)]
    return lin + quad


def monomial_vector(x, y):
    """Values of all monomials at a single pair ``(x, y)``, in ``POLY_ORDER``."""
    z = np.concatenate([np.ravel(x), np.ravel(y)]).astype(float)
    D = z.size
    iu = np.triu_indices(D)
    return np.concatenate([z, np.outer(z, z)[iu]])


def _points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    p = np.asarray(cloud, dtype=float)
    return p[:, None] if p.ndim == 1 else p


@dataclass(frozen=True)
class PolyCostModel:
    """Degree-2 polynomial cost; ``theta`` follows ``POLY_ORDER``."""

    dims: tuple
    theta: np.ndarray = None

    def __post_init__(self):
        dx, dy = (int(d) for d in self.dims)
        object.__setattr__(self, "dims", (dx, dy))
        p = n_monomials(dx, dy)
        th = np.zeros(p) if self.theta is None else np.array(self.theta, dtype=float).ravel()
        if th.shape != (p,):
            raise InstanceError(f"poly model with dims {(dx, dy)} needs {p} coefficients, got {th.size}")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    family = "poly"

    def with_theta(self, theta):
        return PolyCostModel(self.dims, theta)

    def _split(self):
        """Coefficients grouped as (x-linear, y-linear, xx, yy, xy)."""
        dx, dy = self.dims
        D = dx + dy
        th = self.theta
        Q = np.zeros((D, D))
        Q[np.triu_indices(D)] = th[D:]
        return th[:dx], th[dx:D], Q[:dx, :dx], Q[dx:, dx:], Q[:dx, dx:]

    def evaluate(self, X, Y):
        lx, ly, Qxx, Qyy, Wxy = self._split()
        row = X @ lx + np.einsum("ik,kl,il->i", X, Qxx, X)
        col = Y @ ly + np.einsum("jk,kl,jl->j", Y, Qyy, Y)
        return row[:, None] + col[None, :] + X @ Wxy @ Y.T

    def vjp(self, X, Y, U):
        dx, dy = self.dims
        D = dx + dy
        r, c = U.sum(axis=1), U.sum(axis=0)
        G = np.zeros((D, D))
        G[:dx, :dx] = (X.T * r) @ X
        G[dx:, dx:] = (Y.T * c) @ Y
        G[:dx, dx:] = X.T @ U @ Y
        return np.concatenate([X.T @ r, Y.T @ c, G[np.triu_indices(D)]])

    def to_dict(self):
        return {"family": "poly", "format": POLY_ORDER, "dims": list(self.dims),
                "theta": self.theta.tolist()}


_ACTIVATIONS = {
    # name: (f, f' expressed through the output value h and input z)
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, h: 0.5 * (1.0 + np.tanh(0.5 * z))),
}


@dataclass(frozen=True)
class MlpCostModel:
    """Feed-forward cost net ``[x, y] -> hidden[0] -> hidden[1] -> 1``.

    ``theta`` packs ``W1, b1, W2, b2, W3, b3`` (row-major, weights shaped
    ``(fan_out, fan_in)``). The output layer is linear.
    """

    dims: tuple
    theta: np.ndarray = None
    hidden: tuple = (100, 5)
    activation: str = "tanh"
    seed: int = field(default=0)

    def __post_init__(self):
        dx, dy = (int(d) for d in self.dims)
        object.__setattr__(self, "dims", (dx, dy))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in _ACTIVATIONS:
            raise SchemaError(f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}")
        shapes = self.layer_shapes()
        p = sum(int(np.prod(s)) for s in shapes)
        if self.theta is None:
            th = self._init_params(np.random.default_rng(self.seed))
        else:
            th = np.array(self.theta, dtype=float).ravel()
        if th.shape != (p,):
            raise InstanceError(f"mlp model needs {p} parameters, got {th.size}")
        if not np.all(np.isfinite(th)):
            raise InstanceError("mlp parameters must be finite")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    family = "mlp"

    def layer_shapes(self):
        sizes = [sum(self.dims), *self.hidden, 1]
        shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        return shapes

    def _init_params(self, rng):
        out = []
        shapes = self.layer_shapes()
        for w_shape, b_shape in zip(shapes[::2], shapes[1::2]):
            bound = 1.0 / np.sqrt(w_shape[1])
            out.append(rng.uniform(-bound, bound, size=w_shape).ravel())
            out.append(rng.uniform(-bound, bound, size=b_shape))
        return np.concatenate(out)

    def with_theta(self, theta):
        return MlpCostModel(self.dims, theta, self.hidden, self.activation, self.seed)

    def unpack(self, theta=None):
        th = self.theta if theta is None else theta
        params, pos = [], 0
        for shape in self.layer_shapes():
            size = int(np.prod(shape))
            params.append(th[pos:pos + size].reshape(shape))
            pos += size
        return params

    def _forward(self, X, Y):
        act, _ = _ACTIVATIONS[self.activation]
        W1, b1, W2, b2, W3, b3 = self.unpack()
        dx = self.dims[0]
        # first layer separates over the pair: W1 [x; y] = W1x x + W1y y
        Z1 = (X @ W1[:, :dx].T)[:, None, :] + (Y @ W1[:, dx:].T + b1)[None, :, :]
        H1 = act(Z1)
        Z2 = H1 @ W2.T + b2
        H2 = act(Z2)
        out = H2 @ W3[0] + b3[0]
        return out, (Z1, H1, Z2, H2)

    def evaluate(self, X, Y):
        return self._forward(X, Y)[0]

    def vjp(self, X, Y, U):
        _, dact = _ACTIVATIONS[self.activation]
        W1, b1, W2, b2, W3, b3 = self.unpack()
        _, (Z1, H1, Z2, H2) = self._forward(X, Y)
        h2 = H2.shape[-1]
        gW3 = np.tensordot(U, H2, axes=([0, 1], [0, 1]))[None, :]
        gb3 = np.array([U.sum()])
        dZ2 = U[:, :, None] * W3[0] * dact(Z2, H2)
        gW2 = dZ2.reshape(-1, h2).T @ H1.reshape(-1, H1.shape[-1])
        gb2 = dZ2.sum(axis=(0, 1))
        dZ1 = (dZ2 @ W2) * dact(Z1, H1)
        gW1 = np.hstack([dZ1.sum(axis=1).T @ X, dZ1.sum(axis=0).T @ Y])
        gb1 = dZ1.sum(axis=(0, 1))
        return np.concatenate([p.ravel() for p in (gW1, gb1, gW2, gb2, gW3, gb3)])

    def to_dict(self):
        return {"family": "mlp", "format": MLP_VERSION, "dims": list(self.dims),
                "hidden": list(self.hidden), "activation": self.activation,
                "seed": self.seed, "theta": self.theta.tolist()}


def euclidean_init(d):
    """Polynomial coefficients reproducing ``sum_k (x_k - y_k)^2`` in ``d`` dims."""
    d = int(d)
    theta = np.zeros(n_monomials(d, d))
    index = {kl: i for i, kl in enumerate(monomial_exponents(d, d))}
    for k in range(d):
        theta[index[(k, k)]] = 1.0
        theta[index[(d + k, d + k)]] = 1.0
        theta[index[(k, d + k)]] = -2.0
    return PolyCostModel((d, d), theta)


def default_init(family, dims, seed=0, **kwargs):
    """Euclidean coefficients when the family and dims allow it, else the family default."""
    dx, dy = dims
    if family == "poly":
        return euclidean_init(dx) if dx == dy else PolyCostModel((dx, dy))
    if family == "mlp":
        return MlpCostModel((dx, dy), seed=seed, **kwargs)
    raise SchemaError(f"unknown cost family {family!r}")


def _check_dims(model, X, Y):
    dx, dy = model.dims
    if X.shape[1] != dx or Y.shape[1] != dy:
        raise InstanceError(
            f"model expects feature dims {(dx, dy)}, got {(X.shape[1], Y.shape[1])}")


def cost_matrix(model, source, target):
    """Dense cost ``C[i, j] = c(source_i, target_j; model.theta)``."""
    X, Y = _points(source), _points(target)
    _check_dims(model, X, Y)
    return CostMatrix(model.evaluate(X, Y))


def cost_matrix_grad(model, source, target, upstream):
    """Gradient of ``sum(upstream * C(theta))`` with respect to ``theta``."""
    X, Y = _points(source), _points(target)
    _check_dims(model, X, Y)
    U = np.asarray(upstream, dtype=float)
    if U.shape != (X.shape[0], Y.shape[0]):
        raise InstanceError(f"upstream shape {U.shape} does not match cost shape {(X.shape[0], Y.shape[0])}")
    return model.vjp(X, Y, U)


def model_to_json(model):
    return json.dumps(model.to_dict())


def model_from_dict(doc):
    family = doc.get("family")
    if family == "poly":
        if doc.get("format") != POLY_ORDER:
            raise SchemaError(f"poly model format {doc.get('format')!r} is not {POLY_ORDER!r}")
        return PolyCostModel(tuple(doc["dims"]), doc["theta"])
    if family == "mlp":
        if doc.get("format") != MLP_VERSION:
            raise SchemaError(f"mlp model format {doc.get('format')!r} is not {MLP_VERSION!r}")
        return MlpCostModel(tuple(doc["dims"]), doc["theta"], tuple(doc["hidden"]),
                            doc.get("activation", "tanh"), doc.get("seed", 0))
    raise SchemaError(f"unknown cost family {family!r}")


def model_from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("model JSON must be an object")
    try:
        return model_from_dict(doc)
    except KeyError as exc:
        raise SchemaError(f"model JSON is missing field {exc}") from exc


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_json(fh.read())
