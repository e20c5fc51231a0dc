"""L-layer Q network with a frozen sign output layer.

Pre-activations are

    h_1 = W_1 x,    h_l = W_l sigma(h_{l-1}) / sqrt(m)   (l >= 2),

and the output is Q(x; theta) = b^T sigma(h_L) / sqrt(m).  This is the
width-1/sqrt(m) recursion written with the scale moved inside the
activation, so that for L = 1 it is exactly
Q = m^{-1/2} sum_r b_r sigma(w_r^T x).  ``scaling="literal"`` instead puts
a second 1/sqrt(m) on the output (Q = b^T sigma(h_L) / m); every hidden
pre-activation is identical under both choices.

theta stacks vec(W_1), ..., vec(W_L) where vec stacks columns
(column-major / Fortran order).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erfc, expit

from neuraltd.errors import ConfigurationError

CHECKPOINT_MAGIC = b"NTDQ"
PROJECTION_SLACK = 1e-12


@dataclass(frozen=True)
class Activation:
    """Smooth activation with Lipschitz (``l1``) and smoothness (``l2``) constants."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    l1: float
    l2: float

    def __call__(self, z):
        return self.value(z)


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_prime(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gauss_cdf(z):
    return 0.5 * erfc(-z / _SQRT2)


def _gelu(z):
    return z * _gauss_cdf(z)


def _gelu_prime(z):
    return _gauss_cdf(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _sigmoid_prime(z):
    s = expit(z)
    return s * (1.0 - s)


# GeLU: sup|sigma'| is attained at z = sqrt(2), sup|sigma''| = 2 phi(0).
_GELU_L1 = float(_gelu_prime(np.array(_SQRT2)))
ACTIVATIONS = {
    "elu": Activation("elu", _elu, _elu_prime, 1.0, 1.0),
    "gelu": Activation("gelu", _gelu, _gelu_prime, _GELU_L1, 2.0 * _INV_SQRT_2PI),
    "sigmoid": Activation("sigmoid", expit, _sigmoid_prime, 0.25, 1.0 / (6.0 * math.sqrt(3.0))),
}


def get_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def n_params(depth, width, in_dim) -> int:
    return width * in_dim + (depth - 1) * width * width


@dataclass(frozen=True)
class NetworkParams:
    """Snapshot of the network: flattened weights ``theta`` and signs ``b``."""

    theta: np.ndarray
    b: np.ndarray
    depth: int
    width: int
    in_dim: int
    activation: str = "elu"
    scaling: str = "ntk"
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.in_dim < 1:
            raise ConfigurationError("depth, width and in_dim must be >= 1")
        if self.scaling not in ("ntk", "literal"):
            raise ConfigurationError(f"scaling must be 'ntk' or 'literal', got {self.scaling!r}")
        get_activation(self.activation)
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (n_params(self.depth, self.width, self.in_dim),):
            raise ConfigurationError(f"theta has shape {theta.shape}, expected ({self.n},)")
        b = np.asarray(self.b, dtype=np.float64)
        if b.shape != (self.width,) or not np.all(np.abs(b) == 1.0):
            raise ConfigurationError("b must be a vector of +-1 of length width")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "b", b)
        shapes = [(self.width, self.in_dim)] + [(self.width, self.width)] * (self.depth - 1)
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def n(self) -> int:
        return n_params(self.depth, self.width, self.in_dim)

    @property
    def sigma(self) -> Activation:
        return get_activation(self.activation)

    @property
    def output_scale(self) -> float:
        return 1.0 / math.sqrt(self.width) if self.scaling == "ntk" else 1.0 / self.width

    def weights(self, theta=None) -> list[np.ndarray]:
        """Views W_1..W_L into ``theta`` (default: own theta)."""
        theta = self.theta if theta is None else theta
        out, off = [], 0
        for rows, cols in self._shapes:
            out.append(theta[off:off + rows * cols].reshape(cols, rows).T)
            off += rows * cols
        return out

    def with_theta(self, theta) -> "NetworkParams":
        return NetworkParams(np.array(theta, dtype=np.float64), self.b, self.depth, self.width,
                             self.in_dim, self.activation, self.scaling)


def flatten(weights) -> np.ndarray:
    """Column-stacking vec of each matrix, concatenated."""
    return np.concatenate([np.asarray(w).ravel(order="F") for w in weights])


@dataclass(frozen=True)
class BallConstraint:
    """Euclidean ball of radius ``radius`` around ``center``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ConfigurationError("radius must be >= 0")
        c = np.array(self.center, dtype=np.float64, copy=True)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)


def init_params(depth, width, in_dim, seed=0, activation="elu", scaling="ntk"):
    """Gaussian N(0, 1) weights and uniform +-1 signs.

    Returns ``(params, theta0)`` where ``theta0`` is an independent copy of
    the initial flattened weights, the centre of the projection ball.
    """
    if depth < 1 or width < 1 or in_dim < 1:
        raise ConfigurationError("depth, width and in_dim must be >= 1")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(n_params(depth, width, in_dim))
    b = rng.choice(np.array([-1.0, 1.0]), size=width)
    params = NetworkParams(theta, b, depth, width, in_dim, activation, scaling)
    return params, theta.copy()


@dataclass
class ForwardCache:
    """Per-layer inputs z_{l-1} and pre-activations h_l."""

    inputs: list
    pre: list


def _forward(params, x, theta=None):
    sigma = params.sigma.value
    inv_sqrt_m = 1.0 / math.sqrt(params.width)
    z = x
    inputs, pre = [], []
    for l, w in enumerate(params.weights(theta)):
        if l > 0:
            z = sigma(pre[-1]) * inv_sqrt_m
        inputs.append(z)
        pre.append(z @ w.T if z.ndim == 2 else w @ z)
    q = params.output_scale * (sigma(pre[-1]) @ params.b)
    return q, ForwardCache(inputs, pre)


def _check_x(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ConfigurationError(f"feature dimension {x.shape[-1]} != network input dim {params.in_dim}")
    return x


def forward(params: NetworkParams, x, theta=None):
    """Q(x; theta) and the activation cache (``theta`` defaults to params.theta).

    ``x`` may be a single feature vector or a (p, d) batch.
    """
    x = _check_x(params, x)
    q, cache = _forward(params, x, theta)
    return (float(q) if x.ndim == 1 else q), cache


def q_values(params: NetworkParams, x, theta=None):
    return forward(params, x, theta)[0]


def _backward(params, cache, theta=None, out=None):
    dsigma = params.sigma.derivative
    inv_sqrt_m = 1.0 / math.sqrt(params.width)
    ws = params.weights(theta)
    g = params.output_scale * params.b * dsigma(cache.pre[-1])
    lead = cache.pre[-1].shape[:-1]
    if out is None:
        out = np.empty(lead + (params.n,))
    offsets = np.cumsum([0] + [r * c for r, c in params._shapes])
    for l in range(params.depth - 1, -1, -1):
        z = cache.inputs[l]
        block = out[..., offsets[l]:offsets[l + 1]]
        # column-major vec(g z^T) is z (outer) g flattened row-major
        if lead:
            np.multiply(z[:, :, None], g[:, None, :], out=block.reshape(lead[0], z.shape[-1], -1))
        else:
            np.multiply.outer(z, g, out=block.reshape(z.shape[-1], -1))
        if l > 0:
            back = g @ ws[l] if lead else ws[l].T @ g
            g = back * dsigma(cache.pre[l - 1]) * inv_sqrt_m
    return out


def value_and_grad(params: NetworkParams, x, theta=None, out=None):
    """(Q(x; theta), grad_theta Q(x; theta)) by reverse mode.

    ``out`` optionally receives the gradient (shape (n,) or (p, n)).
    """
    x = _check_x(params, x)
    q, cache = _forward(params, x, theta)
    return (float(q) if x.ndim == 1 else q), _backward(params, cache, theta, out)


def grad_theta(params: NetworkParams, x, theta=None) -> np.ndarray:
    """Exact gradient of Q w.r.t. the flattened weights (column-major order)."""
    return value_and_grad(params, x, theta)[1]


def support_jacobian(params: NetworkParams, features, theta=None):
    """Q values (p,) and Jacobian (p, n) over a (p, d) block of features."""
    x = np.atleast_2d(_check_x(params, features))
    return value_and_grad(params, x, theta)


def linearized_q(params_at_init: NetworkParams, theta, x) -> float:
    """Q(x; theta0) + <grad Q(x; theta0), theta - theta0>."""
    q0, g0 = value_and_grad(params_at_init, x)
    return q0 + g0 @ (np.asarray(theta, dtype=np.float64) - params_at_init.theta)


def project_ball(constraint: BallConstraint, theta, work=None) -> np.ndarray:
    """Euclidean projection onto the ball; points inside are returned as is.

    ``work`` is an optional scratch vector; when the point is outside, the
    projection is written into it and returned.
    """
    theta = np.asarray(theta, dtype=np.float64)
    diff = np.subtract(theta, constraint.center, out=work)
    dist = float(np.linalg.norm(diff))
    # The slack makes projection idempotent under rounding of the radial rescale.
    if dist <= constraint.radius + PROJECTION_SLACK:
        return theta
    diff *= constraint.radius / dist
    return np.add(constraint.center, diff, out=diff)


def save_checkpoint(path, params: NetworkParams) -> None:
    """Header (magic, L, m, d as little-endian int32) then theta and b as <f8."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<3i", params.depth, params.width, params.in_dim))
        fh.write(params.theta.astype("<f8").tobytes())
        fh.write(params.b.astype("<f8").tobytes())


def load_checkpoint(path, activation="elu", scaling="ntk") -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a network checkpoint")
    depth, width, in_dim = struct.unpack("<3i", blob[4:16])
    n = n_params(depth, width, in_dim)
    body = np.frombuffer(blob, dtype="<f8", offset=16)
    if body.size != n + width:
        raise ConfigurationError(f"{path}: truncated checkpoint ({body.size} values, expected {n + width})")
    return NetworkParams(body[:n].astype(np.float64), body[n:].astype(np.float64), depth, width, in_dim,
                         activation, scaling)
