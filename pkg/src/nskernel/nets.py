"""Small fully-connected basis networks with hand-written backprop, plus Adam.

Every basis function of the kernel is a scalar-output MLP
``x -> softplus(x W0 + b0) -> ... -> h W_last + b_last``. The output layer is
linear unless ``positive_output`` is set, in which case a softplus is applied
(used for the mark networks, which must be non-negative).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ShapeError


def softplus(z):
    return np.logaddexp(0.0, z)


# rows per network pass; bounds activation memory on large pair sets
CHUNK = 65536


@dataclass
class _Inputs:
    x: np.ndarray


class BasisNet:
    """Scalar-output feed-forward network.

    Parameters
    ----------
    layer_dims : sequence of int
        ``[d_in, hidden_1, ..., hidden_k, 1]``.
    weights, biases : list of ndarray
        ``weights[k]`` has shape ``(layer_dims[k], layer_dims[k+1])``.
    positive_output : bool
        Apply softplus to the output.
    in_scale : float
        Fixed factor applied to the inputs before the first layer, so that
        inputs of any natural range reach the network at unit scale.

    Attributes
    ----------
    n_evals : int
        Number of input points pushed through ``forward`` so far. Used to
        audit how many network evaluations an objective costs.
    """

    def __init__(self, layer_dims, weights, biases, positive_output=False, in_scale=1.0):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.positive_output = bool(positive_output)
        self.in_scale = float(in_scale)
        if not (np.isfinite(self.in_scale) and self.in_scale > 0):
            raise ConfigurationError(f"in_scale must be positive and finite, got {in_scale}")
        self.n_evals = 0
        _check_dims(self.layer_dims)
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[k], self.layer_dims[k + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ShapeError(f"layer {k}: got W{W.shape}, b{b.shape}, expected W{shape}")

    @property
    def d_in(self):
        return self.layer_dims[0]

    def params(self):
        """Parameter arrays in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def param_names(self):
        names = []
        for k in range(len(self.weights)):
            names.extend([f"W{k}", f"b{k}"])
        return names

    def n_params(self):
        return sum(p.size for p in self.params())

    def _as_input(self, xs):
        x = np.asarray(xs, dtype=np.float64)
        if x.ndim == 1 and self.d_in == 1:
            x = x[:, None]
        elif x.ndim == 0 and self.d_in == 1:
            x = x.reshape(1, 1)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"expected inputs of dimension {self.d_in}, got array of shape {np.shape(xs)}")
        return x

    def forward(self, xs, keep_cache=False):
        """Evaluate the network on a batch of inputs.

        Returns an ``(N,)`` array, or ``(values, cache)`` when ``keep_cache``
        is true. The cache is what :meth:`backward` consumes. Inputs longer
        than ``CHUNK`` rows are processed in pieces; their cache holds only
        the inputs and :meth:`backward` recomputes activations piecewise.
        """
        x = self._as_input(xs)
        self.n_evals += x.shape[0]
        if x.shape[0] <= CHUNK:
            return self._run(x, keep_cache)
        y = np.concatenate([self._run(x[i:i + CHUNK], False) for i in range(0, x.shape[0], CHUNK)])
        return (y, _Inputs(x)) if keep_cache else y

    __call__ = forward

    def _run(self, x, keep_cache):
        if self.in_scale != 1.0:
            x = x * self.in_scale
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if k < last:
                pre.append(z)
                h = softplus(z)
                acts.append(h)
            else:
                out_pre = z[:, 0]
        y = softplus(out_pre) if self.positive_output else out_pre
        if keep_cache:
            return y, (acts, pre, out_pre)
        return y

    def backward(self, cache, dy):
        """Gradients of ``sum(dy * y)`` w.r.t. the parameters (same order as :meth:`params`)."""
        dy = np.asarray(dy, dtype=np.float64).reshape(-1)
        if not isinstance(cache, _Inputs):
            return self._backprop(cache, dy)
        total = None
        for i in range(0, cache.x.shape[0], CHUNK):
            _, c = self._run(cache.x[i:i + CHUNK], True)
            g = self._backprop(c, dy[i:i + CHUNK])
            total = g if total is None else [a + b for a, b in zip(total, g)]
        return total

    def _backprop(self, cache, dz):
        acts, pre, out_pre = cache
        if self.positive_output:
            dz = dz * expit(out_pre)
        dz = dz[:, None]
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = acts[k].T @ dz
            grads[2 * k + 1] = dz.sum(axis=0)
            if k > 0:
                dz = (dz @ self.weights[k].T) * expit(pre[k - 1])
        return grads

    def copy(self):
        return BasisNet(self.layer_dims, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.positive_output, self.in_scale)


def _check_dims(layer_dims):
    if len(layer_dims) < 2:
        raise ConfigurationError(f"layer_dims needs at least input and output sizes, got {layer_dims}")
    if any(d <= 0 for d in layer_dims):
        raise ConfigurationError(f"layer widths must be positive, got {layer_dims}")
    if layer_dims[-1] != 1:
        raise ConfigurationError("basis networks have scalar output; last layer width must be 1")


def net_init(layer_dims, seed, positive_output=False, in_scale=1.0):
    """Fan-in scaled uniform initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    """
    layer_dims = [int(d) for d in layer_dims]
    _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return BasisNet(layer_dims, weights, biases, positive_output=positive_output, in_scale=in_scale)


def net_forward(net, xs):
    return net.forward(xs)


@dataclass
class AdamState:
    """Adam moment accumulators keyed by parameter name."""

    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()})


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``lr`` overrides ``state.lr`` for this step only (used by the trainer's
    feasibility backoff). Returns ``(params, state)``.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"shape mismatch for {name}: param {p.shape}, grad {np.shape(g)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
