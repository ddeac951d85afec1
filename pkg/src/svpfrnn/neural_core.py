"""Small dense networks with hand-written reverse-mode gradients and Adam.

Parameter layout (canonical ordering): for each layer ``l`` in order, the
weight matrix ``W_l`` of shape ``(n_in, n_out)`` flattened row-major, followed
by the bias ``b_l`` of length ``n_out``. A layer computes
``act(x @ W_l + b_l)`` on row-batched inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("tanh", "relu", "softplus", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "softplus":
        return expit(z)
    return np.ones_like(z)


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True, eq=False)
class DenseNet:
    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...]
    parameters: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "parameters", np.asarray(self.parameters, dtype=np.float64))
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ValueError("need one activation per layer")
        if unknown := set(self.activations) - set(ACTIVATIONS):
            raise ValueError(f"unknown activations {unknown}")
        if self.parameters.shape != (param_count(self.layer_sizes),):
            raise ValueError(f"expected {param_count(self.layer_sizes)} parameters, "
                             f"got {self.parameters.shape}")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], activations: Sequence[str], seed: int = 0) -> "DenseNet":
        """Xavier-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            chunks.append(rng.uniform(-limit, limit, n_in * n_out))
            chunks.append(np.zeros(n_out))
        return cls(tuple(layer_sizes), tuple(activations), np.concatenate(chunks), seed)

    def __eq__(self, other):
        if not isinstance(other, DenseNet):
            return NotImplemented
        return (self.layer_sizes == other.layer_sizes and self.activations == other.activations
                and np.array_equal(self.parameters, other.parameters))

    __hash__ = None

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def with_parameters(self, parameters: np.ndarray) -> "DenseNet":
        return replace(self, parameters=np.array(parameters, dtype=np.float64))

    def layers(self, parameters: np.ndarray | None = None):
        """Yield ``(W, b)`` views into the flat parameter vector."""
        flat = self.parameters if parameters is None else parameters
        off = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = flat[off:off + n_in * n_out].reshape(n_in, n_out)
            off += n_in * n_out
            yield W, flat[off:off + n_out]
            off += n_out

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activations": list(self.activations),
                "parameters": [float(v) for v in self.parameters], "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        return cls(tuple(d["layer_sizes"]), tuple(d["activations"]),
                   np.array(d["parameters"], dtype=np.float64), int(d.get("seed", 0)))

    def save(self, path: str | Path) -> None:
        # repr() of a float round-trips exactly through json
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DenseNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"input must have trailing dimension {net.n_in}, got shape {x.shape}")
    return X, single


def forward_cached(net: DenseNet, x) -> tuple[np.ndarray, list]:
    """Forward pass returning the output and the per-layer cache for :func:`backward_cached`."""
    X, _ = _as_batch(net, x)
    cache = []
    a = X
    for (W, b), act in zip(net.layers(), net.activations):
        z = a @ W + b
        out = _act(act, z)
        cache.append((a, z, out))
        a = out
    return a, cache


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the net on one input vector or a ``(N, n_in)`` batch."""
    X, single = _as_batch(net, x)
    a = X
    for (W, b), act in zip(net.layers(), net.activations):
        a = _act(act, a @ W + b)
    return a[0] if single else a


def backward_cached(net: DenseNet, cache: list, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and inputs."""
    grads = np.empty_like(net.parameters)
    bounds = []
    off = 0
    for n_in, n_out in zip(net.layer_sizes[:-1], net.layer_sizes[1:]):
        bounds.append((off, off + n_in * n_out, off + n_in * n_out + n_out))
        off += n_in * n_out + n_out
    layers = list(net.layers())
    g = upstream
    for l in range(len(layers) - 1, -1, -1):
        a_in, z, out = cache[l]
        gz = g * _act_grad(net.activations[l], z, out)
        w0, w1, b1 = bounds[l]
        grads[w0:w1] = (a_in.T @ gz).ravel()
        grads[w1:b1] = gz.sum(axis=0)
        g = gz @ layers[l][0].T
    return grads, g


def backward(net: DenseNet, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of ``<upstream, forward(net, x)>``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is aligned with
    ``net.parameters`` and ``input_grad`` has the shape of ``x``.
    """
    X, single = _as_batch(net, x)
    U = np.asarray(upstream, dtype=np.float64)
    U = U[None, :] if single else U
    if U.shape != (X.shape[0], net.n_out):
        raise ValueError(f"upstream shape {U.shape} does not match output {(X.shape[0], net.n_out)}")
    _, cache = forward_cached(net, X)
    grads, gx = backward_cached(net, cache, U)
    return grads, (gx[0] if single else gx)


def grad_check(net: DenseNet, x, h: float = 1e-5, upstream=None, seed: int = 0) -> float:
    """Max relative error between :func:`backward` and central differences.

    Checks every parameter and input coordinate of the scalar
    ``<upstream, forward(net, x)>`` (``upstream`` random if not given).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    if upstream is None:
        shape = (net.n_out,) if x.ndim == 1 else (x.shape[0], net.n_out)
        upstream = np.random.default_rng(seed).standard_normal(shape)
    upstream = np.asarray(upstream, dtype=np.float64)

    def objective(params, inp):
        return float(np.sum(upstream * forward(net.with_parameters(params), inp)))

    g_params, g_x = backward(net, x, upstream)
    numeric = np.empty_like(net.parameters)
    for i in range(len(net.parameters)):
        p_hi, p_lo = net.parameters.copy(), net.parameters.copy()
        p_hi[i] += h
        p_lo[i] -= h
        numeric[i] = (objective(p_hi, x) - objective(p_lo, x)) / (2 * h)
    numeric_x = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        x_hi, x_lo = x.copy(), x.copy()
        x_hi[idx] += h
        x_lo[idx] -= h
        numeric_x[idx] = (objective(net.parameters, x_hi) - objective(net.parameters, x_lo)) / (2 * h)
    analytic = np.concatenate([g_params, np.ravel(g_x)])
    approx = np.concatenate([numeric, np.ravel(numeric_x)])
    return float(np.max(relative_error(analytic, approx)))


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exact zeros from blowing up."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass(frozen=True)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 1e-3, **kw) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def opt_step(params: np.ndarray, grads: np.ndarray,
             state: OptimizerState) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam step. Pure: returns new arrays."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError("params, grads and optimizer moments must be aligned")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)
