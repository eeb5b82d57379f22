"""Time-conditioned MLP velocity field with exact reverse-mode gradients.

The network maps ``concat(x, embed(t))`` to a velocity in the data space.
``embed(t)`` is the raw time followed by four sinusoids, so the input width
is ``d + 5``. Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

TIME_EMBED_DIM = 5
_FREQS = np.array([np.pi, 2.0 * np.pi])


def time_embedding(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    wt = t[:, None] * _FREQS[None, :]
    return np.concatenate([t[:, None], np.sin(wt), np.cos(wt)], axis=1)


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


class DivergenceError(FloatingPointError):
    """Raised when activations or losses stop being finite."""


@dataclass
class VelocityField:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    dim: int
    activation: str = "silu"

    @property
    def hidden(self) -> tuple:
        return tuple(W.shape[1] for W in self.weights[:-1])

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_params(cls, params: Sequence[np.ndarray], dim: int, activation: str = "silu"):
        params = [np.array(p, dtype=float) for p in params]
        return cls(params[0::2], params[1::2], dim, activation)

    def copy(self) -> "VelocityField":
        return VelocityField.from_params(self.params, self.dim, self.activation)

    def __call__(self, t, x):
        return forward(self, t, x)


def init_field(d: int, hidden: Sequence[int] = (64, 64, 64), seed=0, activation: str = "silu") -> VelocityField:
    hidden = tuple(int(h) for h in hidden)
    if d < 1 or not hidden or min(hidden) < 1:
        raise ValueError(f"invalid widths: d={d}, hidden={hidden}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    sizes = (d + TIME_EMBED_DIM,) + hidden
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    # zero output layer: the initial flow is the identity map
    weights.append(np.zeros((hidden[-1], d)))
    biases.append(np.zeros(d))
    return VelocityField(weights, biases, d, activation)


def _prepare(field: VelocityField, t, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != field.dim:
        raise ValueError(f"expected inputs of width {field.dim}, got shape {x.shape}")
    t = np.asarray(t, dtype=float)
    T = np.full(X.shape[0], float(t)) if t.ndim == 0 else t.reshape(-1)
    if T.shape[0] != X.shape[0]:
        raise ValueError("time vector length does not match the batch")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(T))):
        raise ValueError("non-finite input to the velocity field")
    return np.concatenate([X, time_embedding(T)], axis=1), single


def _rowwise_matmul(A, W):
    """``A @ W`` with a per-row summation order that does not depend on the batch.

    BLAS picks different kernels (and summation orders) depending on the
    batch size, which breaks bitwise agreement between single-row and batch
    evaluation. Unoptimized einsum accumulates each output element
    sequentially over the inner index.
    """
    return np.einsum("ij,jk->ik", A, W, optimize=False)


def _run(field: VelocityField, H, matmul=np.matmul):
    act = ACTIVATIONS[field.activation][0]
    pre, post = [], [H]
    n_layers = len(field.weights)
    for i, (W, b) in enumerate(zip(field.weights, field.biases)):
        Z = matmul(post[-1], W) + b
        if i < n_layers - 1:
            pre.append(Z)
            post.append(act(Z))
        else:
            out = Z
    return out, pre, post


def forward(field: VelocityField, t, x) -> np.ndarray:
    """Velocity at time(s) ``t`` for a point (d,) or a batch (n, d).

    Rows are evaluated independently: a batch gives bitwise the same rows as
    evaluating each point alone.
    """
    H, single = _prepare(field, t, x)
    out, _, _ = _run(field, H, _rowwise_matmul)
    return out[0] if single else out


def loss_and_grad(field: VelocityField, t, x_t, u_target):
    """Mean squared residual ``mean_i |u(t_i, x_i) - target_i|^2`` and its gradient.

    Gradients come back as a list aligned with ``field.params``.
    """
    H, _ = _prepare(field, t, x_t)
    U = np.asarray(u_target, dtype=float).reshape(H.shape[0], field.dim)
    if H.shape[0] == 0:
        raise ValueError("empty batch")
    with np.errstate(over="ignore", invalid="ignore"):
        out, pre, post = _run(field, H)
        resid = out - U
        n = H.shape[0]
        loss = float(np.sum(resid * resid) / n)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite network output or loss")

        dact = ACTIVATIONS[field.activation][1]
        grads = [None] * (2 * len(field.weights))
        delta = 2.0 * resid / n
        for i in range(len(field.weights) - 1, -1, -1):
            grads[2 * i] = post[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ field.weights[i].T) * dact(pre[i - 1])
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient")
    return loss, grads


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_field(cls, field: VelocityField, lr: float = 1e-3, **kw) -> "AdamState":
        zeros = [np.zeros_like(p) for p in field.params]
        return cls(zeros, [z.copy() for z in zeros], 0, lr, **kw)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v],
                         self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(field: VelocityField, state: AdamState, grads):
    params = field.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match the parameters")
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match the parameters")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)
    return VelocityField.from_params(new_p, field.dim, field.activation), new_state
