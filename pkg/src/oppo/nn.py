"""Small ReLU feedforward network with hand-written backprop and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FeedForwardNet:
    """ReLU hidden layers, identity output. Inputs are row batches ``(B, n_in)``."""

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least input and output sizes, all positive")
        self.layer_sizes = tuple(sizes)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                W = np.zeros((n_in, n_out))
            else:
                W = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            self.weights.append(W)
            self.biases.append(np.zeros(n_out))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "FeedForwardNet":
        other = FeedForwardNet(self.layer_sizes)
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.layer_sizes[0]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts, single

    def forward(self, x: np.ndarray) -> np.ndarray:
        acts, single = self._forward(x)
        return acts[-1][0] if single else acts[-1]

    __call__ = forward

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradient of sum(output * grad_out) w.r.t. ``params`` (same order)."""
        acts, single = self._forward(x)
        g = np.asarray(grad_out, dtype=float)
        if single:
            g = g[None, :]
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            g = g @ self.weights[i].T
        grads.reverse()
        return grads


@dataclass
class Adam:
    """Adam on a list of arrays; ``step`` updates them in place (descent)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_arrays(self, d: dict) -> None:
        self.t = int(d["t"])
        k = sum(1 for key in d if key.startswith("m"))
        self.m = [np.array(d[f"m{i}"]) for i in range(k)]
        self.v = [np.array(d[f"v{i}"]) for i in range(k)]


def update(net: FeedForwardNet, opt: Adam, grads: list[np.ndarray]) -> FeedForwardNet:
    params = net.params
    opt.step(params, grads)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise FloatingPointError("non-finite parameter after update")
    return net


def one_hot(index, num: int) -> np.ndarray:
    """Unit basis vector(s); accepts a scalar or an integer array of indices."""
    idx = np.asarray(index)
    if np.any(idx < 0) or np.any(idx >= num):
        raise IndexError(f"index out of range for {num} states")
    return np.eye(num)[idx]
