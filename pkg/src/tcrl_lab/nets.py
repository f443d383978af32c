"""Small numpy MLP with hand-written backprop and interval propagation."""
from __future__ import annotations

import numpy as np


class MLP:
    """Fully connected ReLU network; the output layer is linear.

    Parameters are stored per layer and exposed as one flat vector in the
    order W0, b0, W1, b1, ...
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        i = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = flat[i:i + w.size].reshape(w.shape).copy()
            i += w.size
            self.biases[k] = flat[i:i + b.size].copy()
            i += b.size

    def copy(self) -> "MLP":
        twin = MLP.__new__(MLP)
        twin.sizes = self.sizes
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def forward(self, x):
        h = np.atleast_2d(np.asarray(x, dtype=float))
        cache = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if k == last else np.maximum(z, 0.0)
            cache.append(z)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout, need_params: bool = True):
        """Return (flat parameter gradient summed over rows, input gradient)."""
        g = np.asarray(dout, dtype=float)
        grads = []
        n = len(self.weights)
        for k in range(n - 1, -1, -1):
            z = cache[k + 1]
            if k != n - 1:
                g = g * (z > 0)
            h_in = cache[0] if k == 0 else np.maximum(cache[k], 0.0)
            if need_params:
                grads.append((h_in.T @ g, g.sum(axis=0)))
            g = g @ self.weights[k].T
        flat = None
        if need_params:
            parts = []
            for gw, gb in reversed(grads):
                parts += [gw.ravel(), gb]
            flat = np.concatenate(parts)
        return flat, g

    def interval(self, lo, hi):
        """Sound output bounds over the input box [lo, hi] (interval arithmetic)."""
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
            lo, hi = lo @ wp + hi @ wn + b, hi @ wp + lo @ wn + b
            if k != last:
                lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        return lo, hi


class Adam:
    def __init__(self, n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        """Descent step on ``grad``; returns new parameters."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load(self, state: dict) -> None:
        self.m = np.asarray(state["m"], dtype=float).copy()
        self.v = np.asarray(state["v"], dtype=float).copy()
        self.t = int(state["t"])
