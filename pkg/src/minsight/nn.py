"""Minimal numpy layers with hand-written backward passes (NHWC layout)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> "Layer":
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        return self


class Conv2D(Layer):
    """k x k convolution, weights (k, k, cin, cout), zero padding ``pad``."""

    def __init__(self, cin, cout, k=3, stride=1, pad=None, rng=None, dtype=np.float32):
        super().__init__()
        self.k, self.stride = k, stride
        self.pad = (k - 1) // 2 if pad is None else pad
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (k * k * cin))
        self.params["W"] = (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)

    def out_shape(self, h, w):
        s, p, k = self.stride, self.pad, self.k
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        W, b = self.params["W"], self.params["b"]
        k, s, p = self.k, self.stride, self.pad
        n, h, w, c = x.shape
        if c != W.shape[2]:
            raise ValueError(f"conv expects {W.shape[2]} input channels, got {c}")
        ho, wo = self.out_shape(h, w)
        self._xshape = x.shape
        if k == 1 and p == 0:
            cols = x[:, ::s, ::s, :].reshape(-1, c)
        else:
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
            win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * c)
        self._cols = cols
        y = cols @ W.reshape(-1, W.shape[3]) + b
        return y.reshape(n, ho, wo, -1)

    def backward(self, dy):
        W = self.params["W"]
        k, s, p = self.k, self.stride, self.pad
        n, h, w, c = self._xshape
        ho, wo = dy.shape[1:3]
        d2 = dy.reshape(-1, dy.shape[3])
        self.grads["W"] = (self._cols.T @ d2).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = d2 @ W.reshape(-1, W.shape[3]).T
        self._cols = None
        if k == 1 and p == 0:
            dx = np.zeros(self._xshape, dtype=dy.dtype)
            dx[:, ::s, ::s, :][:, :ho, :wo] = dcols.reshape(n, ho, wo, c)
            return dx
        dcols = dcols.reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p : p + h, p : p + w, :] if p else dxp


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._mask, dy, 0).astype(dy.dtype, copy=False)


class Identity(Layer):
    """Stand-in activation for the linear-only gradient check."""

    def forward(self, x):
        return x

    def backward(self, dy):
        return dy


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells floor(i*n_in/n_out) .. ceil((i+1)*n_in/n_out)."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a = (i * n_in) // n_out
        b = -((-(i + 1) * n_in) // n_out)
        m[i, a:b] = 1.0 / (b - a)
    return m


class AdaptiveAvgPool(Layer):
    """Average pooling to a fixed (out_h, out_w) grid whatever the input size."""

    def __init__(self, out_h: int, out_w: int):
        super().__init__()
        self.out_h, self.out_w = out_h, out_w

    def forward(self, x):
        self._mh = _pool_matrix(x.shape[1], self.out_h).astype(x.dtype)
        self._mw = _pool_matrix(x.shape[2], self.out_w).astype(x.dtype)
        return np.einsum("ih,nhwc,jw->nijc", self._mh, x, self._mw, optimize=True)

    def backward(self, dy):
        return np.einsum("ih,nijc,jw->nhwc", self._mh, dy, self._mw, optimize=True)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape((len(x),) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        n, h, w, c = dy.shape
        return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Dense(Layer):
    def __init__(self, fin, fout, rng=None, dtype=np.float32, zero=False, gain=2.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if zero:
            self.params["W"] = np.zeros((fin, fout), dtype=dtype)
        else:
            self.params["W"] = (rng.standard_normal((fin, fout)) * np.sqrt(gain / fin)).astype(dtype)
        self.params["b"] = np.zeros(fout, dtype=dtype)

    def forward(self, x):
        if x.shape[1] != self.params["W"].shape[0]:
            raise ValueError(f"dense expects {self.params['W'].shape[0]} features, got {x.shape[1]}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        self.grads["W"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        self._x = None
        return dy @ self.params["W"].T


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self):
        """(layer index, name, array) in checkpoint order."""
        return [(i, k, layer.params[k]) for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def n_params(self) -> int:
        return int(sum(p.size for _, _, p in self.parameters()))

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self


class Adam:
    def __init__(self, net: Sequential, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net, self.lr, self.b1, self.b2, self.eps = net, lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for _, _, p in net.parameters()]
        self.v = [np.zeros_like(p) for _, _, p in net.parameters()]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for (_, _, p), g, m, v in zip(self.net.parameters(), self.net.gradients(), self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient; ``mask`` broadcasts over ``pred``."""
    diff = pred - target
    if mask is None:
        count = diff.size
    else:
        diff = diff * mask
        count = float(np.broadcast_to(mask, pred.shape).sum())
    loss = float(np.sum(diff.astype(np.float64) ** 2) / count)
    return loss, (2.0 / count) * diff
