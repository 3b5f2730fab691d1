"""Minimal CNN building blocks on numpy arrays.

Layout conventions: images are (N, C, H, W) with H = time frames and W = mel
bands; vectors are (N, D). Parameters live in the dtype the layer was built
with (float32 for training, float64 for gradient checks); loss reductions
always accumulate in float64.

Convolutions run as one GEMM per sample over an im2col buffer built from
k*k shifted views, which keeps everything inside BLAS.
"""
from __future__ import annotations

import json

import numpy as np
from scipy.special import expit


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class Layer:
    """Base class; subclasses cache whatever backward needs during forward."""

    name = ""

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def params(self):
        """List of (attr_name, param_array, grad_array); empty if stateless."""
        return []

    def zero_grads(self):
        for _, _, g in self.params():
            g[...] = 0.0


class Conv2d(Layer):
    """Same-padded square convolution (odd kernel)."""

    def __init__(self, in_ch, out_ch, ksize=3, rng=0, dtype=np.float32):
        if ksize % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {ksize}")
        rng = _as_rng(rng)
        fan_in = in_ch * ksize * ksize
        scale = np.sqrt(2.0 / fan_in)
        self.W = (rng.standard_normal((out_ch, in_ch, ksize, ksize)) * scale).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self.ksize = ksize

    def params(self):
        return [("W", self.W, self.gW), ("b", self.b, self.gb)]

    def _im2col(self, x):
        n, c, h, w = x.shape
        k = self.ksize
        p = k // 2
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((n, c, k * k, h, w), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, :, di * k + dj] = xpad[:, :, di:di + h, dj:dj + w]
        return cols.reshape(n, c * k * k, h * w)

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        if c != self.W.shape[1]:
            raise ValueError(f"expected {self.W.shape[1]} input channels, got {c}")
        cols = self._im2col(x)
        w2 = self.W.reshape(self.W.shape[0], -1)
        y = np.matmul(w2, cols) + self.b[None, :, None]
        self._cols = cols
        self._hw = (h, w)
        return y.reshape(n, -1, h, w)

    def backward(self, dy):
        n = dy.shape[0]
        h, w = self._hw
        k = self.ksize
        p = k // 2
        out_ch, in_ch = self.W.shape[:2]
        dy2 = dy.reshape(n, out_ch, h * w)
        self.gb += dy2.sum(axis=(0, 2))
        self.gW += np.matmul(dy2, self._cols.transpose(0, 2, 1)).sum(axis=0) \
                     .reshape(self.W.shape)
        w2 = self.W.reshape(out_ch, -1)
        dcols = np.matmul(w2.T, dy2).reshape(n, in_ch, k * k, h, w)
        dxpad = np.zeros((n, in_ch, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for di in range(k):
            for dj in range(k):
                dxpad[:, :, di:di + h, dj:dj + w] += dcols[:, :, di * k + dj]
        self._cols = None
        return np.ascontiguousarray(dxpad[:, :, p:p + h, p:p + w])


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=0, dtype=np.float32):
        rng = _as_rng(rng)
        scale = np.sqrt(2.0 / in_dim)
        self.W = (rng.standard_normal((in_dim, out_dim)) * scale).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def params(self):
        return [("W", self.W, self.gW), ("b", self.b, self.gb)]

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        self.gW += self._x.T @ dy
        self.gb += dy.sum(axis=0)
        dx = dy @ self.W.T
        self._x = None
        return dx


class Relu(Layer):
    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0).astype(dy.dtype)


class Sigmoid(Layer):
    def forward(self, x, training=False, rng=None):
        self._y = expit(x).astype(x.dtype)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class ContextGate(Layer):
    """Channelwise gate y = x * sigmoid(Mx + b), M mixing channels pointwise."""

    def __init__(self, channels, rng=0, dtype=np.float32):
        rng = _as_rng(rng)
        scale = np.sqrt(1.0 / channels)
        self.W = (rng.standard_normal((channels, channels)) * scale).astype(dtype)
        self.b = np.zeros(channels, dtype=dtype)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    def params(self):
        return [("W", self.W, self.gW), ("b", self.b, self.gb)]

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        x2 = x.reshape(n, c, h * w)
        z = np.matmul(self.W, x2) + self.b[None, :, None]
        g = expit(z).astype(x.dtype)
        self._x2, self._g = x2, g
        return (x2 * g).reshape(x.shape)

    def backward(self, dy):
        n, c, h, w = dy.shape
        dy2 = dy.reshape(n, c, h * w)
        x2, g = self._x2, self._g
        dz = dy2 * x2 * g * (1.0 - g)
        self.gW += np.matmul(dz, x2.transpose(0, 2, 1)).sum(axis=0)
        self.gb += dz.sum(axis=(0, 2))
        dx2 = dy2 * g + np.matmul(self.W.T, dz)
        self._x2 = self._g = None
        return dx2.reshape(dy.shape)


class MaxPool2d(Layer):
    """Non-overlapping max pooling; gradient routes to the first argmax."""

    def __init__(self, pool_h, pool_w):
        self.pool = (pool_h, pool_w)

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        ph, pw = self.pool
        if h % ph or w % pw:
            raise ValueError(f"input {h}x{w} not divisible by pool {ph}x{pw}")
        ho, wo = h // ph, w // pw
        xr = x.reshape(n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5) \
              .reshape(n, c, ho, wo, ph * pw)
        self._idx = xr.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        n, c, h, w = self._shape
        ph, pw = self.pool
        ho, wo = h // ph, w // pw
        dxr = np.zeros((n, c, ho, wo, ph * pw), dtype=dy.dtype)
        np.put_along_axis(dxr, self._idx[..., None], dy[..., None], axis=-1)
        return dxr.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5) \
                  .reshape(n, c, h, w)


class AvgPool2d(Layer):
    def __init__(self, pool_h, pool_w):
        self.pool = (pool_h, pool_w)

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        ph, pw = self.pool
        if h % ph or w % pw:
            raise ValueError(f"input {h}x{w} not divisible by pool {ph}x{pw}")
        self._shape = x.shape
        return x.reshape(n, c, h // ph, ph, w // pw, pw).mean(axis=(3, 5),
                                                              dtype=x.dtype)

    def backward(self, dy):
        n, c, h, w = self._shape
        ph, pw = self.pool
        scaled = dy / (ph * pw)
        return np.broadcast_to(
            scaled[:, :, :, None, :, None], (n, c, h // ph, ph, w // pw, pw)
        ).reshape(n, c, h, w).astype(dy.dtype)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C)."""

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.mean(axis=(2, 3), dtype=x.dtype)

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), self._shape) \
                 .astype(dy.dtype)


class Dropout(Layer):
    """Inverted dropout; identity when not training."""

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= self.p)
        self._mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W). Not used by default."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return [("gamma", self.gamma, self.ggamma),
                ("beta", self.beta, self.gbeta)]

    def forward(self, x, training=False, rng=None):
        axes = (0, 2, 3)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1 - self.momentum) * mean).astype(x.dtype)
            self.running_var = (self.momentum * self.running_var
                                + (1 - self.momentum) * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        shape = (1, -1, 1, 1)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        self._xhat, self._inv, self._training = xhat.astype(x.dtype), inv, training
        return self.gamma.reshape(shape) * self._xhat + self.beta.reshape(shape)

    def backward(self, dy):
        shape = (1, -1, 1, 1)
        axes = (0, 2, 3)
        xhat, inv = self._xhat, self._inv
        self.ggamma += (dy * xhat).sum(axis=axes)
        self.gbeta += dy.sum(axis=axes)
        dxhat = dy * self.gamma.reshape(shape)
        if not self._training:
            return dxhat * inv.reshape(shape)
        term = dxhat - dxhat.mean(axis=axes).reshape(shape) \
            - xhat * (dxhat * xhat).mean(axis=axes).reshape(shape)
        return (term * inv.reshape(shape)).astype(dy.dtype)


class Flatten(Layer):
    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Network:
    """Plain layer stack with cached-activation backprop."""

    def __init__(self, layers):
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            layer.name = f"{i:02d}_{type(layer).__name__.lower()}"

    def forward(self, x, training=False, seed=None):
        rng = np.random.default_rng(seed) if training else None
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self):
        out = []
        for layer in self.layers:
            for pname, arr, grad in layer.params():
                out.append((f"{layer.name}.{pname}", arr, grad))
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def n_params(self):
        return sum(arr.size for _, arr, _ in self.params())


# --------------------------------------------------------------------- losses

_P_MIN, _P_MAX = 1e-7, 1.0 - 1e-7


def bce(pred, target):
    """Mean binary cross-entropy; probabilities clamped away from {0, 1}."""
    p = np.clip(pred.astype(np.float64), _P_MIN, _P_MAX)
    t = target.astype(np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log1p(-p))))


def bce_grad(pred, target):
    p = np.clip(pred.astype(np.float64), _P_MIN, _P_MAX)
    t = target.astype(np.float64)
    g = (p - t) / (p * (1.0 - p) * p.size)
    return g.astype(pred.dtype)


def mse(pred, target):
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(d * d))


def mse_grad(pred, target):
    d = pred.astype(np.float64) - target.astype(np.float64)
    return (2.0 * d / d.size).astype(pred.dtype)


# ------------------------------------------------------------------ optimizer

class Adam:
    """Bias-corrected Adam over a fixed (name, param, grad) slot list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.slots = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for _, p, _ in self.slots]
        self.v = [np.zeros_like(p) for _, p, _ in self.slots]

    def step(self, lr=None):
        if lr is not None:
            self.lr = lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (_, p, g) in enumerate(self.slots):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


# ------------------------------------------------------------- gradient check

def grad_check(loss_fn, params, samples_per_param=6, seed=0):
    """Max relative error between analytic and central-difference gradients.

    `loss_fn()` recomputes the scalar loss from the current parameter values
    and must not touch the grad arrays; the analytic gradients are read from
    the (name, param, grad) triples as-is.  The step size adapts to each
    entry's magnitude and is snapped to keep `value + h` exactly representable.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, param, grad in params:
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        n = min(samples_per_param, flat_p.size)
        picks = rng.choice(flat_p.size, size=n, replace=False)
        for idx in picks:
            orig = flat_p[idx].item()
            h = min(max(1e-6, 1e-4 * max(1.0, abs(orig))), 1e-3)
            flat_p[idx] = orig + h
            hi = (flat_p[idx] - orig).item()  # actual applied step
            lp = loss_fn()
            flat_p[idx] = orig - h
            lo = (orig - flat_p[idx]).item()
            lm = loss_fn()
            flat_p[idx] = orig
            fd = (lp - lm) / (hi + lo)
            an = flat_g[idx].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


# ----------------------------------------------------------------- checkpoint

def save_params(path, net: Network, meta: dict | None = None) -> None:
    """Write all parameters plus a JSON metadata blob to one .npz file."""
    arrays = {}
    for name, arr, _ in net.params():
        arrays[name.replace(".", "/")] = arr
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    np.savez(path, **arrays)


def load_params(path, net: Network) -> dict:
    """Restore parameters in place; raises on any name/shape mismatch."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        stored = {k for k in data.files if k != "__meta__"}
        wanted = {name.replace(".", "/") for name, _, _ in net.params()}
        if stored != wanted:
            extra = sorted(stored - wanted)
            lacking = sorted(wanted - stored)
            raise ValueError(
                f"{path}: parameter names do not match the network"
                f" (unexpected: {extra}, missing: {lacking})"
            )
        for name, arr, _ in net.params():
            src = data[name.replace(".", "/")]
            if src.shape != arr.shape:
                raise ValueError(
                    f"{path}: shape mismatch for {name}:"
                    f" checkpoint {src.shape} vs network {arr.shape}"
                )
            arr[...] = src.astype(arr.dtype)
    return meta
