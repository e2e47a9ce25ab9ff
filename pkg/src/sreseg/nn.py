"""Dense NCHW layers with hand-written forward and backward passes.

Every layer keeps the arrays it needs for ``backward`` only when
``forward`` is called with ``need_grad=True`` (the default in train mode),
so large inference passes do not hold intermediate buffers.

Layers expose ``params`` and ``grads`` dicts keyed by parameter name;
``backward(dout)`` fills ``grads`` and returns the gradient w.r.t. the
layer input.
"""
from __future__ import annotations

import numpy as np

from .kernel import expand_kernel, fold_gradient, ring_index_map

SRE = "sre"
STANDARD = "standard"


def rot90(x, quarter_turns: int = 1) -> np.ndarray:
    """Rotate every spatial plane (last two axes) counter-clockwise."""
    return np.rot90(x, int(quarter_turns) % 4, axes=(-2, -1))


def _check_nchw(x, name="x"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be a 4-D (N, C, H, W) array, got shape {x.shape}")
    return x


def _float_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")
    return dtype


class Layer:
    """Base class; subclasses implement ``forward`` and ``backward``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False, need_grad=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, train=False, need_grad=None):
        return self.forward(x, train=train, need_grad=need_grad)

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def __repr__(self):
        return f"{type(self).__name__}()"


def _want(train, need_grad):
    return train if need_grad is None else need_grad


# ---------------------------------------------------------------------------
# convolution


def _pad(x, h):
    if h == 0:
        return x
    N, C, H, W = x.shape
    xp = np.zeros((N, C, H + 2 * h, W + 2 * h), dtype=x.dtype)
    xp[:, :, h : h + H, h : h + W] = x
    return xp


# the shifted-add stencils are memory bound; working on a few planes at a time keeps them in cache
_CHUNK_PIXELS = 1 << 16


def _plane_chunks(n_planes, plane_size):
    step = max(1, _CHUNK_PIXELS // plane_size)
    return [slice(s, min(s + step, n_planes)) for s in range(0, n_planes, step)]


def _ring_sums(x, rmap):
    """Per-ring means of shifted copies of ``x``: (N, C, H, W) -> (N, C, bands, H, W)."""
    N, C, H, W = x.shape
    planes = x.reshape(N * C, 1, H, W)
    out = np.empty((N * C, rmap.bands, H, W), dtype=x.dtype)
    for sl in _plane_chunks(N * C, H * W):
        out[sl] = _ring_sums_block(planes[sl], rmap)[:, 0]
    return out.reshape(N, C, rmap.bands, H, W)


def _ring_sums_adjoint(g, rmap):
    """Adjoint of :func:`_ring_sums`: (N, C, bands, H, W) -> (N, C, H, W)."""
    N, C, B, H, W = g.shape
    planes = g.reshape(N * C, 1, B, H, W)
    dx = np.empty((N * C, H, W), dtype=g.dtype)
    for sl in _plane_chunks(N * C, H * W):
        dx[sl] = _ring_sums_adjoint_block(planes[sl], rmap)[:, 0]
    return dx.reshape(N, C, H, W)


def _ring_sums_block(x, rmap):
    """Unchunked :func:`_ring_sums`.

    Horizontal offsets +b and -b are paired first since every ring is
    mirror-symmetric, which cuts the number of full-size adds by ~40%.
    """
    N, C, H, W = x.shape
    h = rmap.k // 2
    out = np.zeros((N, C, rmap.bands, H, W), dtype=x.dtype)
    if h == 0:
        out[:, :, 0] = x
        return out
    xp = _pad(x, h)
    ring = rmap.ring_of
    # pair[b][:, :, row, col] = xp[row, col + h + b] + xp[row, col + h - b]
    pair = [xp[:, :, :, h : h + W]]
    for b in range(1, h + 1):
        pair.append(xp[:, :, :, h + b : h + b + W] + xp[:, :, :, h - b : h - b + W])
    for a in range(0, h + 1):
        for b in range(0, h + 1):
            r = ring[h + a, h + b]
            if r < 0:
                continue
            dst = out[:, :, r]
            np.add(dst, pair[b][:, :, h + a : h + a + H], out=dst)
            if a:
                np.add(dst, pair[b][:, :, h - a : h - a + H], out=dst)
    inv = (1.0 / rmap.cardinality).astype(x.dtype)
    out *= inv[None, None, :, None, None]
    return out


def _ring_sums_adjoint_block(g, rmap):
    """Unchunked :func:`_ring_sums_adjoint`.

    Rings are symmetric under negation of the offset, so the adjoint is the
    same stencil applied per band and summed.
    """
    N, C, B, H, W = g.shape
    h = rmap.k // 2
    inv = (1.0 / rmap.cardinality).astype(g.dtype)
    if h == 0:
        return g[:, :, 0] * inv[0]
    ring = rmap.ring_of
    gp = np.zeros((N, C, B, H + 2 * h, W + 2 * h), dtype=g.dtype)
    np.multiply(g, inv[None, None, :, None, None], out=gp[:, :, :, h : h + H, h : h + W])
    # column-stage accumulators, one per horizontal offset b >= 0
    cols = np.zeros((h + 1, N, C, H, W + 2 * h), dtype=g.dtype)
    for a in range(0, h + 1):
        for b in range(0, h + 1):
            r = ring[h + a, h + b]
            if r < 0:
                continue
            dst = cols[b]
            np.add(dst, gp[:, :, r, h + a : h + a + H], out=dst)
            if a:
                np.add(dst, gp[:, :, r, h - a : h - a + H], out=dst)
    dx = cols[0][:, :, :, h : h + W].copy()
    for b in range(1, h + 1):
        dx += cols[b][:, :, :, h + b : h + b + W]
        dx += cols[b][:, :, :, h - b : h - b + W]
    return dx


def _im2col(x, k):
    """(N, C, H, W) -> (N, C * k * k, H * W) for stride 1, same padding."""
    N, C, H, W = x.shape
    if k == 1:
        return x.reshape(N, C, H * W)
    h = k // 2
    xp = _pad(x, h)
    cols = np.empty((N, C, k * k, H, W), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u * k + v] = xp[:, :, u : u + H, v : v + W]
    return cols.reshape(N, C * k * k, H * W)


def _col2im(cols, shape, k):
    N, C, H, W = shape
    if k == 1:
        return cols.reshape(N, C, H, W)
    h = k // 2
    cols = cols.reshape(N, C, k * k, H, W)
    dxp = np.zeros((N, C, H + 2 * h, W + 2 * h), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + H, v : v + W] += cols[:, :, u * k + v]
    return dxp[:, :, h : h + H, h : h + W]


def _dense_conv_forward(x, kernel, bias):
    """Cross-correlation with dense (Cout, Cin, k, k) kernels; returns (out, cols)."""
    N, C, H, W = x.shape
    Cout, _, k, _ = kernel.shape
    cols = _im2col(x, k)
    out = np.matmul(kernel.reshape(Cout, -1), cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(N, Cout, H, W), cols


def _dense_conv_backward(dout, cols, kernel, x_shape):
    N, Cout, H, W = dout.shape
    k = kernel.shape[-1]
    dy = dout.reshape(N, Cout, H * W)
    dk = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    dcols = np.matmul(kernel.reshape(Cout, -1).T, dy)
    dx = _col2im(dcols, x_shape, k)
    db = dy.sum(axis=(0, 2))
    return dx, dk, db


def _init_weight(rng, shape, fan_in, dtype):
    rng = np.random.default_rng(rng)
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class Conv2d(Layer):
    """Standard stride-1 'same' convolution with dense k x k filters."""

    kind = STANDARD

    def __init__(self, in_channels, out_channels, kernel_size, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        k = int(kernel_size)
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
        self.in_channels, self.out_channels, self.k = int(in_channels), int(out_channels), k
        dtype = _float_dtype(dtype)
        self.params["weight"] = _init_weight(rng, (out_channels, in_channels, k, k), in_channels * k * k, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def dense_kernel(self):
        return self.params["weight"]

    def forward(self, x, train=False, need_grad=None):
        x = _check_nchw(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        out, cols = _dense_conv_forward(x, self.params["weight"], self.params.get("bias"))
        self._cache = (cols, x.shape) if _want(train, need_grad) else None
        return out

    def backward(self, dout):
        cols, x_shape = self._cache
        dx, dk, db = _dense_conv_backward(dout, cols, self.params["weight"], x_shape)
        self.grads["weight"] = dk
        if "bias" in self.params:
            self.grads["bias"] = db
        return dx

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, k={self.k})"


class SREConv2d(Layer):
    """Convolution whose filters are constant on concentric rings.

    ``weight`` has shape (out, in, bands).  With ``method="ring"`` the layer
    computes per-ring mean maps of the input and mixes them with a single
    matrix product, which is much cheaper than the dense path for large k.
    ``method="dense"`` expands the kernels, convolves densely and folds the
    kernel gradient back onto the rings; both give the same result.
    """

    kind = SRE

    def __init__(self, in_channels, out_channels, kernel_size, bias=True, rng=None,
                 dtype=np.float32, method="ring"):
        super().__init__()
        self.ring_map = ring_index_map(kernel_size)
        if method not in ("ring", "dense"):
            raise ValueError(f"method must be 'ring' or 'dense', got {method!r}")
        self.method = method
        k = self.ring_map.k
        self.in_channels, self.out_channels, self.k = int(in_channels), int(out_channels), k
        dtype = _float_dtype(dtype)
        self.params["weight"] = _init_weight(
            rng, (out_channels, in_channels, self.ring_map.bands), in_channels * k * k, dtype
        )
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()

    def dense_kernel(self):
        return expand_kernel(self.params["weight"], self.ring_map)

    def forward(self, x, train=False, need_grad=None):
        x = _check_nchw(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        keep = _want(train, need_grad)
        bias = self.params.get("bias")
        if self.method == "dense":
            out, cols = _dense_conv_forward(x, self.dense_kernel(), bias)
            self._cache = (cols, x.shape) if keep else None
            return out
        N, C, H, W = x.shape
        R = _ring_sums(x, self.ring_map).reshape(N, C * self.ring_map.bands, H * W)
        Wm = self.params["weight"].reshape(self.out_channels, -1)
        out = np.matmul(Wm, R)
        if bias is not None:
            out += bias[None, :, None]
        self._cache = (R, x.shape) if keep else None
        return out.reshape(N, self.out_channels, H, W)

    def backward(self, dout):
        if self.method == "dense":
            cols, x_shape = self._cache
            dense = self.dense_kernel()
            dx, dk, db = _dense_conv_backward(dout, cols, dense, x_shape)
            self.grads["weight"] = fold_gradient(dk, self.ring_map).astype(dense.dtype)
        else:
            R, x_shape = self._cache
            N, C, H, W = x_shape
            B = self.ring_map.bands
            dy = dout.reshape(N, self.out_channels, H * W)
            Wm = self.params["weight"].reshape(self.out_channels, -1)
            self.grads["weight"] = (
                np.matmul(dy, R.transpose(0, 2, 1)).sum(axis=0).reshape(self.params["weight"].shape)
            )
            dR = np.matmul(Wm.T, dy).reshape(N, C, B, H, W)
            dx = _ring_sums_adjoint(dR, self.ring_map)
            db = dy.sum(axis=(0, 2))
        if "bias" in self.params:
            self.grads["bias"] = db
        return dx

    def __repr__(self):
        return f"SREConv2d({self.in_channels}, {self.out_channels}, k={self.k})"


def conv2d(x, layer, train=False):
    """Functional form: apply a convolution layer to ``x``."""
    return layer.forward(x, train=train)


# ---------------------------------------------------------------------------
# pooling, normalization, activations


class AvgPool2(Layer):
    """Non-overlapping 2x2 mean pooling."""

    def forward(self, x, train=False, need_grad=None):
        x = _check_nchw(x)
        N, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
        self._cache = x.shape if _want(train, need_grad) else None
        return x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(self, dout):
        g = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3)
        return g * g.dtype.type(0.25)


class GlobalAvgPool(Layer):
    """Per-channel spatial mean, output (N, C, 1, 1)."""

    def forward(self, x, train=False, need_grad=None):
        x = _check_nchw(x)
        self._cache = x.shape if _want(train, need_grad) else None
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout):
        N, C, H, W = self._cache
        return np.broadcast_to(dout / (H * W), (N, C, H, W)).copy()


class BatchNorm2d(Layer):
    """Per-channel standardization with running statistics and affine scale/shift.

    Running stats follow ``new = momentum * old + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        dtype = _float_dtype(dtype)
        self.channels, self.momentum, self.eps = int(channels), float(momentum), float(eps)
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.state["running_mean"] = np.zeros(channels, dtype=dtype)
        self.state["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False, need_grad=None):
        x = _check_nchw(x)
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            N, C, H, W = x.shape
            m = N * H * W
            if m < 2:
                raise ValueError("train-mode normalization needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean[None, :, None, None]
            var = np.einsum("nchw,nchw->c", xc, xc) / m
            mom = self.momentum
            rm, rv = self.state["running_mean"], self.state["running_var"]
            self.state["running_mean"] = (mom * rm + (1 - mom) * mean).astype(rm.dtype)
            self.state["running_var"] = (mom * rv + (1 - mom) * var * (m / (m - 1))).astype(rv.dtype)
        else:
            mean, var = self.state["running_mean"], self.state["running_var"]
            xc = x - mean[None, :, None, None]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train) if _want(train, need_grad) else None
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        N, C, H, W = dout.shape
        m = N * H * W
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = np.einsum("nchw,nchw->c", dxhat, xhat)[None, :, None, None]
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


def channel_affine_norm(x, layer: BatchNorm2d, mode="eval"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return layer.forward(x, train=mode == "train")


class ReLU(Layer):
    def forward(self, x, train=False, need_grad=None):
        out = np.maximum(x, 0)
        self._cache = out if _want(train, need_grad) else None
        return out

    def backward(self, dout):
        return dout * (self._cache > 0)


def relu(x):
    return np.maximum(x, 0)


class Linear(Layer):
    """y = x W^T + b with W of shape (out, in).  ``zero_init`` starts at W = 0."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, zero_init=False):
        super().__init__()
        dtype = _float_dtype(dtype)
        self.in_features, self.out_features = int(in_features), int(out_features)
        if zero_init:
            self.params["weight"] = np.zeros((out_features, in_features), dtype=dtype)
        else:
            self.params["weight"] = _init_weight(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False, need_grad=None):
        x = np.asarray(x)
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ValueError(f"expected {self.in_features} features, got {x2.shape[1]}")
        self._cache = (x2, x.shape) if _want(train, need_grad) else None
        return x2 @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout):
        x2, shape = self._cache
        self.grads["weight"] = dout.T @ x2
        self.grads["bias"] = dout.sum(axis=0)
        return (dout @ self.params["weight"]).reshape(shape)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


def linear(x, W, b):
    x = np.asarray(x)
    W = np.asarray(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"incompatible shapes {x.shape} and {W.shape}")
    return x @ W.T + b


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, K), got shape {logits.shape}")
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"labels must have shape ({N},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must be integers in [0, {K})")
    top = logits.argmax(axis=1)
    z = logits - logits[np.arange(N), top][:, None]
    # log(1 + rest) with the max term removed stays accurate when rest is tiny
    e = np.exp(z)
    e[np.arange(N), top] = 0
    logsum = np.log1p(e.sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(N), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(N), labels] -= 1
    return float(loss), grad / N
