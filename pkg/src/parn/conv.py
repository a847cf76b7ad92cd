"""Convolutional building blocks: conv2d, batch norm, max pooling, linear.

Activations flow through these layers in channels-last (B, H, W, C) buffers;
that layout makes the k x k convolution a sum of k^2 shifted GEMMs, which is
the fastest arrangement for CPU BLAS here. Kernel weights keep the
conventional (outC, inC, k, k) layout publicly and in checkpoints.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, ContractError, Tensor, make_node

__all__ = [
    "Conv2d", "BatchNorm2d", "Linear", "conv2d", "batchnorm2d",
    "maxpool2x2", "fully_connected", "nchw_to_nhwc", "nhwc_to_nchw",
]


def nchw_to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def nhwc_to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv_out_dim(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding.

    x: (B, H, W, inC); weight: (outC, inC, k, k); bias: (outC,) or None.
    Returns (B, H', W', outC).
    """
    B, H, W, C = x.data.shape
    OC, IC, kh, kw = weight.data.shape
    if IC != C:
        raise DimensionError(
            f"conv2d: input has {C} channels but weight expects {IC}")
    Ho = conv_out_dim(H, kh, padding, stride)
    Wo = conv_out_dim(W, kw, padding, stride)
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"conv2d: output dims {Ho}x{Wo} collapse for input {H}x{W}, "
            f"k={kh}, pad={padding}, stride={stride}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    # taps[dr][dc]: (inC, outC) slice of the kernel, GEMM-ready
    taps = [[np.ascontiguousarray(weight.data[:, :, dr, dc].T)
             for dc in range(kw)] for dr in range(kh)]

    out = np.zeros((B, Ho, Wo, OC), dtype=x.data.dtype)
    flat = out.reshape(-1, OC)
    for dr in range(kh):
        for dc in range(kw):
            xs = np.ascontiguousarray(
                xp[:, dr:dr + stride * Ho:stride, dc:dc + stride * Wo:stride, :]
            ).reshape(-1, C)
            flat += xs @ taps[dr][dc]
    if bias is not None:
        out += bias.data

    def bwd(g):
        gf = np.ascontiguousarray(g).reshape(-1, OC)
        need_dx = x.requires_grad or x._parents
        if weight.requires_grad or weight._parents:
            dw = np.zeros_like(weight.data)
            for dr in range(kh):
                for dc in range(kw):
                    xs = np.ascontiguousarray(
                        xp[:, dr:dr + stride * Ho:stride, dc:dc + stride * Wo:stride, :]
                    ).reshape(-1, C)
                    dw[:, :, dr, dc] = (xs.T @ gf).T
            weight.accumulate_grad(dw)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias.accumulate_grad(gf.sum(axis=0))
        if need_dx:
            dxp = np.zeros_like(xp)
            for dr in range(kh):
                for dc in range(kw):
                    contrib = (gf @ taps[dr][dc].T).reshape(B, Ho, Wo, C)
                    dxp[:, dr:dr + stride * Ho:stride,
                        dc:dc + stride * Wo:stride, :] += contrib
            if padding:
                dx = np.ascontiguousarray(dxp[:, padding:padding + H, padding:padding + W, :])
            else:
                dx = dxp
            x.accumulate_grad(dx)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_node(out, parents, bwd, "conv2d")


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    B, H, W, C = x.data.shape
    OC = weight.data.shape[0]
    w2 = np.ascontiguousarray(weight.data.reshape(OC, C).T)  # (C, OC)
    out = (x.data.reshape(-1, C) @ w2).reshape(B, H, W, OC)
    if bias is not None:
        out += bias.data

    def bwd(g):
        gf = g.reshape(-1, OC)
        if weight.requires_grad or weight._parents:
            dw = (x.data.reshape(-1, C).T @ gf).T.reshape(weight.data.shape)
            weight.accumulate_grad(dw)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias.accumulate_grad(gf.sum(axis=0))
        if x.requires_grad or x._parents:
            x.accumulate_grad((gf @ w2.T).reshape(x.data.shape))

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_node(out, parents, bwd, "conv1x1")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B, H, W) with affine output.

    Training mode normalizes by batch statistics and updates the running
    moments in place (exponential moving average, unbiased variance for the
    running estimate). Inference mode normalizes by the running moments.
    """
    B, H, W, C = x.data.shape
    n = B * H * W
    if training:
        if n <= 1:
            raise ContractError(
                "batchnorm2d: training statistics degenerate for a single element")
        mean = x.data.mean(axis=(0, 1, 2))
        centered = x.data - mean
        var = np.mean(centered * centered, axis=(0, 1, 2))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * invstd
    out = xhat * gamma.data + beta.data
    out = out.astype(x.data.dtype, copy=False)

    def bwd(g):
        if gamma.requires_grad or gamma._parents:
            gamma.accumulate_grad(np.sum(g * xhat, axis=(0, 1, 2)))
        if beta.requires_grad or beta._parents:
            beta.accumulate_grad(np.sum(g, axis=(0, 1, 2)))
        if x.requires_grad or x._parents:
            if training:
                gs = np.sum(g, axis=(0, 1, 2))
                gxs = np.sum(g * xhat, axis=(0, 1, 2))
                dx = (gamma.data * invstd / n) * (n * g - gs - xhat * gxs)
            else:
                dx = g * (gamma.data * invstd)
            x.accumulate_grad(dx.astype(x.data.dtype, copy=False))

    return make_node(out, (x, gamma, beta), bwd, "batchnorm2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (floor division of odd dims).

    Gradient routes to the first maximal element of each window in
    row-major window order, so ties are deterministic.
    """
    B, H, W, C = x.data.shape
    if H < 2 or W < 2:
        raise DimensionError(f"maxpool2x2: spatial dims {H}x{W} too small")
    Ho, Wo = H // 2, W // 2
    crop = x.data[:, :Ho * 2, :Wo * 2, :]
    win = np.ascontiguousarray(
        crop.reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 2, 4, 5)
    ).reshape(B, Ho, Wo, 4, C)
    arg = np.argmax(win, axis=3)  # first occurrence wins on ties
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dx = np.zeros_like(x.data)
        dx[:, :Ho * 2, :Wo * 2, :] = (
            dwin.reshape(B, Ho, Wo, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
            .reshape(B, Ho * 2, Wo * 2, C))
        x.accumulate_grad(dx)

    return make_node(out, (x,), bwd, "maxpool2x2")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (B, D) @ (D, M) + (M,)."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"fully_connected: {x.data.shape} incompatible with weights "
            f"{weight.data.shape}")
    out = x.data @ weight.data + bias.data

    def bwd(g):
        if x.requires_grad or x._parents:
            x.accumulate_grad(g @ weight.data.T)
        if weight.requires_grad or weight._parents:
            weight.accumulate_grad(x.data.T @ g)
        if bias.requires_grad or bias._parents:
            bias.accumulate_grad(g.sum(axis=0))

    return make_node(out, (x, weight, bias), bwd, "fully_connected")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """Stateful conv layer: weights (outC, inC, k, k) plus optional bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 zero_init: bool = False):
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ContractError("Conv2d: bad kernel/stride/padding")
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        if zero_init:
            w = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype)
        else:
            w = _kaiming_uniform(
                rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.weight = Tensor(w, requires_grad=True)
        if bias:
            b = (np.zeros(out_channels, dtype) if zero_init else
                 _kaiming_uniform(rng, (out_channels,), fan_in, dtype))
            self.bias = Tensor(b, requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class BatchNorm2d:
    """Batch norm layer holding affine params and running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, self.training, self.momentum,
                           self.eps)

    def parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class Linear:
    """Fully connected layer: weights (D, M), bias (M,)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.weight = Tensor(
            _kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
            requires_grad=True)
        self.bias = Tensor(
            _kaiming_uniform(rng, (out_features,), in_features, dtype),
            requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias
