"""Deformable 2-D convolution.

Each of the k*k kernel taps samples the input at its integer grid position
plus a learned fractional (dx, dy) offset, interpolated bilinearly with
zero outside the feature map (consistent with zero padding). Offsets come
from an auxiliary convolution over the same input whose output has one
(dx, dy) pair per tap per output position: channels [2i, 2i+1] hold tap
i's (dx, dy), taps in row-major kernel order.

Coordinates: x indexes columns (width), y indexes rows (height).
"""

from __future__ import annotations

import numpy as np

from .conv import Conv2d, conv_out_dim
from .tensor import (DimensionError, NumericError, Tensor, make_node,
                     reshape as treshape, transpose as ttranspose)

__all__ = ["DeformConv2d", "bilinear_sample", "deform_conv2d", "predict_offsets"]


def bilinear_sample(feature: Tensor, x, y) -> Tensor:
    """Sample a (C, H, W) feature at fractional position (x, y).

    Returns the length-C interpolated vector. Positions fully outside
    [-1, W] x [-1, H] give zero; partially overlapping positions use zero
    for the missing neighbors. Differentiable w.r.t. the feature values and
    w.r.t. the coordinates when they are passed as scalar Tensors.
    """
    if feature.data.ndim != 3:
        raise DimensionError(f"bilinear_sample expects (C,H,W), got {feature.shape}")
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, feature.data.dtype))
    yt = y if isinstance(y, Tensor) else Tensor(np.asarray(y, feature.data.dtype))
    xv, yv = float(xt.data), float(yt.data)
    if not (np.isfinite(xv) and np.isfinite(yv)):
        raise NumericError(f"bilinear_sample: non-finite position ({xv}, {yv})")
    C, H, W = feature.data.shape
    x0, y0 = int(np.floor(xv)), int(np.floor(yv))
    fx, fy = xv - x0, yv - y0

    def corner(cy, cx):
        if 0 <= cy < H and 0 <= cx < W:
            return feature.data[:, cy, cx]
        return np.zeros(C, dtype=feature.data.dtype)

    v00, v01 = corner(y0, x0), corner(y0, x0 + 1)
    v10, v11 = corner(y0 + 1, x0), corner(y0 + 1, x0 + 1)
    w00, w01 = (1 - fy) * (1 - fx), (1 - fy) * fx
    w10, w11 = fy * (1 - fx), fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bwd(g):
        if feature.requires_grad or feature._parents:
            df = np.zeros_like(feature.data)
            for (cy, cx), w in (((y0, x0), w00), ((y0, x0 + 1), w01),
                                ((y0 + 1, x0), w10), ((y0 + 1, x0 + 1), w11)):
                if 0 <= cy < H and 0 <= cx < W:
                    df[:, cy, cx] += w * g
            feature.accumulate_grad(df)
        if xt.requires_grad or xt._parents:
            dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            xt.accumulate_grad(np.asarray(np.dot(g, dvdx), xt.data.dtype).reshape(xt.data.shape))
        if yt.requires_grad or yt._parents:
            dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            yt.accumulate_grad(np.asarray(np.dot(g, dvdy), yt.data.dtype).reshape(yt.data.shape))

    return make_node(out, (feature, xt, yt), bwd, "bilinear_sample")


def _tap_positions(B, Ho, Wo, stride, padding, dr, dc, off_x, off_y, dtype):
    base_y = (np.arange(Ho, dtype=dtype) * stride - padding + dr)[None, :, None]
    base_x = (np.arange(Wo, dtype=dtype) * stride - padding + dc)[None, None, :]
    return base_x + off_x, base_y + off_y


def _corner_gather(xflat, bidx, yc, xc, H, W, C):
    valid = ((yc >= 0) & (yc < H) & (xc >= 0) & (xc < W))
    idx = (bidx * H + np.clip(yc, 0, H - 1)) * W + np.clip(xc, 0, W - 1)
    v = xflat[idx.reshape(-1)]
    v *= valid.reshape(-1, 1)
    return v, idx, valid


def deform_conv2d_nhwc(x: Tensor, offsets: Tensor, weight: Tensor,
                       bias: Tensor | None, stride: int = 1,
                       padding: int = 0) -> Tensor:
    """Deformable conv on channels-last buffers.

    x: (B, H, W, C); offsets: (B, H', W', 2*k*k); weight: (outC, inC, k, k).
    """
    B, H, W, C = x.data.shape
    OC, IC, kh, kw = weight.data.shape
    if IC != C:
        raise DimensionError(
            f"deform_conv2d: input has {C} channels but weight expects {IC}")
    Ho = conv_out_dim(H, kh, padding, stride)
    Wo = conv_out_dim(W, kw, padding, stride)
    if offsets.data.shape != (B, Ho, Wo, 2 * kh * kw):
        raise DimensionError(
            f"deform_conv2d: offset field {offsets.data.shape} does not match "
            f"(B={B}, H'={Ho}, W'={Wo}, 2k^2={2 * kh * kw})")
    dtype = x.data.dtype
    N = B * Ho * Wo
    xflat = x.data.reshape(B * H * W, C)
    bidx = np.repeat(np.arange(B), Ho * Wo).reshape(B, Ho, Wo)
    taps = [np.ascontiguousarray(weight.data[:, :, t // kw, t % kw].T)
            for t in range(kh * kw)]

    out = np.zeros((N, OC), dtype=dtype)
    vals = np.empty((kh * kw, N, C), dtype=dtype)
    for t in range(kh * kw):
        dr, dc = t // kw, t % kw
        px, py = _tap_positions(B, Ho, Wo, stride, padding, dr, dc,
                                offsets.data[..., 2 * t],
                                offsets.data[..., 2 * t + 1], dtype)
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        fx = (px - x0).reshape(-1, 1)
        fy = (py - y0).reshape(-1, 1)
        v00, _, _ = _corner_gather(xflat, bidx, y0, x0, H, W, C)
        v01, _, _ = _corner_gather(xflat, bidx, y0, x0 + 1, H, W, C)
        v10, _, _ = _corner_gather(xflat, bidx, y0 + 1, x0, H, W, C)
        v11, _, _ = _corner_gather(xflat, bidx, y0 + 1, x0 + 1, H, W, C)
        val = ((1 - fy) * ((1 - fx) * v00 + fx * v01)
               + fy * ((1 - fx) * v10 + fx * v11))
        vals[t] = val
        out += val @ taps[t]
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, OC)

    def bwd(g):
        gf = np.ascontiguousarray(g).reshape(N, OC)
        need_dx = x.requires_grad or x._parents
        need_doff = offsets.requires_grad or offsets._parents
        if weight.requires_grad or weight._parents:
            dw = np.zeros_like(weight.data)
            for t in range(kh * kw):
                dw[:, :, t // kw, t % kw] = (vals[t].T @ gf).T
            weight.accumulate_grad(dw)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias.accumulate_grad(gf.sum(axis=0))
        if not (need_dx or need_doff):
            return
        dxflat = np.zeros(B * H * W * C, dtype=np.float64) if need_dx else None
        doff = np.zeros_like(offsets.data) if need_doff else None
        cidx = np.arange(C, dtype=np.int64)
        for t in range(kh * kw):
            dr, dc = t // kw, t % kw
            dval = gf @ taps[t].T  # (N, C)
            px, py = _tap_positions(B, Ho, Wo, stride, padding, dr, dc,
                                    offsets.data[..., 2 * t],
                                    offsets.data[..., 2 * t + 1], dtype)
            x0 = np.floor(px).astype(np.int64)
            y0 = np.floor(py).astype(np.int64)
            fx = (px - x0).reshape(-1, 1)
            fy = (py - y0).reshape(-1, 1)
            corners = [
                (y0, x0, (1 - fy) * (1 - fx)),
                (y0, x0 + 1, (1 - fy) * fx),
                (y0 + 1, x0, fy * (1 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ]
            cvals = []
            for cy, cx, w in corners:
                v, idx, valid = _corner_gather(xflat, bidx, cy, cx, H, W, C)
                cvals.append(v)
                if need_dx:
                    # invalid corners carry zero weight after masking
                    wm = w * valid.reshape(-1, 1)
                    gidx = (idx.reshape(-1, 1) * C + cidx).reshape(-1)
                    dxflat += np.bincount(gidx, weights=(wm * dval).reshape(-1),
                                          minlength=B * H * W * C)
            if need_doff:
                v00, v01, v10, v11 = cvals
                dpx = np.sum(dval * ((1 - fy) * (v01 - v00) + fy * (v11 - v10)), axis=1)
                dpy = np.sum(dval * ((1 - fx) * (v10 - v00) + fx * (v11 - v01)), axis=1)
                doff[..., 2 * t] = dpx.reshape(B, Ho, Wo)
                doff[..., 2 * t + 1] = dpy.reshape(B, Ho, Wo)
        if need_dx:
            x.accumulate_grad(dxflat.reshape(x.data.shape).astype(dtype, copy=False))
        if need_doff:
            offsets.accumulate_grad(doff)

    parents = (x, offsets, weight) + ((bias,) if bias is not None else ())
    return make_node(out, parents, bwd, "deform_conv2d")


class DeformConv2d:
    """Deformable conv layer: main kernel plus a zero-initialized offset
    predictor conv (3x3, pad 1) producing 2*k*k offset channels.

    While ``offset_trainable`` is False the predictor's parameters receive
    no gradients (they stay at their warm-up values); the data path through
    the predicted offsets is unchanged.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.main = Conv2d(in_channels, out_channels, kernel_size,
                           stride=stride, padding=padding, bias=bias,
                           rng=rng, dtype=dtype)
        self.offset_conv = Conv2d(in_channels, 2 * kernel_size * kernel_size,
                                  3, stride=stride, padding=1, bias=True,
                                  dtype=dtype, zero_init=True)
        self.kernel_size = kernel_size
        self._offset_trainable = False
        self.set_offset_trainable(False)

    @property
    def offset_trainable(self) -> bool:
        return self._offset_trainable

    def set_offset_trainable(self, flag: bool):
        self._offset_trainable = bool(flag)
        self.offset_conv.weight.requires_grad = self._offset_trainable
        if self.offset_conv.bias is not None:
            self.offset_conv.bias.requires_grad = self._offset_trainable

    def __call__(self, x: Tensor) -> Tensor:
        offsets = self.offset_conv(x)
        return deform_conv2d_nhwc(x, offsets, self.main.weight, self.main.bias,
                                  self.main.stride, self.main.padding)

    def parameters(self):
        for n, p in self.main.parameters():
            yield f"main.{n}", p
        for n, p in self.offset_conv.parameters():
            yield f"offset.{n}", p


def predict_offsets(image: Tensor, params: DeformConv2d) -> Tensor:
    """Offset field for a (B, C, H, W) or (C, H, W) input, returned as
    (B, 2k^2, H', W') in the documented channel layout. Differentiable."""
    single = image.data.ndim == 3
    x = treshape(image, (1,) + image.data.shape) if single else image
    xh = ttranspose(x, (0, 2, 3, 1))
    off = params.offset_conv(xh)
    return ttranspose(off, (0, 3, 1, 2))


def deform_conv2d(image: Tensor, params: DeformConv2d) -> Tensor:
    """Deformable conv over a (C, H, W) or (B, C, H, W) input in the public
    channels-first layout (offsets predicted internally). Differentiable."""
    single = image.data.ndim == 3
    x = treshape(image, (1,) + image.data.shape) if single else image
    xh = ttranspose(x, (0, 2, 3, 1))
    out = params(xh)
    res = ttranspose(out, (0, 3, 1, 2))
    return treshape(res, res.data.shape[1:]) if single else res
