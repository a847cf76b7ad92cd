"""Dual correlation attention: cross- and self-correlation over feature maps.

Both paths share one 1x1 embedding conv (C -> C') and one 1x1 expansion
conv (C' -> C). Attention maps hold cosine similarities between every pair
of spatial positions of the embedded features; the distribution step
multiplies the map with the *unnormalized* embedded features, so output
magnitude tracks input magnitude while the map itself is scale-free.

Position-major matrices are (HW, C') with rows in row-major spatial order;
batched variants stack them as (B, HW, C').
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import Conv2d
from .tensor import (DimensionError, Tensor, concat_channels, l2_normalize_rows,
                     matmul, reshape, transpose)

VARIANTS = ("none", "baseline", "sca", "cca", "dca")

EMBED_EPS = 1e-12


@dataclass
class DcaParams:
    """Shared 1x1 embed (C -> C') and expand (C' -> C) convolutions."""

    embed: Conv2d
    expand: Conv2d


def _swap_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.data.ndim - 2)) + (t.data.ndim - 1, t.data.ndim - 2)
    return transpose(t, axes)


def embed_channels(f: Tensor, p: DcaParams) -> Tensor:
    """1x1-embed a (C, H, W) feature and return it position-major (HW, C')."""
    if f.data.ndim != 3:
        raise DimensionError(f"embed_channels expects (C,H,W), got {f.shape}")
    C, H, W = f.data.shape
    nhwc = transpose(reshape(f, (1, C, H, W)), (0, 2, 3, 1))
    emb = p.embed(nhwc)  # (1, H, W, C')
    return reshape(emb, (H * W, emb.data.shape[-1]))


def cross_attention_map(f1p: Tensor, f2p: Tensor) -> Tensor:
    """Cosine-similarity map between every position pair: (N1, C') x (N2, C')
    -> (N1, N2). Zero rows map to zero similarity via the eps guard."""
    if f1p.data.shape[-1] != f2p.data.shape[-1]:
        raise DimensionError(
            f"cross_attention_map: channel dims differ, {f1p.shape} vs {f2p.shape}")
    return matmul(l2_normalize_rows(f1p, EMBED_EPS),
                  _swap_last(l2_normalize_rows(f2p, EMBED_EPS)))


def self_attention_map(fp: Tensor) -> Tensor:
    """Self-similarity map: symmetric, unit diagonal for nonzero rows."""
    return cross_attention_map(fp, fp)


def distribute_cross(A: Tensor, f1p: Tensor, f2p: Tensor) -> tuple[Tensor, Tensor]:
    """Aggregate each position's attention-weighted counterpart sum:
    f21 = A^T f1', f12 = A f2' (unnormalized embedded features)."""
    n1, n2 = A.data.shape[-2], A.data.shape[-1]
    if f1p.data.shape[-2] != n1 or f2p.data.shape[-2] != n2:
        raise DimensionError(
            f"distribute_cross: map {A.shape} inconsistent with features "
            f"{f1p.shape}, {f2p.shape}")
    f21 = matmul(_swap_last(A), f1p)
    f12 = matmul(A, f2p)
    return f21, f12


def distribute_self(A: Tensor, fp: Tensor) -> Tensor:
    """f_self = A^T f' (A is symmetric; implemented as written)."""
    if A.data.shape[-2] != A.data.shape[-1]:
        raise DimensionError(f"distribute_self needs a square map, got {A.shape}")
    if fp.data.shape[-2] != A.data.shape[-1]:
        raise DimensionError(
            f"distribute_self: map {A.shape} inconsistent with feature {fp.shape}")
    return matmul(_swap_last(A), fp)


def expand_channels(f: Tensor, p: DcaParams, spatial: tuple[int, int]) -> Tensor:
    """Expand a position-major (HW, C') feature back to (C, H, W)."""
    H, W = spatial
    cp = f.data.shape[-1]
    if H * W != f.data.shape[-2]:
        raise DimensionError(
            f"expand_channels: {f.shape} does not cover spatial {spatial}")
    nhwc = reshape(f, (1, H, W, cp))
    out = p.expand(nhwc)
    return reshape(transpose(out, (0, 3, 1, 2)), (out.data.shape[-1], H, W))


class DcaBlock:
    """Attention block assembling one of the five comparison variants.

    Output channel layouts (C = input channels):
      none     -> [f1, f2]                       (2C)
      baseline -> [conv1x1(f1), conv1x1(f2)]     (2C, one shared conv)
      sca      -> [f1, f2, f11, f22]             (4C)
      cca      -> [f1, f2, f12, f21]             (4C)
      dca      -> [f1, f2, f11, f12, f21, f22]   (6C)

    All attention outputs pass through the shared expand conv back to C
    channels before concatenation.
    """

    def __init__(self, channels: int, variant: str, embed_dim: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 embed_bias: bool = False):
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}")
        self.variant = variant
        self.channels = channels
        self.embed_dim = embed_dim if embed_dim is not None else channels // 4
        self.params: DcaParams | None = None
        self.baseline_conv: Conv2d | None = None
        if variant in ("sca", "cca", "dca"):
            self.params = DcaParams(
                embed=Conv2d(channels, self.embed_dim, 1, bias=embed_bias,
                             rng=rng, dtype=dtype),
                expand=Conv2d(self.embed_dim, channels, 1, bias=embed_bias,
                              rng=rng, dtype=dtype),
            )
        elif variant == "baseline":
            self.baseline_conv = Conv2d(channels, channels, 1, bias=True,
                                        rng=rng, dtype=dtype)

    @property
    def out_channels(self) -> int:
        return self.channels * {"none": 2, "baseline": 2, "sca": 4,
                                "cca": 4, "dca": 6}[self.variant]

    def parameters(self):
        if self.params is not None:
            for n, t in self.params.embed.parameters():
                yield f"embed.{n}", t
            for n, t in self.params.expand.parameters():
                yield f"expand.{n}", t
        if self.baseline_conv is not None:
            for n, t in self.baseline_conv.parameters():
                yield f"baseline.{n}", t

    def forward_nhwc(self, f1: Tensor, f2: Tensor) -> Tensor:
        """Batched comparison: f1, f2 are (B, H, W, C); returns
        (B, H, W, out_channels)."""
        if f1.data.shape != f2.data.shape:
            raise DimensionError(
                f"attention inputs must match, got {f1.shape} vs {f2.shape}")
        B, H, W, C = f1.data.shape
        if self.variant == "none":
            return concat_channels([f1, f2])
        if self.variant == "baseline":
            return concat_channels([self.baseline_conv(f1), self.baseline_conv(f2)])

        p = self.params
        n = H * W
        e1 = reshape(p.embed(f1), (B, n, self.embed_dim))
        e2 = reshape(p.embed(f2), (B, n, self.embed_dim))

        def expand(fp: Tensor) -> Tensor:
            return p.expand(reshape(fp, (B, H, W, self.embed_dim)))

        parts = [f1, f2]
        if self.variant in ("sca", "dca"):
            f11 = distribute_self(self_attention_map(e1), e1)
            f22 = distribute_self(self_attention_map(e2), e2)
        if self.variant in ("cca", "dca"):
            Ac = cross_attention_map(e1, e2)
            f21, f12 = distribute_cross(Ac, e1, e2)
        if self.variant == "sca":
            parts += [expand(f11), expand(f22)]
        elif self.variant == "cca":
            parts += [expand(f12), expand(f21)]
        else:
            parts += [expand(f11), expand(f12), expand(f21), expand(f22)]
        return concat_channels(parts)


def dca_forward(f1: Tensor, f2: Tensor, block: DcaBlock) -> Tensor:
    """Public single-pair comparison: (C, H, W) features in, concatenated
    (out_channels, H, W) map out."""
    if f1.data.shape != f2.data.shape:
        raise DimensionError(f"dca_forward: {f1.shape} vs {f2.shape}")
    C, H, W = f1.data.shape
    a = transpose(reshape(f1, (1, C, H, W)), (0, 2, 3, 1))
    b = transpose(reshape(f2, (1, C, H, W)), (0, 2, 3, 1))
    out = block.forward_nhwc(a, b)
    return reshape(transpose(out, (0, 3, 1, 2)),
                   (block.out_channels, H, W))
