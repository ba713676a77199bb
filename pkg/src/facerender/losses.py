"""Perceptual, style, and total reconstruction losses.

The activation maps come from a frozen, seed-determined convolutional
stack instead of a pretrained backbone; random features keep the loss
structure (multi-layer l1 + Gram statistics) while staying dependency-free
and bit-reproducible. All l1 terms are means over elements so the loss
weights keep their meaning across image sizes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor,
    absolute,
    add,
    avg_pool2x2,
    concat,
    conv2d,
    leaky_relu,
    matmul,
    mul,
    narrow,
    reshape,
    tmean,
    transpose,
)


@dataclass(frozen=True)
class LossWeights:
    warp: float = 2.5
    reconstruction: float = 4.0
    style: float = 1000.0

    def __post_init__(self):
        if min(self.warp, self.reconstruction, self.style) < 0:
            raise ValueError("loss weights must be non-negative")


class FeatureExtractor:
    """Frozen conv stack emitting one activation map per layer.

    Layer plan (stride, channels): (1, 8) -> (2, 16) -> (2, 32); leaky ReLU
    after every convolution. Weights are a pure function of the seed and are
    never updated.
    """

    LAYER_PLAN = ((3, 8, 1), (8, 16, 2), (16, 32, 2))

    def __init__(self, seed: int = 2024):
        self.seed = int(seed)
        rng = Rng(self.seed).derive("feature-extractor")
        self.layers: List[Tuple[Tensor, Tensor, int]] = []
        for i, (cin, cout, stride) in enumerate(self.LAYER_PLAN):
            w = rng.normal(cout, cin, 3, 3, std=np.sqrt(2.0 / (cin * 9)))
            b = rng.normal(cout, std=0.1)
            self.layers.append((Tensor(w, name=f"fx.{i}.w"), Tensor(b, name=f"fx.{i}.b"), stride))

    @property
    def deepest_dim(self) -> int:
        return self.LAYER_PLAN[-1][1]

    def __call__(self, image: Tensor) -> List[Tensor]:
        feats = []
        h = image
        for w, b, stride in self.layers:
            h = leaky_relu(conv2d(h, w, b, stride=stride, padding=1), 0.2)
            feats.append(h)
        return feats

    def pooled(self, image: Tensor) -> np.ndarray:
        """Spatially averaged deepest-layer features, [N, C_last]."""
        deepest = self(image)[-1]
        return deepest.data.mean(axis=(2, 3))

    def weights_digest(self) -> str:
        hasher = hashlib.sha256()
        for w, b, _ in self.layers:
            hasher.update(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
            hasher.update(np.ascontiguousarray(b.data, dtype="<f8").tobytes())
        return hasher.hexdigest()


def pyramid_downsample(img: Tensor, levels: int) -> List[Tensor]:
    """Level 0 is the input; each further level is 2x2 average pooling."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    h, w = img.shape[2], img.shape[3]
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ValueError(f"image size {h}x{w} not divisible by 2^{levels - 1}")
    out = [img]
    for _ in range(levels - 1):
        out.append(avg_pool2x2(out[-1]))
    return out


def _mean_l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"l1 distance: shapes differ, {a.shape} vs {b.shape}")
    return tmean(absolute(a - b))


def perceptual_distance(a: Tensor, b: Tensor, fx: FeatureExtractor, levels: int = 3) -> Tensor:
    """Sum over pyramid levels and layers of mean-l1 feature differences."""
    total = None
    for pa, pb in zip(pyramid_downsample(a, levels), pyramid_downsample(b, levels)):
        for fa, fb in zip(fx(pa), fx(pb)):
            term = _mean_l1(fa, fb)
            total = term if total is None else add(total, term)
    return total


def gram_matrix(phi: Tensor) -> Tensor:
    """G[N,C,C] = phi_flat @ phi_flat^T / (C*H*W) per sample."""
    if phi.ndim != 4:
        raise ValueError(f"gram_matrix: need [N,C,H,W], got {phi.shape}")
    n, c, h, w = phi.shape
    norm = 1.0 / (c * h * w)
    grams = []
    for i in range(n):
        flat = reshape(narrow(phi, 0, i, 1), (c, h * w))
        grams.append(reshape(mul(matmul(flat, transpose(flat, (1, 0))), norm), (1, c, c)))
    return grams[0] if len(grams) == 1 else concat(grams, axis=0)


def style_loss(a: Tensor, b: Tensor, fx: FeatureExtractor) -> Tensor:
    """Mean-l1 distance between per-layer Gram matrices."""
    total = None
    for fa, fb in zip(fx(a), fx(b)):
        term = _mean_l1(gram_matrix(fa), gram_matrix(fb))
        total = term if total is None else add(total, term)
    return total


def total_loss(warped: Tensor, edited: Tensor, target: Tensor, weights: LossWeights,
               fx: FeatureExtractor, levels: int = 3) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of warp, reconstruction, and style terms plus a breakdown."""
    if warped.shape != target.shape or edited.shape != target.shape:
        raise ValueError(
            f"total_loss: image shapes differ ({warped.shape}, {edited.shape}, {target.shape})")
    l_w = perceptual_distance(warped, target, fx, levels)
    l_c = perceptual_distance(edited, target, fx, levels)
    l_s = style_loss(edited, target, fx)
    total = add(add(mul(l_w, weights.warp), mul(l_c, weights.reconstruction)),
                mul(l_s, weights.style))
    breakdown = {
        "warp": float(l_w.data),
        "reconstruction": float(l_c.data),
        "style": float(l_s.data),
        "total": float(total.data),
    }
    return total, breakdown
