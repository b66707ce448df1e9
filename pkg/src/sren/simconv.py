"""The similarity convolution and its analytic gradients.

    out_o(x) = (V/n) * sum_t sum_c f_c(x + M(x) t) * phi[o, c, t] + bias_o

f(y) at fractional y is bilinearly interpolated, so for a fixed geometry field
the layer is linear in both f and phi.  All taps of all pixels are gathered by
one sparse sampling matrix S of shape (H*W*n, H*W); the backward pass reuses
S^T, so d_input flows through the same bilinear weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from sren.errors import InvalidArgument
from sren.geometry import GeometryField
from sren.tensorcore import FeatureMap, sampling_matrix


def square_support(size: int = 3) -> np.ndarray:
    """Integer (t_r, t_c) offsets of a size x size window, row-major."""
    if size < 1 or size % 2 == 0:
        raise InvalidArgument("support size must be a positive odd integer")
    h = size // 2
    rr, cc = np.meshgrid(np.arange(-h, h + 1), np.arange(-h, h + 1), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)


@dataclass
class SimConvLayer:
    weights: np.ndarray  # (out, in, n)
    support: np.ndarray  # (n, 2)
    bias: np.ndarray  # (out,)
    quad_weight: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.support = np.asarray(self.support, dtype=np.float64)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 3 or self.weights.shape[2] != len(self.support):
            raise InvalidArgument(f"weights {self.weights.shape} do not match support of size {len(self.support)}")
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidArgument("bias must have one entry per output channel")
        if not self.quad_weight > 0:
            raise InvalidArgument("quad_weight must be positive")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def create(cls, in_channels: int, out_channels: int, size: int = 3, rng=None, dtype=np.float64) -> "SimConvLayer":
        """He-uniform weights (fan-in, suited to the rectifier), zero bias."""
        rng = np.random.default_rng(rng)
        support = square_support(size)
        n = len(support)
        limit = np.sqrt(6.0 / (in_channels * n))
        w = rng.uniform(-limit, limit, size=(out_channels, in_channels, n)).astype(dtype)
        return cls(w, support, np.zeros(out_channels, dtype=dtype))


@dataclass
class SimConvGrads:
    d_weights: np.ndarray
    d_input: np.ndarray
    d_bias: np.ndarray


def sample_offsets(x, M, support) -> np.ndarray:
    """Continuous locations y_t = x + M t, in support order."""
    support = np.asarray(support, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)[None, :] + support @ np.asarray(M, dtype=np.float64).T


def sample_locations(matrices: np.ndarray, support: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(H, W, n) row and column sample positions for a per-pixel matrix field."""
    h, w = matrices.shape[:2]
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    off = np.einsum("hwij,nj->hwni", matrices, support)
    return rr[..., None] + off[..., 0], cc[..., None] + off[..., 1]


def sampling_operator(field, support: np.ndarray) -> sparse.csr_matrix:
    """Sparse S with (S @ f_flat)[(x * n + t)] = f(x + M(x) t)."""
    mats = field.matrices if isinstance(field, GeometryField) else np.asarray(field)
    h, w = mats.shape[:2]
    rows, cols = sample_locations(mats, support)
    return sampling_matrix(rows.ravel(), cols.ravel(), h, w)


def _as_array(f) -> np.ndarray:
    return f.data if isinstance(f, FeatureMap) else np.asarray(f)


def _check(data: np.ndarray, layer: SimConvLayer, field) -> None:
    if data.ndim != 3:
        raise InvalidArgument(f"input must be C x H x W, got {data.shape}")
    if data.shape[0] != layer.in_channels:
        raise InvalidArgument(f"input has {data.shape[0]} channels, layer expects {layer.in_channels}")
    shape = field.shape if isinstance(field, GeometryField) else field.shape[:2]
    if tuple(shape) != data.shape[1:]:
        raise InvalidArgument(f"geometry field {tuple(shape)} does not match input {data.shape[1:]}")


def gather(data: np.ndarray, S: sparse.csr_matrix, n: int) -> np.ndarray:
    """Sampled taps as an (H*W, n * C) matrix, tap-major within each pixel."""
    c, h, w = data.shape
    taps = S @ data.reshape(c, h * w).T  # (H*W*n, C)
    return taps.reshape(h * w, n * c)


def _weight_matrix(layer: SimConvLayer) -> np.ndarray:
    # (out, in, n) -> (n * in, out) matching the gather layout
    return layer.weights.transpose(2, 1, 0).reshape(-1, layer.out_channels)


def forward_array(data: np.ndarray, layer: SimConvLayer, S: sparse.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass on raw arrays; also returns the gathered taps for backward."""
    c, h, w = data.shape
    cols = gather(data, S, len(layer.support))
    out = layer.quad_weight * (cols @ _weight_matrix(layer)) + layer.bias[None, :]
    return out.T.reshape(layer.out_channels, h, w), cols


def backward_array(cols: np.ndarray, upstream: np.ndarray, layer: SimConvLayer, S: sparse.csr_matrix, need_input=True):
    o, h, w = upstream.shape
    g = upstream.reshape(o, h * w).T  # (H*W, out)
    n = len(layer.support)
    c = layer.in_channels
    d_w = layer.quad_weight * (cols.T @ g)  # (n * in, out)
    d_weights = d_w.reshape(n, c, o).transpose(2, 1, 0)
    d_bias = g.sum(axis=0)
    d_input = None
    if need_input:
        d_cols = layer.quad_weight * (g @ _weight_matrix(layer).T)  # (H*W, n * in)
        d_input = (S.T @ d_cols.reshape(h * w * n, c)).T.reshape(c, h, w)
    return d_weights, d_input, d_bias


def simconv_forward(f, layer: SimConvLayer, field) -> FeatureMap:
    data = _as_array(f)
    _check(data, layer, field)
    S = sampling_operator(field, layer.support)
    out, _ = forward_array(data, layer, S)
    origin = f.origin if isinstance(f, FeatureMap) else None
    return FeatureMap(out, origin)


def simconv_backward(f, layer: SimConvLayer, field, upstream) -> SimConvGrads:
    """Exact gradients with the geometry field held constant."""
    data = _as_array(f)
    _check(data, layer, field)
    up = _as_array(upstream)
    if up.shape != (layer.out_channels,) + data.shape[1:]:
        raise InvalidArgument(f"upstream shape {up.shape} does not match forward output")
    S = sampling_operator(field, layer.support)
    cols = gather(data, S, len(layer.support))
    d_weights, d_input, d_bias = backward_array(cols, up, layer, S)
    return SimConvGrads(d_weights, d_input, d_bias)
