"""Per-pixel scale and orientation from normalized Fourier-Argand responses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from sren.errors import InvalidArgument, InvalidParameter
from sren.fourier_argand import BasisConfig, BasisSet
from sren.tensorcore import TWO_PI, FeatureMap

SIGMA_FLOOR = 1e-8
# local variance below this fraction of the local mean square is rounding noise
RELATIVE_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ResponseStack:
    responses: np.ndarray  # (n_orders, H, W) complex normalized correlations
    local_mean: np.ndarray
    local_std: np.ndarray
    valid: np.ndarray  # local_std above the floor
    orders: tuple

    def response(self, k1: int, k2: int) -> np.ndarray:
        return self.responses[self.orders.index((k1, k2))]


@dataclass(frozen=True)
class SearchGrid:
    lambdas: np.ndarray
    gammas: np.ndarray
    table: np.ndarray  # (n_lambda, n_gamma, n_orders) complex c_k(lambda, gamma)
    config: BasisConfig

    @property
    def cells(self) -> int:
        return len(self.lambdas) * len(self.gammas)

    @cached_property
    def unit_table(self) -> np.ndarray:
        """Rows rescaled to the L2 norm of the (lambda=1) row, flattened (cells, orders)."""
        flat = self.table.reshape(self.cells, -1)
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        return flat * (math.sqrt(flat.shape[1]) / norms)

    @cached_property
    def real_table(self) -> np.ndarray:
        """(2 * orders, cells) so that [Re f, Im f] @ real_table = Re(f . c)."""
        c = self.unit_table.T
        return np.ascontiguousarray(np.concatenate([c.real, -c.imag], axis=0))

    @property
    def gamma_step(self) -> float:
        return TWO_PI / len(self.gammas)

    @property
    def log_lambda_step(self) -> float:
        if len(self.lambdas) < 2:
            return 0.0
        return math.log(self.lambdas[1] / self.lambdas[0])


@dataclass(frozen=True)
class GeometryField:
    scale: np.ndarray  # Lambda_f(x)
    orientation: np.ndarray  # Gamma_f(x) in [0, 2pi)
    confidence: np.ndarray
    matrices: np.ndarray  # (H, W, 2, 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scale.shape

    @classmethod
    def identity(cls, height: int, width: int) -> "GeometryField":
        mats = np.zeros((height, width, 2, 2))
        mats[..., 0, 0] = mats[..., 1, 1] = 1.0
        return cls(np.ones((height, width)), np.zeros((height, width)), np.zeros((height, width), bool), mats)

    @classmethod
    def constant(cls, height: int, width: int, scale: float, orientation: float) -> "GeometryField":
        lam = np.full((height, width), float(scale))
        gam = np.full((height, width), float(orientation) % TWO_PI)
        conf = np.ones((height, width), bool)
        return cls(lam, gam, conf, matrices_from(lam, gam, conf))


def channel_reduce(f) -> np.ndarray:
    """Mean over channels; accepts a FeatureMap or a (C, H, W) array."""
    data = f.data if isinstance(f, FeatureMap) else np.asarray(f)
    if data.ndim == 2:
        return np.array(data, dtype=np.float64)
    if data.shape[0] < 1:
        raise InvalidArgument("need at least one channel")
    return data.mean(axis=0)


@lru_cache(maxsize=32)
def _atom_spectra(config: BasisConfig, shape: tuple[int, int]):
    from sren.fourier_argand import build_basis

    basis = build_basis(config)
    p = config.patch
    full = (shape[0] + p - 1, shape[1] + p - 1)
    fshape = tuple(sfft.next_fast_len(n) for n in full)
    # correlation == convolution with the flipped kernel
    kernels = basis.atoms[:, ::-1, ::-1] * basis.mask[::-1, ::-1]
    spectra = sfft.fft2(kernels, s=fshape, axes=(1, 2))
    return basis, fshape, spectra


def basis_responses(f, basis: BasisSet) -> ResponseStack:
    """Normalized cross-correlation of a single-channel map with every atom.

    f_k(x) = (mean_y[f(x+y) H_k(y)] - mu_i(x) mu_H) / (sigma_i(x) sigma_H)

    with y over the annulus footprint and edge-replicated borders.
    """
    img = channel_reduce(f) if isinstance(f, FeatureMap) or np.ndim(f) == 3 else np.asarray(f, dtype=np.float64)
    config = basis.config
    p = config.patch
    if img.shape[0] < p or img.shape[1] < p:
        raise InvalidArgument(f"image {img.shape} smaller than basis patch {p}")
    h, w = img.shape
    half = p // 2
    # constant offsets cancel in the normalized correlation; this makes flat inputs exactly zero
    centered = img - img.min()
    padded = np.pad(centered, half, mode="edge")

    mask = basis.mask.astype(np.float64)
    n = mask.sum()
    mu = ndimage.correlate(padded, mask, mode="constant")[half : half + h, half : half + w] / n
    sq = ndimage.correlate(padded * padded, mask, mode="constant")[half : half + h, half : half + w] / n
    var = np.maximum(sq - mu * mu, 0.0)
    std = np.sqrt(var)
    valid = (std > SIGMA_FLOOR) & (var > RELATIVE_VARIANCE_FLOOR * sq)

    _, fshape, spectra = _atom_spectra(config, padded.shape)
    img_spec = sfft.fft2(padded, s=fshape)
    corr = sfft.ifft2(spectra * img_spec[None], axes=(1, 2))
    corr = corr[:, p - 1 : p - 1 + h, p - 1 : p - 1 + w] / n

    denom = np.where(valid, std, 1.0)[None] * basis.stds[:, None, None]
    resp = (corr - mu[None] * basis.means[:, None, None]) / denom
    resp = np.where(valid[None], resp, 0.0)
    return ResponseStack(resp, mu + img.min(), std, valid, tuple(config.orders))


def build_search_grid(config: BasisConfig, n_lambda: int = 9, n_gamma: int = 16, lambda_range=(0.5, 2.0)) -> SearchGrid:
    lo, hi = lambda_range
    if not (lo > 0 and hi > lo):
        raise InvalidParameter(f"invalid lambda range {lambda_range}")
    if n_lambda < 1 or n_gamma < 1:
        raise InvalidParameter("grid sizes must be positive")
    lambdas = np.exp(np.linspace(math.log(lo), math.log(hi), n_lambda)) if n_lambda > 1 else np.array([lo])
    gammas = TWO_PI * np.arange(n_gamma) / n_gamma
    k1, k2 = config.order_arrays
    # exact roots of unity for the angular part keep quarter-turn shifts exact
    roots = np.exp(-1j * TWO_PI * np.arange(n_gamma) / n_gamma)
    ang = roots[np.mod(np.outer(np.arange(n_gamma), k1).astype(np.int64), n_gamma)]
    rad = np.exp(-1j * np.outer(np.log(lambdas), k2) * TWO_PI / config.log_ratio)
    table = rad[:, None, :] * ang[None, :, :] * (lambdas ** (-config.m))[:, None, None]
    return SearchGrid(lambdas, gammas, table, config)


def score_field(stack: ResponseStack, grid: SearchGrid) -> np.ndarray:
    """Re(sum_k f_k(x) c_k(lambda, gamma)) per cell, rows normalized; (H, W, cells)."""
    n, h, w = stack.responses.shape
    flat = stack.responses.reshape(n, h * w)
    stacked = np.concatenate([flat.real, flat.imag], axis=0).T
    scores = stacked @ grid.real_table
    return scores.reshape(h, w, grid.cells)


def estimate_geometry(stack: ResponseStack, grid: SearchGrid, conf_threshold: float | None = None) -> GeometryField:
    """Argmax over the (lambda, gamma) grid; ties go to the smallest lambda, then gamma."""
    if stack.orders != tuple(grid.config.orders):
        raise InvalidArgument("response stack and search grid come from different bases")
    if conf_threshold is None:
        conf_threshold = default_threshold(grid.config)
    scores = score_field(stack, grid)
    best_idx = np.argmax(scores, axis=-1)
    best = np.take_along_axis(scores, best_idx[..., None], axis=-1)[..., 0]
    margin = best - np.median(scores, axis=-1)
    li, gi = np.divmod(best_idx, len(grid.gammas))
    lam = grid.lambdas[li]
    gam = grid.gammas[gi]
    conf = stack.valid & (margin >= conf_threshold)
    return GeometryField(lam, gam, conf, matrices_from(lam, gam, conf))


def default_threshold(config: BasisConfig) -> float:
    return 0.05 * len(config.orders)


def matrices_from(scale: np.ndarray, orientation: np.ndarray, confidence: np.ndarray) -> np.ndarray:
    """M(x) = Lambda(x) * R(Gamma(x)); identity where not confident."""
    c = np.cos(orientation)
    s = np.sin(orientation)
    # snap quarter turns so 90 degree geometry samples exactly on the grid
    q = orientation / (math.pi / 2)
    quarter = np.abs(q - np.round(q)) < 1e-12
    k = np.mod(np.round(q).astype(np.int64), 4)
    c = np.where(quarter, np.array([1.0, 0.0, -1.0, 0.0])[k], c)
    s = np.where(quarter, np.array([0.0, 1.0, 0.0, -1.0])[k], s)
    m = np.empty(scale.shape + (2, 2))
    m[..., 0, 0] = scale * c
    m[..., 0, 1] = scale * s
    m[..., 1, 0] = -scale * s
    m[..., 1, 1] = scale * c
    m[~confidence] = np.eye(2)
    return m


def geometry_to_matrices(field: GeometryField) -> np.ndarray:
    return matrices_from(field.scale, field.orientation, field.confidence)


def compute_geometry(f, basis: BasisSet, grid: SearchGrid, conf_threshold: float | None = None) -> GeometryField:
    """channel_reduce -> basis_responses -> estimate_geometry."""
    return estimate_geometry(basis_responses(channel_reduce(f), basis), grid, conf_threshold)
