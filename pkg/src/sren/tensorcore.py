"""Feature maps, Sim(2) transform algebra, warping and bilinear sampling.

Coordinates are ``(row, col)`` offsets from a feature map's origin, which
defaults to the image center ``((H-1)/2, (W-1)/2)``.  The rotation block is

    R(theta) = [[cos, sin], [-sin, cos]]

acting on ``(row, col)`` vectors, so a positive angle carries the polar angle
``atan2(row, col)`` forward by ``theta``.  A transform is the product
``T = A_s @ Y_t @ R_theta``: rotate, translate by ``t``, then scale by ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from sren.errors import InvalidArgument, InvalidParameter

TWO_PI = 2.0 * math.pi


def cos_sin(theta: float) -> tuple[float, float]:
    """cos/sin with exact values on quarter turns (keeps 90 degree warps exact)."""
    q = theta / (math.pi / 2)
    if abs(q - round(q)) < 1e-12:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(round(q)) % 4]
    return math.cos(theta), math.sin(theta)


def rotation(theta: float) -> np.ndarray:
    c, s = cos_sin(theta)
    return np.array([[c, s], [-s, c]])


def wrap_angle(theta):
    """Map angles into [0, 2*pi)."""
    out = np.mod(theta, TWO_PI)
    # np.mod can round up to exactly 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if out.ndim == 0 else out


def circular_distance(a, b):
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b), TWO_PI))
    return np.minimum(d, TWO_PI - d)


@dataclass(frozen=True)
class FeatureMap:
    """C x H x W real grid with the origin used by warps."""

    data: np.ndarray
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise InvalidArgument(f"feature map must be C x H x W, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise InvalidArgument("feature map contains NaN or Inf")
        data = np.array(data, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.origin is None:
            object.__setattr__(self, "origin", ((data.shape[1] - 1) / 2.0, (data.shape[2] - 1) / 2.0))
        else:
            object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray) -> "FeatureMap":
        return FeatureMap(data, self.origin)


@dataclass(frozen=True)
class Sim2Transform:
    """Similarity transform (s, theta, t); ``t`` is a (row, col) vector."""

    s: float
    theta: float
    t: tuple[float, float] = (0.0, 0.0)
    matrix: np.ndarray = field(init=False, repr=False, compare=False)
    inverse_matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise InvalidParameter(f"scale must be positive, got {self.s}")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "t", (float(self.t[0]), float(self.t[1])))
        A, Y, R = self.factors()
        m = A @ Y @ R
        inv = np.eye(3)
        inv[:2, :2] = rotation(self.theta).T / self.s
        inv[:2, 2] = -rotation(self.theta).T @ np.asarray(self.t)
        for arr in (m, inv):
            arr.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "inverse_matrix", inv)

    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Homogeneous factors (A_s, Y_t, R_theta) with T = A_s @ Y_t @ R_theta."""
        A = np.diag([self.s, self.s, 1.0])
        Y = np.eye(3)
        Y[:2, 2] = self.t
        R = np.eye(3)
        R[:2, :2] = rotation(self.theta)
        return A, Y, R

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:2, :2]

    def inverse(self) -> "Sim2Transform":
        return from_matrix(self.inverse_matrix)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 2) offset vectors through T."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix[:2, :2].T + self.matrix[:2, 2]

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.inverse_matrix[:2, :2].T + self.inverse_matrix[:2, 2]

    @property
    def is_identity(self) -> bool:
        return self.s == 1.0 and self.theta == 0.0 and self.t == (0.0, 0.0)


def make_sim2(s: float, theta: float, t=(0.0, 0.0)) -> Sim2Transform:
    return Sim2Transform(s, theta, tuple(t))


IDENTITY = Sim2Transform(1.0, 0.0)


def from_matrix(m: np.ndarray) -> Sim2Transform:
    """Recover (s, theta, t) from a 3x3 similarity matrix."""
    m = np.asarray(m, dtype=np.float64)
    lin = m[:2, :2]
    s = math.sqrt(abs(np.linalg.det(lin)))
    r = lin / s
    theta = math.atan2(r[0, 1], r[0, 0])
    return Sim2Transform(s, theta, tuple(m[:2, 2] / s))


def compose(a: Sim2Transform, b: Sim2Transform) -> Sim2Transform:
    """Transform whose matrix is ``a.matrix @ b.matrix`` (apply b first)."""
    return from_matrix(a.matrix @ b.matrix)


@dataclass(frozen=True)
class InterpSample:
    location: tuple[float, float]
    indices: np.ndarray  # (4, 2) integer (row, col)
    weights: np.ndarray  # (4,)


def interp_sample(location, height: int, width: int) -> InterpSample:
    idx, w = bilinear_plan(np.array([location[0]]), np.array([location[1]]), height, width)
    rows, cols = np.divmod(idx[0], width)
    r0, c0 = math.floor(location[0]), math.floor(location[1])
    grid = np.array([[r0, c0], [r0, c0 + 1], [r0 + 1, c0], [r0 + 1, c0 + 1]])
    return InterpSample((float(location[0]), float(location[1])), grid, w[0])


def bilinear_plan(rows: np.ndarray, cols: np.ndarray, height: int, width: int):
    """Corner indices and weights of the bilinear kernel g(a,b) = max(0, 1-|a-b|).

    Returns flat indices ``(N, 4)`` into an ``H*W`` grid and weights ``(N, 4)``.
    Corners outside the grid get weight 0 (and a clamped, harmless index).
    """
    rows = np.asarray(rows, dtype=np.float64).ravel()
    cols = np.asarray(cols, dtype=np.float64).ravel()
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    cr = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    cc = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    inside = (cr >= 0) & (cr < height) & (cc >= 0) & (cc < width)
    w = np.where(inside, w, 0.0)
    idx = np.clip(cr, 0, height - 1) * width + np.clip(cc, 0, width - 1)
    return idx, w


def sampling_matrix(rows: np.ndarray, cols: np.ndarray, height: int, width: int) -> sparse.csr_matrix:
    """Sparse (N, H*W) operator whose row i bilinearly samples location i."""
    idx, w = bilinear_plan(rows, cols, height, width)
    n = idx.shape[0]
    indptr = np.arange(0, 4 * n + 1, 4)
    mat = sparse.csr_matrix((w.ravel(), idx.ravel(), indptr), shape=(n, height * width))
    mat.sum_duplicates()
    return mat


def sample_points(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear samples of every channel of ``data`` (C, H, W) at the points."""
    c, h, w = data.shape
    idx, wt = bilinear_plan(rows, cols, h, w)
    flat = data.reshape(c, h * w)
    return np.einsum("cnk,nk->cn", flat[:, idx], wt)


def bilinear_sample(f: FeatureMap, channel: int, location) -> float:
    """Value of channel ``channel`` at a continuous (row, col) pixel location."""
    return float(sample_points(f.data[channel : channel + 1], np.array([location[0]]), np.array([location[1]]))[0, 0])


def pixel_offsets(height: int, width: int, origin) -> tuple[np.ndarray, np.ndarray]:
    rr, cc = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return rr - origin[0], cc - origin[1]


def warp_array(data: np.ndarray, T: Sim2Transform, origin=None) -> np.ndarray:
    """out(x) = data(T^-1 x) for a (C, H, W) array; zero outside the support."""
    c, h, w = data.shape
    if origin is None:
        origin = ((h - 1) / 2.0, (w - 1) / 2.0)
    if T.is_identity:
        return np.array(data, copy=True)
    dr, dc = pixel_offsets(h, w, origin)
    src = T.apply_inverse(np.stack([dr.ravel(), dc.ravel()], axis=1))
    out = sample_points(data, src[:, 0] + origin[0], src[:, 1] + origin[1])
    return out.reshape(c, h, w)


def warp(f: FeatureMap, T: Sim2Transform) -> FeatureMap:
    """The action L_T: output(x) = f(T^-1 x) about ``f.origin``."""
    return f.replace(warp_array(f.data, T, f.origin))
