"""Scalable Fourier-Argand basis: construction, analysis, synthesis, steering.

An atom of order (k1, k2) on the annulus a <= r < b is

    H(r, theta) = r**m * exp(i * (k1 * theta + k2 * 2*pi * ln(r) / ln(b/a)))

with theta = atan2(row, col) measured from the patch center.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from sren.errors import InvalidParameter


@dataclass(frozen=True)
class BasisConfig:
    a: float = 0.7
    b: float = 7.5
    m: float = -1.0
    K1: int = 2
    K2: int = 2
    patch: int = 15

    def __post_init__(self):
        if not (0 < self.a < self.b):
            raise InvalidParameter(f"need 0 < a < b, got a={self.a}, b={self.b}")
        if self.b > self.patch / 2:
            raise InvalidParameter(f"outer radius b={self.b} exceeds half the patch ({self.patch})")
        if self.K1 < 0 or self.K2 < 0:
            raise InvalidParameter("orders K1, K2 must be non-negative")
        if self.patch < 1:
            raise InvalidParameter("patch must be positive")

    @property
    def log_ratio(self) -> float:
        return math.log(self.b / self.a)

    @property
    def orders(self) -> list[tuple[int, int]]:
        return [(k1, k2) for k1 in range(-self.K1, self.K1 + 1) for k2 in range(-self.K2, self.K2 + 1)]

    @property
    def order_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.array(self.orders, dtype=np.float64).reshape(-1, 2)
        return k[:, 0], k[:, 1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BasisConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidParameter(f"unknown basis keys: {sorted(unknown)}")
        return cls(**d)


def atom_value(k1, k2, r, theta, config: BasisConfig):
    """Continuous atom H_{k1,k2}(r, theta); zero outside a <= r < b."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    inside = (r >= config.a) & (r < config.b)
    safe_r = np.where(inside, r, 1.0)
    phase = k1 * theta + k2 * 2.0 * np.pi * np.log(safe_r) / config.log_ratio
    return np.where(inside, safe_r**config.m * np.exp(1j * phase), 0.0)


def steering_factors(config: BasisConfig, alpha: float, s: float) -> np.ndarray:
    """exp(-i k1 alpha - i k2 2pi ln s / ln(b/a)) * s**-m for every order."""
    k1, k2 = config.order_arrays
    return np.exp(-1j * (k1 * alpha + k2 * 2.0 * np.pi * math.log(s) / config.log_ratio)) * s ** (-config.m)


def patch_polar(patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar coordinates of pixel centers relative to the patch center."""
    c = (patch - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(patch) - c, np.arange(patch) - c, indexing="ij")
    return np.hypot(rr, cc), np.arctan2(rr, cc)


@dataclass(frozen=True)
class BasisSet:
    config: BasisConfig
    atoms: np.ndarray  # (n_orders, patch, patch) complex
    mask: np.ndarray  # (patch, patch) bool annulus footprint
    means: np.ndarray  # discrete mean of each atom over the footprint
    stds: np.ndarray  # discrete std of each atom over the footprint

    @property
    def orders(self) -> list[tuple[int, int]]:
        return self.config.orders

    def atom(self, k1: int, k2: int) -> np.ndarray:
        return self.atoms[self.orders.index((k1, k2))]


def build_basis(config: BasisConfig) -> BasisSet:
    if not isinstance(config, BasisConfig):
        raise InvalidParameter("build_basis expects a BasisConfig")
    r, theta = patch_polar(config.patch)
    atoms = np.stack([atom_value(k1, k2, r, theta, config) for k1, k2 in config.orders])
    mask = (r >= config.a) & (r < config.b)
    if not mask.any():
        raise InvalidParameter("annulus contains no pixel centers")
    samples = atoms[:, mask]
    means = samples.mean(axis=1)
    stds = np.sqrt(np.mean(np.abs(samples - means[:, None]) ** 2, axis=1))
    for arr in (atoms, mask, means, stds):
        arr.setflags(write=False)
    return BasisSet(config, atoms, mask, means, stds)


@dataclass(frozen=True)
class CoeffTable:
    """Coefficients h_{k1,k2}; ``values[k1 + K1, k2 + K2]``."""

    values: np.ndarray
    K1: int
    K2: int
    coarse: bool = False

    def __getitem__(self, key: tuple[int, int]) -> complex:
        k1, k2 = key
        return complex(self.values[k1 + self.K1, k2 + self.K2])

    @property
    def flat(self) -> np.ndarray:
        """Values in ``BasisConfig.orders`` order."""
        return self.values.reshape(-1)

    @classmethod
    def zeros(cls, config: BasisConfig) -> "CoeffTable":
        return cls(np.zeros((2 * config.K1 + 1, 2 * config.K2 + 1), dtype=np.complex128), config.K1, config.K2)

    @classmethod
    def from_dict(cls, config: BasisConfig, entries: dict) -> "CoeffTable":
        vals = np.zeros((2 * config.K1 + 1, 2 * config.K2 + 1), dtype=np.complex128)
        for (k1, k2), v in entries.items():
            vals[k1 + config.K1, k2 + config.K2] = v
        return cls(vals, config.K1, config.K2)


def polar_grid(config: BasisConfig, quad=(512, 256)):
    """Quadrature nodes: theta periodic (endpoint excluded), rho = ln r on [ln a, ln b]."""
    n_theta, n_rho = quad
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    rho = np.linspace(math.log(config.a), math.log(config.b), n_rho + 1)
    return theta, rho


def analyze_coefficients(h, config: BasisConfig, quad=(512, 256)) -> CoeffTable:
    """Project ``h`` onto the basis with the trapezoid rule in (theta, ln r).

    ``h`` is either a callable ``h(r, theta)`` or an array of samples of shape
    ``(n_theta, n_rho + 1)`` on the nodes returned by :func:`polar_grid`.
    """
    n_theta, n_rho = quad
    theta, rho = polar_grid(config, quad)
    if callable(h):
        # keep the outer node inside the half-open support
        r = np.exp(rho)
        r[-1] = np.nextafter(config.b, 0.0)
        samples = np.asarray(h(r[None, :], theta[:, None]), dtype=np.complex128)
        samples = np.broadcast_to(samples, (n_theta, n_rho + 1))
    else:
        samples = np.asarray(h, dtype=np.complex128)
        if samples.shape != (n_theta, n_rho + 1):
            raise InvalidParameter(f"samples must have shape {(n_theta, n_rho + 1)}, got {samples.shape}")

    coarse = n_theta < 4 * (2 * config.K1 + 1) or n_rho < 4 * (2 * config.K2 + 1)
    if coarse:
        warnings.warn("quadrature resolution below 4x Nyquist for the requested orders", RuntimeWarning)

    L = config.log_ratio
    w_rho = np.full(n_rho + 1, 1.0)
    w_rho[[0, -1]] = 0.5
    w_rho *= (rho[-1] - rho[0]) / n_rho / L
    weighted = samples * (np.exp(-rho * config.m) * w_rho)[None, :] / n_theta

    k1 = np.arange(-config.K1, config.K1 + 1)
    k2 = np.arange(-config.K2, config.K2 + 1)
    e_theta = np.exp(-1j * np.outer(k1, theta))
    e_rho = np.exp(-1j * 2.0 * np.pi * np.outer(rho - rho[0], k2) / L)
    # the common phase from starting the rho grid at ln a
    shift = np.exp(-1j * 2.0 * np.pi * k2 * rho[0] / L)
    values = e_theta @ weighted @ e_rho * shift[None, :]
    return CoeffTable(values, config.K1, config.K2, coarse)


def synthesize(coeffs: CoeffTable, config: BasisConfig, basis: BasisSet | None = None) -> np.ndarray:
    """Sum_k h_k H_k on the sampled patch grid."""
    basis = basis or build_basis(config)
    table = _conform(coeffs, config)
    return np.tensordot(table.flat, basis.atoms, axes=1)


def evaluate(coeffs: CoeffTable, config: BasisConfig, r, theta) -> np.ndarray:
    """Sum_k h_k H_k at continuous polar points."""
    table = _conform(coeffs, config)
    out = 0.0
    for (k1, k2), h in zip(config.orders, table.flat):
        if h != 0:
            out = out + h * atom_value(k1, k2, r, theta, config)
    return np.broadcast_to(np.asarray(out, dtype=np.complex128), np.broadcast(np.asarray(r), np.asarray(theta)).shape)


def steer_coefficients(coeffs: CoeffTable, alpha: float, s: float, config: BasisConfig) -> CoeffTable:
    """Coefficients of the filter rotated by ``alpha`` and scaled by ``s``."""
    if not s > 0:
        raise InvalidParameter(f"scale must be positive, got {s}")
    table = _conform(coeffs, config)
    factors = steering_factors(config, alpha, s).reshape(table.values.shape)
    return CoeffTable(table.values * factors, table.K1, table.K2, table.coarse)


def _conform(coeffs: CoeffTable, config: BasisConfig) -> CoeffTable:
    if (coeffs.K1, coeffs.K2) != (config.K1, config.K2):
        raise InvalidParameter("coefficient table orders do not match the basis config")
    return coeffs

