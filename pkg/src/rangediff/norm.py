"""Invertible depth/intensity normalisations and integer-factor resizing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams, NonDivisibleFactor, OutOfRange
from .rangeview import MAX_DEPTH, MIN_DEPTH

DEFAULT_LAMBDA = 4.0
DEFAULT_ALPHA = 0.5

# slack for values that went through float round-off at the domain edges
_EDGE_TOL = 1e-6


@dataclass(frozen=True)
class DepthNormParams:
    """Object band [min_d, max_d] (in linear-normalised depth) and its share alpha."""

    alpha: float = DEFAULT_ALPHA
    min_d: float = -1.0
    max_d: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidParams(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (-1.0 <= self.min_d < self.max_d <= 1.0):
            raise InvalidParams(
                f"need -1 <= min_d < max_d <= 1, got min_d={self.min_d}, max_d={self.max_d}"
            )

    @classmethod
    def from_depths(cls, depths, alpha: float = DEFAULT_ALPHA) -> "DepthNormParams":
        """Build the band from metric depths, e.g. the corners of a projected box."""
        d = depth_linear_norm(np.clip(np.asarray(depths, dtype=np.float64), MIN_DEPTH, MAX_DEPTH))
        return cls(alpha=alpha, min_d=float(np.min(d)), max_d=float(np.max(d)))


def _check_interval(x, lo, hi, what):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < lo - _EDGE_TOL) or np.any(x > hi + _EDGE_TOL) or np.any(np.isnan(x)):
        raise OutOfRange(f"{what} outside [{lo}, {hi}]")
    return np.clip(x, lo, hi)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def depth_linear_norm(d):
    """Affine map of metric depth [1.4, 54] onto [-1, 1]."""
    d = _check_interval(d, MIN_DEPTH, MAX_DEPTH, "depth")
    return _out(2.0 * (d - MIN_DEPTH) / (MAX_DEPTH - MIN_DEPTH) - 1.0)


def depth_linear_denorm(dn):
    dn = _check_interval(dn, -1.0, 1.0, "normalised depth")
    return _out(MIN_DEPTH + (dn + 1.0) * 0.5 * (MAX_DEPTH - MIN_DEPTH))


def depth_object_norm(d, p: DepthNormParams):
    """Piecewise-linear stretch giving the object band [min_d, max_d] the range [-a, a].

    Background below the band is squeezed into [-1, -a), above it into (a, 1].
    """
    d = _check_interval(d, -1.0, 1.0, "normalised depth")
    a, lo, hi = p.alpha, p.min_d, p.max_d
    mid = -a + 2.0 * a * (d - lo) / (hi - lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        below = -1.0 + (1.0 - a) * (d + 1.0) / (lo + 1.0)
        above = a + (1.0 - a) * (d - hi) / (1.0 - hi)
    out = np.where(d < lo, below, np.where(d > hi, above, mid))
    return _out(out)


def depth_object_denorm(dp, p: DepthNormParams):
    """Exact inverse of :func:`depth_object_norm`."""
    dp = _check_interval(dp, -1.0, 1.0, "object-normalised depth")
    a, lo, hi = p.alpha, p.min_d, p.max_d
    mid = lo + (dp + a) * (hi - lo) / (2.0 * a)
    below = -1.0 + (dp + 1.0) * (lo + 1.0) / (1.0 - a)
    above = hi + (dp - a) * (1.0 - hi) / (1.0 - a)
    out = np.where(dp < -a, below, np.where(dp > a, above, mid))
    return _out(out)


def intensity_norm(i, lam: float = DEFAULT_LAMBDA):
    """Exponential-CDF remap of intensity [0, 255] to (-1, 1]: 2 exp(-lam i/255) - 1."""
    if lam <= 0:
        raise InvalidParams("lambda must be positive")
    i = _check_interval(i, 0.0, 255.0, "intensity")
    return _out(2.0 * np.exp(-lam * i / 255.0) - 1.0)


def intensity_denorm(ip, lam: float = DEFAULT_LAMBDA):
    if lam <= 0:
        raise InvalidParams("lambda must be positive")
    floor = 2.0 * np.exp(-lam) - 1.0
    ip = _check_interval(ip, floor, 1.0, "normalised intensity")
    return _out(-255.0 / lam * np.log((ip + 1.0) / 2.0))


def avg_pool_downscale(grid, factor: int) -> np.ndarray:
    """Mean over non-overlapping factor x factor blocks.

    Each block mean is accumulated relative to the block's first element, so a
    constant block returns its value bit-exactly for any factor.
    """
    g = np.asarray(grid, dtype=np.float64)
    if factor < 1:
        raise NonDivisibleFactor("factor must be >= 1")
    H, W = g.shape
    if H % factor or W % factor:
        raise NonDivisibleFactor(f"factor {factor} does not divide grid {H}x{W}")
    if factor == 1:
        return g.copy()
    blocks = g.reshape(H // factor, factor, W // factor, factor)
    ref = blocks[:, :1, :, :1]
    return (ref + (blocks - ref).mean(axis=(1, 3), keepdims=True))[:, 0, :, 0]


def nn_upscale(grid, factor: int) -> np.ndarray:
    """Replicate each cell into a factor x factor block."""
    if factor < 1:
        raise NonDivisibleFactor("factor must be >= 1")
    g = np.asarray(grid, dtype=np.float64)
    return np.repeat(np.repeat(g, factor, axis=0), factor, axis=1)
