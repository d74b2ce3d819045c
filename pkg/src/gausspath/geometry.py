"""Periodic domains and Gaussian-sum paths/fields.

A path (1D) or gauge field component (4D) is a finite sum

    f(x) = sum_i c_i * exp(-|x - x_i|^2 / w_i^2)

where ``x - x_i`` is the minimal-image displacement on the periodic box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels

DEFAULT_EPSILON = 1e-8


class ConfigurationError(ValueError):
    """Raised for inconsistent geometry, model or run parameters."""


@dataclass(frozen=True)
class PeriodicDomain:
    """Rectangular torus. ``extents`` are the periods along each axis.

    For gauge fields the axes are ordered (x1, x2, x3, tau), so the last
    axis is Euclidean time.
    """

    extents: tuple

    def __post_init__(self):
        ext = tuple(float(e) for e in self.extents)
        object.__setattr__(self, "extents", ext)
        if len(ext) not in (1, 4):
            raise ConfigurationError(f"dims must be 1 or 4, got {len(ext)}")
        if any(not (e > 0) for e in ext):
            raise ConfigurationError(f"extents must be positive, got {ext}")

    @property
    def dims(self) -> int:
        return len(self.extents)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def wrap(self, x):
        """Map points into the fundamental domain [0, extent)."""
        x = np.asarray(x, dtype=float)
        ext = np.asarray(self.extents)
        y = np.mod(x, ext)
        # mod can round up to exactly the extent for tiny negative inputs
        return np.where(y >= ext, y - ext, y)


@dataclass(frozen=True)
class GaussianTerm:
    coefficient: float
    center: tuple
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigurationError(f"width must be positive, got {self.width}")


def periodic_displacement(a, b, domain: PeriodicDomain):
    """Minimal-image displacement ``a - b``.

    Each component lies in (-extent/2, extent/2]; an exact tie at half the
    period resolves to the positive side.  Works on arrays of points with
    the coordinate axis last.
    """
    ext = np.asarray(domain.extents)
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), ext)
    d = np.where(d > 0.5 * ext, d - ext, d)
    if domain.dims == 1 and np.ndim(a) == 0 and np.ndim(b) == 0:
        return float(np.asarray(d).reshape(-1)[0])
    return d


def truncation_radius(width: float, epsilon: float) -> float:
    """Radius beyond which ``exp(-r^2/width^2) < epsilon``."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    return width * math.sqrt(math.log(1.0 / epsilon))


@dataclass
class Configuration:
    """A full path or gauge-field configuration.

    Arrays are indexed ``[component, term]``; ``centers`` carries a trailing
    coordinate axis.  Only ``coefficients`` change after initialization.
    """

    domain: PeriodicDomain
    coefficients: np.ndarray
    centers: np.ndarray
    widths: np.ndarray
    _grids: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.coefficients = np.ascontiguousarray(self.coefficients, dtype=float)
        self.widths = np.ascontiguousarray(self.widths, dtype=float)
        self.centers = np.ascontiguousarray(self.centers, dtype=float)
        if self.coefficients.ndim != 2:
            raise ConfigurationError("coefficients must be 2D (component, term)")
        ncomp, nsum = self.coefficients.shape
        if self.widths.shape != (ncomp, nsum):
            raise ConfigurationError("widths shape does not match coefficients")
        if self.centers.shape != (ncomp, nsum, self.domain.dims):
            raise ConfigurationError("centers shape does not match coefficients/domain")
        if np.any(self.widths <= 0):
            raise ConfigurationError("all widths must be positive")
        ext = np.asarray(self.domain.extents)
        if np.any(self.centers < 0) or np.any(self.centers >= ext):
            raise ConfigurationError("centers must lie in [0, extent)")

    @property
    def n_components(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_sum(self) -> int:
        return self.coefficients.shape[1]

    def terms(self, component: int = 0) -> list[GaussianTerm]:
        return [
            GaussianTerm(float(c), tuple(x), float(w))
            for c, x, w in zip(self.coefficients[component], self.centers[component],
                               self.widths[component])
        ]

    def copy(self) -> "Configuration":
        return Configuration(self.domain, self.coefficients.copy(), self.centers.copy(),
                             self.widths.copy())

    @classmethod
    def from_terms(cls, domain: PeriodicDomain,
                   components: Sequence[Sequence[GaussianTerm]]) -> "Configuration":
        coef = np.array([[t.coefficient for t in comp] for comp in components], dtype=float)
        cen = np.array([[t.center for t in comp] for comp in components], dtype=float)
        wid = np.array([[t.width for t in comp] for comp in components], dtype=float)
        cen = cen.reshape(coef.shape + (domain.dims,))
        return cls(domain, coef, cen, wid)

    def term_grid(self, component: int, epsilon: float) -> "TermGrid":
        key = (component, epsilon)
        grid = self._grids.get(key)
        if grid is None:
            grid = TermGrid(self.domain, self.centers[component], self.widths[component],
                            epsilon)
            self._grids[key] = grid
        return grid


class TermGrid:
    """Uniform cell binning of term centers for neighbour queries.

    Cell size along every axis is at least the largest truncation radius, so
    a point only sees terms in its own and adjacent cells.  Centers and
    widths are frozen after initialization, so a grid stays valid for the
    lifetime of a configuration.
    """

    def __init__(self, domain: PeriodicDomain, centers, widths, epsilon):
        self.domain = domain
        self.epsilon = epsilon
        widths = np.asarray(widths, dtype=float)
        self.r2 = (widths * math.sqrt(math.log(1.0 / epsilon))) ** 2
        rmax = math.sqrt(float(self.r2.max()))
        ext = np.asarray(domain.extents)
        self.cell_counts = np.maximum(1, np.floor(ext / rmax)).astype(np.int64)
        cell_size = ext / self.cell_counts
        idx = np.floor(centers / cell_size).astype(np.int64) % self.cell_counts
        flat = np.ravel_multi_index(tuple(idx.T), tuple(self.cell_counts))
        order = np.argsort(flat, kind="stable")
        ncell = int(np.prod(self.cell_counts))
        self.cell_items = order.astype(np.int64)
        self.cell_start = np.searchsorted(flat[order], np.arange(ncell + 1)).astype(np.int64)

    def evaluate(self, points, coef, centers, widths):
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        n = points.shape[0]
        val = np.empty(n)
        grad = np.empty((n, self.domain.dims))
        _kernels.evaluate_points(points, np.ascontiguousarray(coef), centers, widths, self.r2,
                                 np.asarray(self.domain.extents), self.cell_counts,
                                 self.cell_start, self.cell_items, val, grad)
        return val, grad


def _as_points(x, domain):
    pts = np.asarray(x, dtype=float)
    if domain.dims == 1:
        return pts.reshape(-1, 1), pts.ndim == 0
    return np.atleast_2d(pts), pts.ndim == 1


def _exact(config, component, pts):
    disp = periodic_displacement(pts[:, None, :], config.centers[component][None, :, :],
                                 config.domain)
    w2 = config.widths[component] ** 2
    e = config.coefficients[component] * np.exp(-np.sum(disp**2, axis=-1) / w2)
    return e, disp, w2


def evaluate(config: Configuration, component: int, x, epsilon: float | None = None):
    """Field value of one component at point(s) ``x``.

    With ``epsilon=None`` every term contributes; otherwise terms are cut at
    ``truncation_radius(width, epsilon)`` and looked up through the cell grid.
    """
    pts, scalar = _as_points(x, config.domain)
    if epsilon is None:
        val = _exact(config, component, pts)[0].sum(axis=1)
    else:
        grid = config.term_grid(component, epsilon)
        val, _ = grid.evaluate(pts, config.coefficients[component], config.centers[component],
                               config.widths[component])
    return float(val[0]) if scalar else val


def evaluate_gradient(config: Configuration, component: int, x,
                      epsilon: float | None = None):
    """Analytic gradient of one component at point(s) ``x``."""
    pts, scalar = _as_points(x, config.domain)
    if epsilon is None:
        e, disp, w2 = _exact(config, component, pts)
        grad = np.sum((-2.0 * disp / w2[None, :, None]) * e[:, :, None], axis=1)
    else:
        grid = config.term_grid(component, epsilon)
        _, grad = grid.evaluate(pts, config.coefficients[component], config.centers[component],
                                config.widths[component])
    return grad[0] if scalar else grad
