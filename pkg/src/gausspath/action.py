"""Euclidean actions by midpoint quadrature with analytic integrands.

Three models share one code path:

* harmonic oscillator, ``L = m qdot^2 / 2 + m w^2 q^2 / 2``
* U(1) gauge field, ``L = 1/4 sum_{mu,nu} F_{mu nu}^2``
* SU(2) gauge field, ``F^a_{mu nu} = d_mu A^a_nu - d_nu A^a_mu
  + g eps_abc A^b_mu A^c_nu`` (eps_123 = +1)

Field values and first derivatives are cached on the quadrature nodes
(:class:`FieldCache`), so a single-term update only touches nodes inside
that term's truncation radius.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import DEFAULT_EPSILON, Configuration, ConfigurationError, PeriodicDomain

HARMONIC_OSCILLATOR = "harmonic_oscillator"
GAUGE_U1 = "gauge_u1"
GAUGE_SU2 = "gauge_su2"
MODEL_KINDS = (HARMONIC_OSCILLATOR, GAUGE_U1, GAUGE_SU2)


@dataclass(frozen=True)
class PhysicsModel:
    """Physical parameters.

    ``coupling`` enters the SU(2) action; for U(1) it only scales the
    Wilson-loop phase.
    """

    kind: str
    mass: float = 1.0
    omega: float = 1.0
    coupling: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.kind == HARMONIC_OSCILLATOR and not (self.mass > 0 and self.omega > 0):
            raise ConfigurationError("harmonic oscillator needs mass > 0 and omega > 0")
        if self.kind != HARMONIC_OSCILLATOR and self.coupling < 0:
            raise ConfigurationError("coupling must be non-negative")

    @property
    def is_gauge(self) -> bool:
        return self.kind != HARMONIC_OSCILLATOR

    @property
    def dims(self) -> int:
        return 4 if self.is_gauge else 1

    @property
    def n_colors(self) -> int:
        return 3 if self.kind == GAUGE_SU2 else 1

    @property
    def n_components(self) -> int:
        return 4 * self.n_colors if self.is_gauge else 1

    def _kernel_args(self):
        kind = _kernels.KIND_GAUGE if self.is_gauge else _kernels.KIND_HO
        coupling = self.coupling if self.kind == GAUGE_SU2 else 0.0
        return kind, float(self.mass), float(self.omega) ** 2, self.n_colors, float(coupling)


@dataclass(frozen=True)
class QuadratureSpec:
    """Uniform midpoint rule on the torus; nodes sit at ``(j + 1/2) * h``."""

    nodes_per_axis: tuple
    rule: str = "midpoint-uniform"

    def __post_init__(self):
        n = tuple(int(v) for v in self.nodes_per_axis)
        object.__setattr__(self, "nodes_per_axis", n)
        if any(v <= 0 for v in n):
            raise ConfigurationError("nodes_per_axis must be positive")
        if self.rule != "midpoint-uniform":
            raise ConfigurationError(f"unsupported quadrature rule {self.rule!r}")

    @classmethod
    def for_width(cls, domain: PeriodicDomain, min_width: float,
                  spacing_ratio: float = 0.25) -> "QuadratureSpec":
        """Coarsest grid with spacing <= ``spacing_ratio * min_width``."""
        n = tuple(int(math.ceil(e / (spacing_ratio * min_width) - 1e-9))
                  for e in domain.extents)
        return cls(n)

    def spacings(self, domain: PeriodicDomain) -> np.ndarray:
        return np.asarray(domain.extents) / np.asarray(self.nodes_per_axis)

    def cell_volume(self, domain: PeriodicDomain) -> float:
        return float(np.prod(self.spacings(domain)))

    def check(self, domain: PeriodicDomain, min_width: float, spacing_ratio: float = 0.25):
        if len(self.nodes_per_axis) != domain.dims:
            raise ConfigurationError("quadrature dims do not match the domain")
        h = self.spacings(domain)
        if np.any(h > spacing_ratio * min_width * (1 + 1e-9)):
            raise ConfigurationError(
                f"node spacing {h.max():.4g} exceeds {spacing_ratio} x min width {min_width:.4g}")

    def node_coordinates(self, domain: PeriodicDomain) -> np.ndarray:
        """Node positions, shape (n_nodes, dims), flattened row-major."""
        axes = [(np.arange(n) + 0.5) * h
                for n, h in zip(self.nodes_per_axis, self.spacings(domain))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _check_kinds(config: Configuration, model: PhysicsModel):
    if config.domain.dims != model.dims or config.n_components != model.n_components:
        raise ConfigurationError(
            f"configuration ({config.n_components} components, {config.domain.dims}D) "
            f"does not match model {model.kind}")


class FieldCache:
    """Field values and gradients of a configuration on the quadrature nodes.

    Owned by a single chain.  :meth:`delta` evaluates the local action
    change of a one-term update; :meth:`apply` commits it to both the
    configuration and the cache.
    """

    def __init__(self, config: Configuration, model: PhysicsModel, quad: QuadratureSpec,
                 epsilon: float = DEFAULT_EPSILON):
        _check_kinds(config, model)
        if len(quad.nodes_per_axis) != config.domain.dims:
            raise ConfigurationError("quadrature dims do not match the domain")
        self.config = config
        self.model = model
        self.quad = quad
        self.epsilon = epsilon
        self.r_factor = math.sqrt(math.log(1.0 / epsilon))
        self.extents = np.asarray(config.domain.extents, dtype=float)
        self.nodes = np.asarray(quad.nodes_per_axis, dtype=np.int64)
        self.cell_volume = quad.cell_volume(config.domain)
        npts = int(np.prod(self.nodes))
        ncomp, dims = config.n_components, config.domain.dims
        self.vals = np.zeros((npts, ncomp))
        self.grads = np.zeros((npts, ncomp, dims))
        self._alloc_scratch()
        self.rebuild()

    def _alloc_scratch(self):
        h = self.extents / self.nodes
        rmax = float(self.config.widths.max()) * self.r_factor
        per_axis = np.minimum(self.nodes, 2 * (np.floor(rmax / h).astype(np.int64) + 2) + 1)
        cap = int(np.prod(per_axis))
        dims = self.config.domain.dims
        self._idx = np.empty(cap, np.int64)
        self._g = np.empty(cap)
        self._gp = np.empty((dims, cap))
        self._cand_idx = np.empty((dims, int(per_axis.max())), np.int64)
        self._cand_d = np.empty((2 * dims, int(per_axis.max())))

    @property
    def kernel_args(self):
        return self.model._kernel_args()

    def rebuild(self):
        """Recompute the node fields from the coefficients (drift reset)."""
        c = self.config
        _kernels.build_fields(c.coefficients, c.centers, c.widths, self.r_factor, self.extents,
                              self.nodes, self.vals, self.grads, self._idx, self._g, self._gp,
                              self._cand_idx, self._cand_d)

    def total(self) -> float:
        kind, mass, omega2, ncol, coupling = self.kernel_args
        s = _kernels.density_sum(kind, self.vals, self.grads, mass, omega2, ncol, coupling)
        return s * self.cell_volume

    def density(self) -> np.ndarray:
        kind, mass, omega2, ncol, coupling = self.kernel_args
        out = np.empty(self.vals.shape[0])
        _kernels.density_at_nodes(kind, self.vals, self.grads, mass, omega2, ncol, coupling,
                                  out)
        return out

    def _stencil(self, component, index):
        c = self.config
        w = float(c.widths[component, index])
        r2 = (w * self.r_factor) ** 2
        return _kernels.stencil(c.centers[component, index], w, r2, self.extents, self.nodes,
                                self._idx, self._g, self._gp, self._cand_idx, self._cand_d)

    def delta(self, component: int, index: int, delta_coefficient: float) -> float:
        if not (0 <= component < self.config.n_components and 0 <= index < self.config.n_sum):
            raise IndexError(f"term ({component}, {index}) out of range")
        if delta_coefficient == 0.0:
            return 0.0
        cnt = self._stencil(component, index)
        kind, mass, omega2, ncol, coupling = self.kernel_args
        ds = _kernels.local_delta(kind, self.vals, self.grads, component, self._idx, self._g,
                                  self._gp, cnt, float(delta_coefficient), mass, omega2, ncol,
                                  coupling)
        return ds * self.cell_volume

    def apply(self, component: int, index: int, delta_coefficient: float):
        cnt = self._stencil(component, index)
        self.config.coefficients[component, index] += delta_coefficient
        _kernels.scatter(self.vals, self.grads, component, self._idx, self._g, self._gp, cnt,
                         float(delta_coefficient))

    def metropolis_block(self, draws: np.ndarray, cutoff: float):
        """Run one Metropolis update per row of ``draws``; returns (accepted, dS)."""
        kind, mass, omega2, ncol, coupling = self.kernel_args
        c = self.config
        acc, ds = _kernels.metropolis_block(
            kind, c.coefficients, c.centers, c.widths, self.r_factor, self.extents, self.nodes,
            self.vals, self.grads, np.ascontiguousarray(draws), float(cutoff),
            self.cell_volume, mass, omega2, ncol, coupling, self._idx, self._g, self._gp,
            self._cand_idx, self._cand_d)
        return int(acc), float(ds)


def action_total(config: Configuration, model: PhysicsModel, quad: QuadratureSpec,
                 epsilon: float = DEFAULT_EPSILON) -> float:
    """Quadrature value of the Euclidean action."""
    return FieldCache(config, model, quad, epsilon).total()


def action_delta(config: Configuration, model: PhysicsModel, quad: QuadratureSpec,
                 term_index, delta_coefficient: float, epsilon: float = DEFAULT_EPSILON,
                 cache: FieldCache | None = None) -> float:
    """``S[c + delta] - S[c]`` for a change of one coefficient.

    Only nodes inside the term's truncation radius are visited.  Pass a
    ``cache`` that tracks ``config`` to avoid rebuilding the node fields.
    """
    component, index = term_index
    if cache is None:
        cache = FieldCache(config, model, quad, epsilon)
    return cache.delta(component, index, delta_coefficient)


def lagrangian_density_average(config: Configuration, model: PhysicsModel,
                               quad: QuadratureSpec, epsilon: float = DEFAULT_EPSILON) -> float:
    """Action divided by the box volume (time average of L for the oscillator)."""
    return action_total(config, model, quad, epsilon) / config.domain.volume
