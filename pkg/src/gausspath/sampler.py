"""Metropolis sampling of Gaussian-sum paths and fields.

One chain owns one configuration, its node cache and its random stream.
Every update consumes exactly three uniforms from the chain's PCG64
stream (term choice, proposal, acceptance), so a chain's trajectory does
not depend on how its iterations are blocked.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .action import FieldCache, PhysicsModel, QuadratureSpec
from .geometry import DEFAULT_EPSILON, Configuration, ConfigurationError, PeriodicDomain
from .observables import ObservableSeries, ho_observables

logger = logging.getLogger(__name__)

RNG_NAME = "numpy.PCG64/SeedSequence(seed, spawn_key=(chain,))"


@dataclass(frozen=True)
class ScaleStrategy:
    """Gaussian widths: one fixed value, or uniform draws in [low, high]."""

    mode: str = "fixed"
    width: float | None = 1.0
    low: float | None = None
    high: float | None = None

    def __post_init__(self):
        if self.mode == "fixed":
            if self.width is None or not self.width > 0:
                raise ConfigurationError("fixed scale needs width > 0")
        elif self.mode == "random":
            if self.low is None or self.high is None or not (0 < self.low <= self.high):
                raise ConfigurationError("random scale needs 0 < low <= high")
        else:
            raise ConfigurationError(f"unknown scale mode {self.mode!r}")

    @classmethod
    def fixed(cls, width: float) -> "ScaleStrategy":
        return cls("fixed", width=width)

    @classmethod
    def random(cls, low: float, high: float) -> "ScaleStrategy":
        return cls("random", width=None, low=low, high=high)

    @property
    def min_width(self) -> float:
        return self.width if self.mode == "fixed" else self.low

    @property
    def max_width(self) -> float:
        return self.width if self.mode == "fixed" else self.high

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.mode == "fixed":
            return np.full(shape, float(self.width))
        return rng.uniform(self.low, self.high, size=shape)


@dataclass(frozen=True)
class SimulationConfig:
    """All parameters of a run.

    ``center_grid`` gives the number of centers per axis for grid placement
    (its product must equal ``n_sum``).  ``spacing_ratio`` bounds the
    quadrature spacing relative to the smallest width.
    """

    model: PhysicsModel
    extents: tuple
    n_sum: int
    amplitude_cutoff: float
    scale: ScaleStrategy
    center_placement: str = "grid"
    center_grid: tuple | None = None
    start: str = "hot"
    n_iteration: int = 10_000
    n_paths: int = 1
    seed: int = 0
    spacing_ratio: float = 0.25
    epsilon: float = DEFAULT_EPSILON
    measurement_interval: int = 10
    resync_interval: int = 1000
    update: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        if self.center_grid is not None:
            object.__setattr__(self, "center_grid", tuple(int(v) for v in self.center_grid))
        if len(self.extents) != self.model.dims:
            raise ConfigurationError(
                f"{self.model.kind} needs {self.model.dims} extents, got {len(self.extents)}")
        PeriodicDomain(self.extents)
        for name in ("n_sum", "n_iteration", "n_paths", "measurement_interval",
                     "resync_interval"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.amplitude_cutoff > 0:
            raise ConfigurationError("amplitude_cutoff must be positive")
        if self.center_placement not in ("grid", "random"):
            raise ConfigurationError(f"unknown center placement {self.center_placement!r}")
        if self.start not in ("hot", "cold"):
            raise ConfigurationError(f"unknown start {self.start!r}")
        if self.update not in ("random", "sweep"):
            raise ConfigurationError(f"unknown update mode {self.update!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        if not self.spacing_ratio > 0:
            raise ConfigurationError("spacing_ratio must be positive")
        if self.center_placement == "grid":
            grid = self.grid
            if grid is None or len(grid) != self.model.dims or int(np.prod(grid)) != self.n_sum:
                raise ConfigurationError(
                    f"center_grid {self.center_grid} inconsistent with n_sum={self.n_sum}")

    @property
    def grid(self) -> tuple | None:
        if self.center_grid is not None:
            return self.center_grid
        return (self.n_sum,) if self.model.dims == 1 else None

    @property
    def domain(self) -> PeriodicDomain:
        return PeriodicDomain(self.extents)

    def quadrature(self) -> QuadratureSpec:
        return QuadratureSpec.for_width(self.domain, self.scale.min_width, self.spacing_ratio)

    def with_updates(self, **kw) -> "SimulationConfig":
        return replace(self, **kw)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent stream for one chain, derived by SeedSequence spawning."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class ChainState:
    config: Configuration
    current_action: float
    rng: np.random.Generator
    chain_index: int = 0
    iteration: int = 0
    accepted: int = 0
    cache: FieldCache | None = field(default=None, repr=False)
    series: ObservableSeries = field(default_factory=ObservableSeries)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.iteration if self.iteration else float("nan")

    def release(self):
        """Drop the node cache (it can be large for gauge fields)."""
        self.cache = None


def _grid_centers(extents, grid):
    axes = [np.arange(n) * (e / n) for n, e in zip(grid, extents)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _field_cache(sim: SimulationConfig, config: Configuration) -> FieldCache:
    quad = sim.quadrature()
    quad.check(sim.domain, float(config.widths.min()), sim.spacing_ratio)
    return FieldCache(config, sim.model, quad, sim.epsilon)


def initialize(sim: SimulationConfig, chain_index: int = 0,
               rng: np.random.Generator | None = None) -> ChainState:
    """Centers, widths and coefficients for a fresh chain.

    Draw order from the chain stream: centers (random placement only),
    widths (random scale only), coefficients (hot start only).
    """
    rng = chain_rng(sim.seed, chain_index) if rng is None else rng
    domain = sim.domain
    ncomp = sim.model.n_components
    if sim.center_placement == "grid":
        centers = np.broadcast_to(_grid_centers(domain.extents, sim.grid),
                                  (ncomp, sim.n_sum, domain.dims)).copy()
    else:
        centers = rng.random((ncomp, sim.n_sum, domain.dims)) * np.asarray(domain.extents)
    centers = domain.wrap(centers)
    widths = sim.scale.draw(rng, (ncomp, sim.n_sum))
    if sim.start == "hot":
        coef = rng.uniform(-sim.amplitude_cutoff, sim.amplitude_cutoff, (ncomp, sim.n_sum))
    else:
        coef = np.zeros((ncomp, sim.n_sum))
    config = Configuration(domain, coef, centers, widths)
    cache = _field_cache(sim, config)
    return ChainState(config, cache.total(), rng, chain_index=chain_index, cache=cache)


def ensure_cache(state: ChainState, sim: SimulationConfig) -> FieldCache:
    if state.cache is None:
        state.cache = _field_cache(sim, state.config)
    return state.cache


def accept(delta_s: float, u: float) -> bool:
    """Metropolis rule: accept with probability min(1, exp(-delta_s))."""
    return delta_s <= 0.0 or u < math.exp(-delta_s)


def propose(u0: float, u1: float, sim: SimulationConfig, iteration: int = 0):
    """Map two uniforms to a proposal ``(component, index, delta)``.

    The term is uniform over all ``n_components * n_sum`` terms (or cyclic
    in sweep mode) and ``delta`` is uniform in [-cutoff, cutoff].  The
    compiled block loop uses the same mapping.
    """
    nterms = sim.model.n_components * sim.n_sum
    if sim.update == "sweep":
        flat = iteration % nterms
    else:
        flat = min(int(u0 * nterms), nterms - 1)
    comp, idx = divmod(flat, sim.n_sum)
    return comp, idx, sim.amplitude_cutoff * (2.0 * u1 - 1.0)


def metropolis_step(state: ChainState, sim: SimulationConfig) -> ChainState:
    """One proposal on one term, judged by the Metropolis test (in place)."""
    cache = ensure_cache(state, sim)
    u = state.rng.random(3)
    comp, idx, delta = propose(u[0], u[1], sim, state.iteration)
    ds = cache.delta(comp, idx, delta)
    if accept(ds, u[2]):
        cache.apply(comp, idx, delta)
        state.current_action += ds
        state.accepted += 1
    state.iteration += 1
    return state


def _run_block(state: ChainState, sim: SimulationConfig, n: int):
    cache = ensure_cache(state, sim)
    draws = state.rng.random((n, 3))
    if sim.update == "sweep":
        # kernel picks terms from column 0; encode the cyclic order there
        nterms = sim.model.n_components * sim.n_sum
        order = (state.iteration + np.arange(n)) % nterms
        draws[:, 0] = (order + 0.5) / nterms
    acc, ds = cache.metropolis_block(draws, sim.amplitude_cutoff)
    state.iteration += n
    state.accepted += acc
    state.current_action += ds


def resync(state: ChainState, sim: SimulationConfig) -> float:
    """Rebuild the node cache and reset the running action; returns the drift."""
    cache = ensure_cache(state, sim)
    cache.rebuild()
    full = cache.total()
    drift = state.current_action - full
    state.current_action = full
    return drift


def default_hooks(sim: SimulationConfig) -> list[Callable]:
    if sim.model.is_gauge:
        def gauge_scalars(state):
            return {"lagrangian_avg": state.current_action / state.config.domain.volume}
        return [gauge_scalars]

    def ho_scalars(state):
        v, q2, _ = ho_observables(state.cache)
        return {"potential_avg": v, "q2_avg": q2}
    return [ho_scalars]


def _measure(state, sim, hooks):
    row = {"action": state.current_action,
           "acceptance": state.accepted / state.iteration if state.iteration else 0.0}
    for hook in hooks:
        row.update(hook(state))
    state.series.append(state.iteration, row)


def run_chain(state: ChainState, sim: SimulationConfig,
              hooks: Sequence[Callable] | None = None, n_iteration: int | None = None,
              stop_on_convergence: bool = False):
    """Advance ``state`` to ``n_iteration`` total updates (default: sim.n_iteration).

    Hooks are called every ``measurement_interval`` updates; every
    ``resync_interval`` updates (and at the end) the cache is rebuilt and
    the action drift is recorded.
    """
    target = sim.n_iteration if n_iteration is None else int(n_iteration)
    hooks = default_hooks(sim) if hooks is None else list(hooks)
    ensure_cache(state, sim)
    if not state.series.iterations or state.series.iterations[-1] != state.iteration:
        _measure(state, sim, hooks)
    mi, ri = sim.measurement_interval, sim.resync_interval
    while state.iteration < target:
        nxt = min(target, (state.iteration // mi + 1) * mi, (state.iteration // ri + 1) * ri)
        _run_block(state, sim, nxt - state.iteration)
        if state.iteration % ri == 0 or state.iteration == target:
            drift = resync(state, sim)
            state.series.drifts.append((state.iteration, drift))
        if state.iteration % mi == 0 or state.iteration == target:
            _measure(state, sim, hooks)
            if stop_on_convergence and state.series.saturated("action"):
                logger.info("chain %d saturated at %d", state.chain_index, state.iteration)
                break
    return state, state.series


def _chain_job(args):
    sim, index, hooks, release = args
    state = initialize(sim, index)
    run_chain(state, sim, hooks)
    if release:
        state.release()
    return state


def run_ensemble(sim: SimulationConfig, n_paths: int | None = None, workers: int = 1,
                 hooks: Sequence[Callable] | None = None, release: bool = False
                 ) -> list[tuple[ChainState, ObservableSeries]]:
    """Run independent chains; chain ``n`` draws from stream (seed, n).

    Results are returned in chain order, so they do not depend on
    ``workers``.  Hooks must be picklable when ``workers > 1``.
    """
    n = sim.n_paths if n_paths is None else int(n_paths)
    jobs = [(sim, i, hooks, release) for i in range(n)]
    if workers <= 1:
        states = [_chain_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            states = list(pool.map(_chain_job, jobs))
    return [(s, s.series) for s in states]
