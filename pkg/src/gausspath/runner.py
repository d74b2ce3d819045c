"""Experiment presets, config files, checkpoints and result export.

A run directory looks like::

    config.yaml          resolved configuration (schema_version 1)
    metadata.json        seed, RNG, versions, wall time, conventions
    series.csv           ensemble mean of the per-iteration scalars
    chains.csv           per-chain summary
    histogram_*.csv      pooled histograms
    loops.csv            <W(T, R)> with jackknife errors (gauge)
    potential.csv        V(R) from the declared (T, t) (gauge)
    potential_scan.csv   V(R) for every available (T, t) pair (gauge)
    fits.csv             potential fit parameters (gauge)
    summary.json         numbers used by ``report``
    checkpoints/chain_NNNN.npz

Every CSV float is written with ``repr`` so the files are bit-exact
records of the computation.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .action import GAUGE_SU2, GAUGE_U1, HARMONIC_OSCILLATOR, PhysicsModel
from .geometry import Configuration, ConfigurationError
from .observables import (Histogram, LoopGeometry, MeasurementError, ObservableSeries,
                          fit_potential, mean_and_error, merge_series,
                          path_samples, static_potential, wilson_loops)
from .sampler import (RNG_NAME, ChainState, ScaleStrategy, SimulationConfig,
                      ensure_cache, initialize, run_chain)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
PACKAGE_VERSION = "0.1.0"

SU2_LOOP_CONVENTION = "SU(2) loops report (1/2) Re tr W, so the unit loop is 1"
U1_LOOP_CONVENTION = "U(1) loops report Re exp(i phi) = cos(phi); mean sin(phi) kept as diagnostic"


class ResumeMismatch(RuntimeError):
    """Checkpoint cannot continue the requested run."""


class ArtifactError(RuntimeError):
    """A run directory lacks the files an operation needs."""


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class MeasurementPlan:
    """What is measured besides the per-iteration scalars.

    Wilson loops are taken every ``loop_interval`` updates once
    ``thermalization`` updates have passed, ``loop_positions`` random
    placements per (T, R).  ``potential_T`` and ``potential_t`` select the
    loop pair used for V(R); ``None`` means the two largest T that fit in
    half the time extent, one segment apart.
    """

    q_bins: int = 16
    q_range: tuple = (-4.0, 4.0)
    samples_per_path: int = 400
    field_bins: int = 24
    field_range: tuple = (-3.0, 3.0)
    coefficient_range: tuple = (-3.0, 3.0)
    field_grid_per_axis: int = 6
    loop_R: tuple = ()
    loop_T: tuple = ()
    loop_segment: float = 0.125
    loop_positions: int = 10
    loop_interval: int = 0
    thermalization: int = 0
    potential_T: float | None = None
    potential_t: float | None = None
    checkpoint_interval: int = 0

    def __post_init__(self):
        for name in ("q_range", "field_range", "coefficient_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise ConfigurationError(f"{name} must be increasing")
            object.__setattr__(self, name, (lo, hi))
        object.__setattr__(self, "loop_R", tuple(float(r) for r in self.loop_R))
        object.__setattr__(self, "loop_T", tuple(float(t) for t in self.loop_T))
        for name in ("q_bins", "samples_per_path", "field_bins", "field_grid_per_axis",
                     "loop_positions"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("loop_interval", "thermalization", "checkpoint_interval"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not self.loop_segment > 0:
            raise ConfigurationError("loop_segment must be positive")
        if any(r <= 0 for r in self.loop_R) or any(t <= 0 for t in self.loop_T):
            raise ConfigurationError("loop extents must be positive")

    @property
    def measures_loops(self) -> bool:
        return bool(self.loop_R) and bool(self.loop_T) and self.loop_interval > 0


def default_potential_times(time_extent: float, segment: float) -> tuple[float, float]:
    """(T, t): t is one segment, T + t the largest segment multiple below half the extent."""
    n = int(math.floor(0.5 * time_extent / segment - 1e-9))
    if n < 2:
        raise ConfigurationError("time extent too short for a potential pair")
    return (n - 1) * segment, segment


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    simulation: SimulationConfig
    plan: MeasurementPlan
    description: str = ""


def _gauge_preset(name, kind, coupling, n_axis, n_paths, n_iteration, thermalization, desk,
                  description, cutoff=1.3):
    sqrt_pi = math.sqrt(math.pi)
    width = 1.0
    space = n_axis * sqrt_pi * width
    grid = (n_axis, n_axis, n_axis, 2 * n_axis)
    sim = SimulationConfig(
        model=PhysicsModel(kind, coupling=coupling),
        extents=(space, space, space, 2 * space),
        n_sum=int(np.prod(grid)),
        amplitude_cutoff=cutoff / width,
        scale=ScaleStrategy.fixed(width),
        center_grid=grid,
        n_iteration=n_iteration,
        n_paths=n_paths,
        spacing_ratio=0.5 if desk else 0.25,
        epsilon=1e-4 if desk else 1e-8,
        measurement_interval=1000,
        resync_interval=5000 if desk else 10000,
    )
    r_max = 0.5 * space
    loop_R = tuple(0.5 * k for k in range(1, int(r_max / 0.5) + 1) if 0.5 * k < r_max)
    interval = 5000 if desk else 10000
    plan = MeasurementPlan(
        field_bins=24, field_range=(-1.2, 1.2), coefficient_range=(-2.4, 2.4),
        field_grid_per_axis=6, loop_R=loop_R, loop_T=(1.0, 2.0, 3.0),
        loop_segment=0.125 * width, loop_positions=10, loop_interval=interval,
        thermalization=thermalization, potential_T=1.0, potential_t=1.0,
        checkpoint_interval=interval)
    return ExperimentPreset(name, sim, plan, description)


def _ho_preset(name, n_sum, scale, description):
    sim = SimulationConfig(
        model=PhysicsModel(HARMONIC_OSCILLATOR, mass=1.0, omega=1.0),
        extents=(20.0,), n_sum=n_sum, amplitude_cutoff=3.0, scale=scale,
        n_iteration=10_000, n_paths=400, measurement_interval=10, resync_interval=1000)
    plan = MeasurementPlan(q_bins=16, q_range=(-4.0, 4.0), samples_per_path=400,
                           checkpoint_interval=1000)
    return ExperimentPreset(name, sim, plan, description)


PRESETS = {p.name: p for p in [
    _ho_preset("ho-A", 50, ScaleStrategy.fixed(1.0), "oscillator, 50 terms, fixed width 1"),
    _ho_preset("ho-B", 100, ScaleStrategy.random(0.2, 1.0),
               "oscillator, 100 terms, widths uniform in [0.2, 1]"),
    _ho_preset("ho-C", 200, ScaleStrategy.fixed(0.2), "oscillator, 200 terms, fixed width 0.2"),
    _gauge_preset("u1-full", GAUGE_U1, 0.303, 7, 50, 500_000, 300_000, False,
                  "U(1), 7^3 x 14 centers, 50 paths"),
    _gauge_preset("su2-full", GAUGE_SU2, 3.5, 7, 50, 1_000_000, 600_000, False,
                  "SU(2), 7^3 x 14 centers, 50 paths"),
    _gauge_preset("u1-desk", GAUGE_U1, 0.303, 5, 10, 150_000, 75_000, True,
                  "U(1), 5^3 x 10 centers, 10 paths, coarse quadrature (qualitative)"),
    _gauge_preset("su2-desk", GAUGE_SU2, 3.5, 5, 10, 400_000, 250_000, True,
                  "SU(2), 5^3 x 10 centers, 10 paths, coarse quadrature (qualitative)"),
]}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------- config documents

# document key -> (SimulationConfig / plan attribute) with the unit in the key name
_MODEL_KEYS = {"kind": "kind", "mass_natural": "mass", "omega_per_time": "omega",
               "coupling_dimensionless": "coupling"}
_SAMPLING_KEYS = {"start": "start", "update": "update", "n_iteration": "n_iteration",
                  "n_paths": "n_paths", "seed": "seed",
                  "measurement_interval_updates": "measurement_interval",
                  "resync_interval_updates": "resync_interval"}
_PLAN_KEYS = {
    "q_histogram_bins": "q_bins", "q_histogram_range_coord": "q_range",
    "q_samples_per_path": "samples_per_path",
    "field_histogram_bins": "field_bins", "field_histogram_range_field_units": "field_range",
    "coefficient_histogram_range_field_units": "coefficient_range",
    "field_grid_points_per_axis": "field_grid_per_axis",
    "loop_R_coord": "loop_R", "loop_T_coord": "loop_T", "loop_segment_coord": "loop_segment",
    "loop_positions_per_path": "loop_positions", "loop_interval_updates": "loop_interval",
    "thermalization_updates": "thermalization", "potential_T_coord": "potential_T",
    "potential_t_coord": "potential_t", "checkpoint_interval_updates": "checkpoint_interval",
}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def to_document(sim: SimulationConfig, plan: MeasurementPlan, name: str = "custom") -> dict:
    """Nested dict with explicit units in the key names (YAML-ready)."""
    m = sim.model
    basis = {"n_sum": sim.n_sum, "center_placement": sim.center_placement,
             "center_grid": _plain(sim.center_grid) if sim.center_grid else None,
             "width_mode": sim.scale.mode}
    if sim.scale.mode == "fixed":
        basis["width_coord"] = float(sim.scale.width)
    else:
        basis["width_low_coord"] = float(sim.scale.low)
        basis["width_high_coord"] = float(sim.scale.high)
    basis["amplitude_cutoff_field_units"] = float(sim.amplitude_cutoff)
    return {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "model": {k: _plain(getattr(m, a)) for k, a in _MODEL_KEYS.items()},
        "domain": {"extents_coord": [float(e) for e in sim.extents]},
        "basis": basis,
        "sampling": {k: _plain(getattr(sim, a)) for k, a in _SAMPLING_KEYS.items()},
        "quadrature": {"spacing_ratio_of_min_width": float(sim.spacing_ratio),
                       "truncation_epsilon": float(sim.epsilon)},
        "measurement": {k: _plain(getattr(plan, a)) for k, a in _PLAN_KEYS.items()},
    }


def _section(doc, name, allowed, required=()):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {', '.join(sorted(unknown))}")
    missing = [k for k in required if k not in sec]
    if missing:
        raise ConfigurationError(f"missing keys in {name!r}: {', '.join(missing)}")
    return sec


def from_document(doc) -> tuple[SimulationConfig, MeasurementPlan, str]:
    """Inverse of :func:`to_document`; raises ConfigurationError on bad input."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a mapping")
    allowed_top = {"schema_version", "name", "model", "domain", "basis", "sampling",
                   "quadrature", "measurement"}
    unknown = set(doc) - allowed_top
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    try:
        msec = _section(doc, "model", _MODEL_KEYS, ("kind",))
        model = PhysicsModel(**{_MODEL_KEYS[k]: v for k, v in msec.items()})
        dsec = _section(doc, "domain", {"extents_coord"}, ("extents_coord",))
        bsec = _section(doc, "basis", {"n_sum", "center_placement", "center_grid",
                                       "width_mode", "width_coord", "width_low_coord",
                                       "width_high_coord", "amplitude_cutoff_field_units"},
                        ("n_sum", "amplitude_cutoff_field_units"))
        mode = bsec.get("width_mode", "fixed")
        if mode == "fixed":
            scale = ScaleStrategy.fixed(float(bsec.get("width_coord", 1.0)))
        elif mode == "random":
            scale = ScaleStrategy.random(float(bsec["width_low_coord"]),
                                         float(bsec["width_high_coord"]))
        else:
            raise ConfigurationError(f"unknown width_mode {mode!r}")
        ssec = _section(doc, "sampling", _SAMPLING_KEYS)
        qsec = _section(doc, "quadrature", {"spacing_ratio_of_min_width", "truncation_epsilon"})
        grid = bsec.get("center_grid")
        kw = {_SAMPLING_KEYS[k]: v for k, v in ssec.items()}
        for key in ("n_iteration", "n_paths", "seed", "measurement_interval",
                    "resync_interval"):
            if key in kw:
                kw[key] = _as_int(kw[key], key)
        sim = SimulationConfig(
            model=model, extents=tuple(dsec["extents_coord"]), n_sum=_as_int(bsec["n_sum"],
                                                                             "n_sum"),
            amplitude_cutoff=float(bsec["amplitude_cutoff_field_units"]), scale=scale,
            center_placement=bsec.get("center_placement", "grid"),
            center_grid=tuple(grid) if grid else None,
            spacing_ratio=float(qsec.get("spacing_ratio_of_min_width", 0.25)),
            epsilon=float(qsec.get("truncation_epsilon", 1e-8)), **kw)
        psec = _section(doc, "measurement", _PLAN_KEYS)
        pkw = {}
        for k, v in psec.items():
            attr = _PLAN_KEYS[k]
            if isinstance(v, list):
                v = tuple(v)
            pkw[attr] = v
        plan = MeasurementPlan(**pkw)
    except ConfigurationError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc
    check_plan(sim, plan)
    return sim, plan, str(doc.get("name", "custom"))


def _as_int(v, name):
    if isinstance(v, bool) or not float(v).is_integer():
        raise ConfigurationError(f"{name} must be an integer")
    return int(v)


def check_plan(sim: SimulationConfig, plan: MeasurementPlan):
    """Cross-checks between the simulation and the measurement plan."""
    ri = sim.resync_interval
    for name in ("checkpoint_interval", "loop_interval"):
        v = getattr(plan, name)
        if v and v % ri:
            raise ConfigurationError(f"{name} ({v}) must be a multiple of resync_interval ({ri})")
    if plan.measures_loops:
        if not sim.model.is_gauge:
            raise ConfigurationError("Wilson loops need a gauge model")
        ext = sim.extents
        if max(plan.loop_R) >= min(ext[:3]) or max(plan.loop_T) >= ext[3]:
            raise ConfigurationError("loop extents must be smaller than the box")
        if (plan.potential_T is None) != (plan.potential_t is None):
            raise ConfigurationError("set both potential_T and potential_t, or neither")


def load_config(path) -> tuple[SimulationConfig, MeasurementPlan, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
    return from_document(doc)


def dump_config(sim: SimulationConfig, plan: MeasurementPlan, name: str = "custom") -> str:
    return yaml.safe_dump(to_document(sim, plan, name), sort_keys=False)


def apply_overrides(doc: dict, overrides) -> dict:
    """``section.key=value`` strings (value parsed as YAML) applied to a copy."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        sec, sub = key.split(".", 1)
        if not isinstance(doc.get(sec), dict):
            raise ConfigurationError(f"unknown config section {sec!r}")
        try:
            doc[sec][sub] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse override {item!r}") from exc
    return doc


def config_digest(sim: SimulationConfig, plan: MeasurementPlan) -> str:
    """Hash of everything a checkpoint depends on (the iteration target excluded)."""
    doc = to_document(sim, plan)
    doc.pop("name")
    doc["sampling"].pop("n_iteration")
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- checkpoints


@dataclass
class ChainRecord:
    """Everything a chain contributes to the outputs, plus its resumable state."""

    state: ChainState
    loop_iterations: list = field(default_factory=list)
    loop_values: list = field(default_factory=list)   # each (nT, nR), position-averaged
    loop_imag: list = field(default_factory=list)


def checkpoint_path(out_dir, chain: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"chain_{chain:04d}.npz"


def save_checkpoint(path, record: ChainRecord, digest: str):
    st = record.state
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "package_version": PACKAGE_VERSION,
        "config_digest": digest,
        "chain_index": st.chain_index,
        "iteration": st.iteration,
        "accepted": st.accepted,
        "current_action": st.current_action,
        "rng_state": st.rng.bit_generator.state,
        "series": st.series.to_dict(),
        "loop_iterations": list(record.loop_iterations),
    }
    cfg = st.config
    arrays = {
        "coefficients": cfg.coefficients, "centers": cfg.centers, "widths": cfg.widths,
        "extents": np.asarray(cfg.domain.extents),
        "loop_values": np.asarray(record.loop_values, dtype=float),
        "loop_imag": np.asarray(record.loop_imag, dtype=float),
        "meta": np.array(json.dumps(meta)),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, sim: SimulationConfig, digest: str | None = None) -> ChainRecord:
    """Restore a chain; raises ResumeMismatch on version or config disagreement."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k].copy() for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise ResumeMismatch(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ResumeMismatch(
            f"checkpoint version {meta.get('checkpoint_version')} != {CHECKPOINT_VERSION}")
    if digest is not None and meta.get("config_digest") != digest:
        raise ResumeMismatch(f"checkpoint {path} was written for a different configuration")
    from .geometry import PeriodicDomain

    config = Configuration(PeriodicDomain(tuple(arrays["extents"])), arrays["coefficients"],
                           arrays["centers"], arrays["widths"])
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]
    state = ChainState(config, float(meta["current_action"]), rng,
                       chain_index=int(meta["chain_index"]), iteration=int(meta["iteration"]),
                       accepted=int(meta["accepted"]),
                       series=ObservableSeries.from_dict(meta["series"]))
    lv, li = arrays["loop_values"], arrays["loop_imag"]
    return ChainRecord(state, list(meta["loop_iterations"]), [lv[i] for i in range(len(lv))],
                       [li[i] for i in range(len(li))])


# ---------------------------------------------------------------- chain work


def measurement_rng(seed: int, chain: int, iteration: int) -> np.random.Generator:
    """Stream for loop placement, separate from the Metropolis stream.

    Keyed on the iteration so measurements never perturb the chain and a
    resumed run places loops exactly where an uninterrupted one would.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chain), 1, int(iteration)))
    return np.random.Generator(np.random.PCG64(ss))


def measure_loops(config: Configuration, sim: SimulationConfig, plan: MeasurementPlan,
                  rng: np.random.Generator):
    """Position-averaged Wilson loops, arrays of shape (nT, nR) (real, imag).

    Every (T, R) uses the same random corners and space axes, which makes
    the ratios entering V(R) strongly correlated and less noisy.
    """
    ext = np.asarray(sim.extents)
    npos = plan.loop_positions
    corners = rng.random((npos, 4)) * ext
    axes = rng.integers(0, 3, size=npos)
    loops = [LoopGeometry(tuple(c), int(ax), T, R)
             for c, ax in zip(corners, axes) for T in plan.loop_T for R in plan.loop_R]
    re, im = wilson_loops(config, sim.model, loops, plan.loop_segment, sim.epsilon,
                          return_imag=True)
    shape = (npos, len(plan.loop_T), len(plan.loop_R))
    return re.reshape(shape).mean(axis=0), im.reshape(shape).mean(axis=0)


def _stops(start, target, *intervals):
    """Sorted iteration targets in (start, target] at multiples of the intervals."""
    stops = {target}
    for iv in intervals:
        if iv:
            k = start // iv + 1
            while k * iv < target:
                stops.add(k * iv)
                k += 1
    return sorted(s for s in stops if s > start)


def _final_measurements(record: ChainRecord, sim: SimulationConfig, plan: MeasurementPlan):
    cfg = record.state.config
    out = {}
    if sim.model.is_gauge:
        fgrid = np.full(4, plan.field_grid_per_axis)
        axes = [(np.arange(k) + 0.5) * (e / k) for k, e in zip(fgrid, cfg.domain.extents)]
        pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
        from .geometry import evaluate

        vals = np.concatenate([evaluate(cfg, c, pts, sim.epsilon)
                               for c in range(cfg.n_components)])
        out["field_counts"] = Histogram.from_samples(vals, plan.field_bins,
                                                     plan.field_range).counts
        out["coefficient_counts"] = Histogram.from_samples(
            cfg.coefficients, plan.field_bins, plan.coefficient_range).counts
    else:
        q = path_samples(cfg, plan.samples_per_path, 0, sim.epsilon)
        out["q_counts"] = Histogram.from_samples(q, plan.q_bins, plan.q_range).counts
    return out


def _chain_task(args):
    sim, plan, index, out_dir, digest, resume = args
    path = checkpoint_path(out_dir, index)
    if resume and path.exists():
        record = load_checkpoint(path, sim, digest)
        if record.state.iteration > sim.n_iteration:
            raise ResumeMismatch(f"chain {index} is already at iteration "
                                 f"{record.state.iteration} > {sim.n_iteration}")
    else:
        record = ChainRecord(initialize(sim, index))
    state = record.state
    ensure_cache(state, sim)
    loop_iv = plan.loop_interval if plan.measures_loops else 0
    for stop in _stops(state.iteration, sim.n_iteration, plan.checkpoint_interval, loop_iv):
        run_chain(state, sim, n_iteration=stop)
        if loop_iv and stop % loop_iv == 0 and stop >= plan.thermalization \
                and stop not in record.loop_iterations:
            re, im = measure_loops(state.config, sim, plan,
                                   measurement_rng(sim.seed, index, stop))
            record.loop_iterations.append(stop)
            record.loop_values.append(re)
            record.loop_imag.append(im)
        if (plan.checkpoint_interval and stop % plan.checkpoint_interval == 0) \
                or stop == sim.n_iteration:
            save_checkpoint(path, record, digest)
    if state.iteration == sim.n_iteration and not path.exists():
        save_checkpoint(path, record, digest)
    logger.info("chain %d done: %d updates, acceptance %.3f", index, state.iteration,
                state.acceptance_rate)
    finals = _final_measurements(record, sim, plan)
    state.release()
    return record, finals


# ---------------------------------------------------------------- outputs


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SERIES_SCALARS = {
    HARMONIC_OSCILLATOR: ("potential_avg", "q2_avg"),
    GAUGE_U1: ("lagrangian_avg",),
    GAUGE_SU2: ("lagrangian_avg",),
}


def _write_histogram(path, edges, counts_per_chain):
    counts = np.sum(counts_per_chain, axis=0)
    hist = Histogram(np.asarray(edges), counts)
    dens = hist.density()
    # bin-wise error from the spread over chains (accounts for correlations in a path)
    per = np.array([Histogram(np.asarray(edges), c).density() for c in counts_per_chain])
    n = len(per)
    err = per.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(dens))
    write_csv(path, ["bin_center", "density", "density_err", "count"],
              zip(hist.centers, dens, err, counts))
    return hist, err


def _loop_tables(records, plan):
    """Per-path loop averages keyed by (T, R); paths without snapshots skipped."""
    per_path = [np.mean(r.loop_values, axis=0) for r in records if r.loop_values]
    per_imag = [np.mean(r.loop_imag, axis=0) for r in records if r.loop_imag]
    if not per_path:
        return {}, None, None
    arr = np.asarray(per_path)
    table = {(T, R): arr[:, i, j] for i, T in enumerate(plan.loop_T)
             for j, R in enumerate(plan.loop_R)}
    return table, arr, np.asarray(per_imag)


def write_outputs(out_dir, sim: SimulationConfig, plan: MeasurementPlan, name: str,
                  results) -> dict:
    """Write every CSV and summary.json from the per-chain results (chain order)."""
    out = Path(out_dir)
    records = [r for r, _ in results]
    finals = [f for _, f in results]
    kind = sim.model.kind
    scalars = SERIES_SCALARS[kind]
    series = [r.state.series for r in records]
    its, merged = merge_series(series)
    header = ["iteration", "S", "S_err"]
    cols = [merged["action"][0], merged["action"][1]]
    for s in scalars:
        header += [s, s + "_err"]
        cols += [merged[s][0], merged[s][1]]
    header += ["acceptance"]
    cols += [merged["acceptance"][0]]
    write_csv(out / "series.csv", header, zip(its, *cols))

    summary = {"name": name, "kind": kind, "n_paths": len(records),
               "n_iteration": sim.n_iteration}
    chain_rows = []
    for r in records:
        st = r.state
        row = [st.chain_index, st.iteration, st.current_action, st.acceptance_rate]
        row += [st.series.last(s) for s in scalars]
        drifts = [abs(d) for _, d in st.series.drifts]
        row.append(max(drifts) if drifts else 0.0)
        chain_rows.append(row)
    write_csv(out / "chains.csv",
              ["chain", "iteration", "S", "acceptance", *scalars, "max_abs_drift"], chain_rows)
    summary["acceptance"] = mean_and_error([r.state.acceptance_rate for r in records])
    summary["max_abs_drift"] = max(row[-1] for row in chain_rows)

    if not sim.model.is_gauge:
        for s in scalars:
            summary[s] = mean_and_error([r.state.series.last(s) for r in records])
        edges = np.linspace(*plan.q_range, plan.q_bins + 1)
        _write_histogram(out / "histogram_q.csv", edges, [f["q_counts"] for f in finals])
    else:
        therm = plan.thermalization
        per_chain = []
        for s in series:
            it = np.asarray(s.iterations)
            col = s.column("lagrangian_avg")
            sel = it >= therm if np.any(it >= therm) else it == it[-1]
            per_chain.append(col[sel].mean())
        summary["lagrangian_avg"] = mean_and_error(per_chain)
        summary["lagrangian_avg_per_component"] = [
            v / sim.model.n_colors for v in summary["lagrangian_avg"]]
        edges = np.linspace(*plan.field_range, plan.field_bins + 1)
        _write_histogram(out / "histogram_field.csv", edges, [f["field_counts"] for f in finals])
        edges = np.linspace(*plan.coefficient_range, plan.field_bins + 1)
        _write_histogram(out / "histogram_coefficient.csv", edges,
                         [f["coefficient_counts"] for f in finals])
        if plan.measures_loops:
            summary.update(_write_loop_outputs(out, sim, plan, records))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _write_loop_outputs(out, sim, plan, records) -> dict:
    table, arr, imag = _loop_tables(records, plan)
    if not table:
        return {"potential": [], "fits": {}}
    rows = []
    for i, T in enumerate(plan.loop_T):
        for j, R in enumerate(plan.loop_R):
            m, e = mean_and_error(arr[:, i, j])
            rows.append([T, R, m, e, float(imag[:, i, j].mean()), len(arr)])
    write_csv(out / "loops.csv", ["T", "R", "W", "W_err", "W_imag", "n_paths"], rows)

    scan = []
    ts = sorted(plan.loop_T)
    for a in ts:
        for b in ts:
            if b > a:
                with _quiet():
                    pts = static_potential(table, b - a, a)
                scan += [[p.T, b - a, p.R, p.V, p.error] for p in pts]
    write_csv(out / "potential_scan.csv", ["T", "t", "R", "V", "err"], scan)

    if plan.potential_T is None:
        T, t = default_potential_times(sim.extents[3], plan.loop_segment)
    else:
        T, t = plan.potential_T, plan.potential_t
    with _quiet():
        points = static_potential(table, t, T)
    write_csv(out / "potential.csv", ["R", "V", "err", "T", "t"],
              [[p.R, p.V, p.error, p.T, t] for p in points])
    fits = {}
    fit_rows = []
    for kind in ("coulomb", "linear"):
        try:
            f = fit_potential(points, kind)
        except MeasurementError as exc:
            logger.warning("%s fit failed: %s", kind, exc)
            continue
        fits[kind] = {"params": f.params, "errors": f.errors, "chi2": f.chi2, "dof": f.dof}
        fit_rows += [[kind, k, f.params[k], f.errors[k]] for k in f.params]
    write_csv(out / "fits.csv", ["fit", "parameter", "value", "error"], fit_rows)
    return {"potential": [[p.R, p.V, p.error] for p in points], "potential_T": T,
            "potential_t": t, "fits": fits}


class _quiet:
    """Turn non-positive-loop warnings into log lines."""

    def __enter__(self):
        import warnings

        self._cm = warnings.catch_warnings(record=True)
        self._log = self._cm.__enter__()
        warnings.simplefilter("always")

    def __exit__(self, *exc):
        self._cm.__exit__(*exc)
        for w in self._log:
            logger.warning("%s", w.message)


def _versions() -> dict:
    import numba
    import scipy

    return {"gausspath": PACKAGE_VERSION, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def _write_metadata(out, sim, plan, name, wall, workers, command):
    meta_path = Path(out) / "metadata.json"
    history = []
    if meta_path.exists():
        try:
            history = json.loads(meta_path.read_text()).get("history", [])
        except json.JSONDecodeError:
            history = []
    history.append({"command": command, "wall_time_s": wall, "workers": workers,
                    "n_iteration": sim.n_iteration})
    meta = {
        "name": name,
        "config": to_document(sim, plan, name),
        "seed": sim.seed,
        "rng": RNG_NAME,
        "measurement_rng": "numpy.PCG64/SeedSequence(seed, spawn_key=(chain, 1, iteration))",
        "versions": _versions(),
        "checkpoint_version": CHECKPOINT_VERSION,
        "conventions": [SU2_LOOP_CONVENTION, U1_LOOP_CONVENTION],
        "wall_time_s": wall,
        "history": history,
    }
    meta_path.write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------- entry points


def _execute(sim, plan, name, out_dir, workers, resume):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(sim, plan)
    # written first so that an interrupted run can be resumed
    (out / "config.yaml").write_text(dump_config(sim, plan, name))
    jobs = [(sim, plan, i, str(out), digest, resume) for i in range(sim.n_paths)]
    t0 = time.perf_counter()
    if workers <= 1:
        results = [_chain_task(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chain_task, jobs))
    wall = time.perf_counter() - t0
    summary = write_outputs(out, sim, plan, name, results)
    _write_metadata(out, sim, plan, name, wall, workers, "resume" if resume else "run")
    return summary


def run_experiment(sim: SimulationConfig, plan: MeasurementPlan, out_dir, workers: int = 1,
                   name: str = "custom") -> dict:
    """Fresh run; existing checkpoints in ``out_dir`` are overwritten."""
    check_plan(sim, plan)
    return _execute(sim, plan, name, out_dir, workers, resume=False)


def resume_experiment(out_dir, n_iteration: int | None = None, workers: int = 1,
                      expected: tuple | None = None) -> dict:
    """Continue the run stored in ``out_dir`` up to ``n_iteration`` updates.

    ``expected`` = (sim, plan) guards against resuming with a different
    configuration.  Chains without a checkpoint start from scratch.
    """
    cfg = Path(out_dir) / "config.yaml"
    if not cfg.exists():
        raise ArtifactError(f"{out_dir} has no config.yaml to resume from")
    sim, plan, name = load_config(cfg)
    if expected is not None:
        esim, eplan = expected
        if config_digest(esim, eplan) != config_digest(sim, plan):
            raise ResumeMismatch("requested configuration differs from the stored run")
    if n_iteration is not None:
        sim = replace(sim, n_iteration=int(n_iteration))
    ckdir = Path(out_dir) / "checkpoints"
    if not ckdir.exists() or not any(ckdir.glob("chain_*.npz")):
        raise ResumeMismatch(f"no checkpoints in {ckdir}")
    return _execute(sim, plan, name, out_dir, workers, resume=True)


# reference values used by ``report``
def reference_targets(sim: SimulationConfig) -> dict:
    m = sim.model
    if m.kind == HARMONIC_OSCILLATOR:
        return {"potential_avg": m.omega / 4.0, "q2_avg": 1.0 / (2.0 * m.mass * m.omega)}
    if m.kind == GAUGE_U1:
        return {"alpha": m.coupling**2 / (4.0 * math.pi)}
    return {"sigma": 0.17}


def report(out_dir) -> str:
    """Summary table of a finished run with reference comparisons."""
    out = Path(out_dir)
    needed = ["config.yaml", "summary.json", "series.csv"]
    missing = [n for n in needed if not (out / n).exists()]
    if missing:
        raise ArtifactError(f"{out_dir}: missing {', '.join(missing)}")
    sim, plan, name = load_config(out / "config.yaml")
    summary = json.loads((out / "summary.json").read_text())
    targets = reference_targets(sim)
    lines = [f"run {name} ({sim.model.kind}), {summary['n_paths']} paths x "
             f"{summary['n_iteration']} updates",
             f"{'quantity':<28}{'value':>14}{'error':>12}{'reference':>12}  flag"]

    def row(label, value, err, ref=None):
        flag = ""
        if ref is not None:
            ok = abs(value - ref) <= 3 * err + 0.05 * abs(ref)
            flag = "ok" if ok else "DEVIATES"
        ref_s = f"{ref:12.5g}" if ref is not None else " " * 12
        lines.append(f"{label:<28}{value:14.6g}{err:12.3g}{ref_s}  {flag}")

    row("acceptance", *summary["acceptance"])
    if sim.model.kind == HARMONIC_OSCILLATOR:
        row("<V_avg>", *summary["potential_avg"], targets["potential_avg"])
        row("<q^2_avg>", *summary["q2_avg"], targets["q2_avg"])
    else:
        row("<L_avg> (xi^-4)", *summary["lagrangian_avg"])
        row("<L_avg> per colour", *summary["lagrangian_avg_per_component"])
        fits = summary.get("fits", {})
        if "coulomb" in fits:
            f = fits["coulomb"]
            row("alpha (coulomb fit)", f["params"]["alpha"], f["errors"]["alpha"],
                targets.get("alpha"))
            row("c (coulomb fit)", f["params"]["c"], f["errors"]["c"])
        if "linear" in fits:
            f = fits["linear"]
            row("sigma (linear fit)", f["params"]["sigma"], f["errors"]["sigma"],
                targets.get("sigma"))
            row("b (linear fit)", f["params"]["b"], f["errors"]["b"])
    row("max |action drift|", summary["max_abs_drift"], 0.0)
    return "\n".join(lines)
