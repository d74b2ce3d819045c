"""Measurements: oscillator averages, histograms, Wilson loops, potentials, fits."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, column_or_1d

from .geometry import DEFAULT_EPSILON, Configuration


class MeasurementError(ValueError):
    pass


# ---------------------------------------------------------------- series


@dataclass
class ObservableSeries:
    """Iteration-indexed scalars of one chain (or an ensemble average)."""

    iterations: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    drifts: list = field(default_factory=list)

    def append(self, iteration: int, row: Mapping[str, float]):
        if self.iterations and iteration <= self.iterations[-1]:
            raise MeasurementError("iterations must be strictly increasing")
        n = len(self.iterations)
        for key in row:
            if key not in self.values:
                self.values[key] = [float("nan")] * n
        for key, col in self.values.items():
            col.append(float(row.get(key, float("nan"))))
        self.iterations.append(int(iteration))

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.values[name], dtype=float)

    def last(self, name: str) -> float:
        return self.values[name][-1]

    def saturated(self, name: str = "action", window_frac: float = 0.1,
                  min_points: int = 20) -> bool:
        """Two trailing windows of ``window_frac`` of the series agree within
        one combined standard error of their means."""
        y = self.column(name)
        w = max(int(len(y) * window_frac), 2)
        if len(y) < max(min_points, 2 * w):
            return False
        a, b = y[-2 * w:-w], y[-w:]
        err = math.sqrt(a.var(ddof=1) / w + b.var(ddof=1) / w)
        return abs(a.mean() - b.mean()) < max(err, 1e-300)

    def to_dict(self) -> dict:
        return {"iterations": list(self.iterations),
                "values": {k: list(v) for k, v in self.values.items()},
                "drifts": [list(d) for d in self.drifts]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObservableSeries":
        return cls(list(d["iterations"]), {k: list(v) for k, v in d["values"].items()},
                   [tuple(x) for x in d.get("drifts", [])])


def merge_series(series: Sequence[ObservableSeries]) -> tuple[np.ndarray, dict]:
    """Ensemble mean and standard error per iteration.

    Returns ``(iterations, {name: (mean, stderr)})``.  Only iterations
    present in every chain are kept, so the result does not depend on
    chain order.
    """
    if not series:
        raise MeasurementError("no series to merge")
    common = set(series[0].iterations)
    for s in series[1:]:
        common &= set(s.iterations)
    its = np.array(sorted(common), dtype=np.int64)
    out = {}
    for name in series[0].names:
        rows = []
        for s in series:
            pos = {it: i for i, it in enumerate(s.iterations)}
            col = s.values[name]
            rows.append([col[pos[it]] for it in its])
        arr = np.asarray(rows, dtype=float)
        n = arr.shape[0]
        err = arr.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(arr.shape[1])
        out[name] = (arr.mean(axis=0), err)
    return its, out


def mean_and_error(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def jackknife(samples: np.ndarray, func) -> tuple[float, float]:
    """Leave-one-out estimate of ``func(mean over axis 0)`` and its error."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    full = func(x.mean(axis=0))
    if n < 2:
        return full, 0.0
    total = x.sum(axis=0)
    loo = np.array([func((total - x[i]) / (n - 1)) for i in range(n)])
    err = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return full, err


# ---------------------------------------------------------------- histograms


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mode: str = "density"

    @classmethod
    def from_samples(cls, samples, bins: int = 60, range: tuple | None = None,
                     mode: str = "density") -> "Histogram":
        x = np.asarray(samples, dtype=float).ravel()
        if range is None:
            lo, hi = float(x.min()), float(x.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            range = (lo, hi)
        counts, edges = np.histogram(x, bins=bins, range=range)
        return cls(edges, counts.astype(np.int64), mode)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def density(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(len(self.counts))
        return self.counts / (self.total * self.widths)

    def density_error(self) -> np.ndarray:
        """Poisson error of each bin's density (no autocorrelation correction)."""
        if self.total == 0:
            return np.zeros(len(self.counts))
        return np.sqrt(self.counts) / (self.total * self.widths)

    def values(self) -> np.ndarray:
        return self.density() if self.mode == "density" else self.counts.astype(float)

    def __add__(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.edges, other.edges):
            raise MeasurementError("cannot combine histograms with different edges")
        return Histogram(self.edges, self.counts + other.counts, self.mode)


# ---------------------------------------------------------------- oscillator


class HOObservables(NamedTuple):
    potential_avg: float
    q2_avg: float
    samples: np.ndarray


def ho_observables(source, model=None, quad=None, epsilon: float = DEFAULT_EPSILON):
    """Time averages of the potential term and of q^2 for one path.

    ``source`` is a :class:`~gausspath.action.FieldCache` or a
    configuration (then ``model`` and ``quad`` are required).  The averages
    use the same midpoint nodes as the action.
    """
    from .action import FieldCache

    if isinstance(source, Configuration):
        if model is None or quad is None:
            raise ValueError("model and quad are required for a bare configuration")
        source = FieldCache(source, model, quad, epsilon)
    q = source.vals[:, 0]
    model = source.model
    q2 = float(np.mean(q * q))
    return HOObservables(0.5 * model.mass * model.omega**2 * q2, q2, q.copy())


def path_samples(config: Configuration, samples_per_path: int, component: int = 0,
                 epsilon: float | None = DEFAULT_EPSILON) -> np.ndarray:
    """Values at ``samples_per_path`` equally spaced times (1D paths)."""
    from .geometry import evaluate

    T = config.domain.extents[0]
    tau = (np.arange(samples_per_path) + 0.5) * (T / samples_per_path)
    return evaluate(config, component, tau, epsilon)


def coordinate_histogram(ensemble: Iterable[Configuration], bins: int = 60,
                         samples_per_path: int = 400, range: tuple = (-4.0, 4.0),
                         epsilon: float | None = DEFAULT_EPSILON) -> Histogram:
    """Pooled, density-normalised histogram of q(tau) over all paths."""
    values = [path_samples(c, samples_per_path, 0, epsilon) for c in ensemble]
    return Histogram.from_samples(np.concatenate(values), bins=bins, range=range)


def field_value_histogram(ensemble: Iterable[Configuration], which: str = "field",
                          bins: int = 40, range: tuple = (-3.0, 3.0),
                          grid_per_axis: int | Sequence[int] = 8,
                          epsilon: float | None = DEFAULT_EPSILON) -> Histogram:
    """Distribution of gauge field values A_mu(x) or of the term coefficients.

    ``which='field'`` samples every component on a uniform grid of
    ``grid_per_axis`` midpoints per axis; ``which='coefficient'`` pools all
    coefficients directly.
    """
    from .geometry import evaluate

    pooled = []
    for config in ensemble:
        if which == "coefficient":
            pooled.append(config.coefficients.ravel())
        elif which == "field":
            n = np.broadcast_to(np.asarray(grid_per_axis), (config.domain.dims,))
            axes = [(np.arange(k) + 0.5) * (e / k) for k, e in zip(n, config.domain.extents)]
            pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
            for comp, _ in enumerate(config.coefficients):
                pooled.append(evaluate(config, comp, pts, epsilon))
        else:
            raise ValueError(f"which must be 'field' or 'coefficient', got {which!r}")
    return Histogram.from_samples(np.concatenate(pooled), bins=bins, range=range)


# ---------------------------------------------------------------- Wilson loops


def su2_exponential(theta: np.ndarray) -> np.ndarray:
    """exp(i theta . sigma / 2) as a unit quaternion (w, x, y, z).

    The matrix is ``w * 1 + i (x s1 + y s2 + z s3)``; built in closed form,
    so it is special-unitary for any input.
    """
    theta = np.asarray(theta, dtype=float)
    norm = np.linalg.norm(theta, axis=-1)
    half = 0.5 * norm
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(norm > 0, np.sin(half) / np.where(norm > 0, norm, 1.0), 0.5)
    out = np.empty(theta.shape[:-1] + (4,))
    out[..., 0] = np.cos(half)
    out[..., 1:] = theta * scale[..., None]
    return out


def quaternion_product(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Product of SU(2) elements in the (w, v) form; ``p @ q`` as matrices."""
    w1, v1 = p[..., :1], p[..., 1:]
    w2, v2 = q[..., :1], q[..., 1:]
    w = w1 * w2 - np.sum(v1 * v2, axis=-1, keepdims=True)
    v = w1 * v2 + w2 * v1 - np.cross(v1, v2)
    return np.concatenate([w, v], axis=-1)


_PAULI = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]])


def su2_matrix(q: np.ndarray) -> np.ndarray:
    """2x2 complex matrix of a quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=float)
    return q[..., 0, None, None] * np.eye(2) + 1j * np.einsum("...a,aij->...ij", q[..., 1:],
                                                              _PAULI)


@dataclass(frozen=True)
class LoopGeometry:
    corner: tuple
    space_axis: int
    T: float
    R: float
    time_axis: int = 3


def loop_segments(domain, loop: LoopGeometry, h: float):
    """Midpoints, directions and signed lengths of the discretised boundary.

    The rectangle is walked corner -> +R (space) -> +T (time) -> -R -> -T.
    """
    corner = np.asarray(loop.corner, dtype=float)
    legs = [(loop.space_axis, loop.R), (loop.time_axis, loop.T),
            (loop.space_axis, -loop.R), (loop.time_axis, -loop.T)]
    mids, dirs, lens = [], [], []
    start = corner.copy()
    for axis, length in legs:
        n = max(1, int(math.ceil(abs(length) / h - 1e-12)))
        step = length / n
        for j in range(n):
            m = start.copy()
            m[axis] += (j + 0.5) * step
            mids.append(m)
            dirs.append(axis)
            lens.append(step)
        start[axis] += length
    return domain.wrap(np.array(mids)), np.array(dirs), np.array(lens)


def wilson_loops(config: Configuration, model, loops: Sequence[LoopGeometry], h: float,
                 epsilon: float | None = DEFAULT_EPSILON, return_imag: bool = False):
    """Wilson loop values for many rectangles on one gauge configuration.

    U(1): cos of the accumulated phase g * sum A_mu dx_mu.  SU(2): half the
    trace of the path-ordered product of segment exponentials (later
    segments multiply from the left), so a trivial loop gives 1.
    """
    from .geometry import evaluate

    domain = config.domain
    ext = np.asarray(domain.extents)
    for lp in loops:
        if not (0 < lp.R < ext[lp.space_axis] and 0 < lp.T < ext[lp.time_axis]):
            raise MeasurementError(f"loop {lp.T}x{lp.R} does not fit in the box")
        if lp.space_axis == lp.time_axis:
            raise MeasurementError("loop plane needs two distinct axes")
    segs = [loop_segments(domain, lp, h) for lp in loops]
    counts = [len(s[0]) for s in segs]
    mids = np.concatenate([s[0] for s in segs])
    dirs = np.concatenate([s[1] for s in segs])
    lens = np.concatenate([s[2] for s in segs])
    ncol = model.n_colors
    fields = np.zeros((len(mids), ncol))
    for mu in range(4):
        sel = dirs == mu
        if not sel.any():
            continue
        for a in range(ncol):
            fields[sel, a] = evaluate(config, a * 4 + mu, mids[sel], epsilon)
    theta = model.coupling * fields * lens[:, None]
    bounds = np.concatenate([[0], np.cumsum(counts)])
    values = np.empty(len(loops))
    imag = np.zeros(len(loops))
    for k in range(len(loops)):
        th = theta[bounds[k]:bounds[k + 1]]
        if ncol == 1:
            phi = th[:, 0].sum()
            values[k] = math.cos(phi)
            imag[k] = math.sin(phi)
        else:
            u = su2_exponential(th)
            w = u[0]
            for j in range(1, len(u)):
                w = quaternion_product(u[j], w)
            values[k] = w[0]
    return (values, imag) if return_imag else values


def wilson_loop(config: Configuration, model, corner, plane: tuple, T_extent: float,
                R_extent: float, h: float, epsilon: float | None = DEFAULT_EPSILON) -> float:
    """Single rectangular loop; ``plane = (time_axis, space_axis)``."""
    loop = LoopGeometry(tuple(corner), plane[1], T_extent, R_extent, time_axis=plane[0])
    return float(wilson_loops(config, model, [loop], h, epsilon)[0])


# ---------------------------------------------------------------- potentials


@dataclass
class PotentialPoint:
    R: float
    V: float
    error: float
    T: float


def static_potential(loop_averages: Mapping[tuple, object], t: float,
                     T: float | Mapping[float, float] | None = None) -> list[PotentialPoint]:
    """V(R) = ln(<W(T,R)> / <W(T+t,R)>) / t.

    Values in ``loop_averages`` (keyed by (T, R)) are either ensemble
    averages or arrays of per-path averages; for arrays the error is a
    jackknife over paths.  By default each R uses the largest T whose
    partner T + t is also present.  Points with a non-positive average are
    dropped with a warning.
    """
    by_r: dict[float, list] = {}
    for (tt, r) in loop_averages:
        by_r.setdefault(float(r), []).append(float(tt))
    out = []
    for r in sorted(by_r):
        ts = sorted(by_r[r])
        if T is None:
            cands = [x for x in ts if any(math.isclose(x + t, y, rel_tol=1e-9, abs_tol=1e-12)
                                          for y in ts)]
            if not cands:
                continue
            t0 = cands[-1]
        else:
            t0 = T[r] if isinstance(T, Mapping) else float(T)
        t1 = next((y for y in ts if math.isclose(t0 + t, y, rel_tol=1e-9, abs_tol=1e-12)),
                  None)
        if t1 is None or t0 not in ts:
            continue
        w0 = np.atleast_1d(np.asarray(loop_averages[(t0, r)], dtype=float))
        w1 = np.atleast_1d(np.asarray(loop_averages[(t1, r)], dtype=float))
        if w0.mean() <= 0 or w1.mean() <= 0:
            warnings.warn(f"non-positive Wilson loop average at R={r}; point dropped",
                          RuntimeWarning, stacklevel=2)
            continue
        pair = np.stack([w0, w1], axis=-1)

        def potential(m):
            if m[0] <= 0 or m[1] <= 0:
                return float("nan")
            return math.log(m[0] / m[1]) / t

        v, err = jackknife(pair, potential)
        out.append(PotentialPoint(r, v, err, t0))
    return out


@dataclass
class PotentialFit:
    kind: str
    params: dict
    errors: dict
    covariance: np.ndarray
    chi2: float
    dof: int
    points: list

    def predict(self, R) -> np.ndarray:
        R = np.asarray(R, dtype=float)
        if self.kind == "linear":
            return self.params["sigma"] * R + self.params["b"]
        return -self.params["alpha"] / R + self.params["c"]


_FIT_BASIS = {
    "linear": (("sigma", "b"), lambda R: np.stack([R, np.ones_like(R)], axis=-1)),
    "coulomb": (("alpha", "c"), lambda R: np.stack([-1.0 / R, np.ones_like(R)], axis=-1)),
}


def fit_potential(points, kind: str = "linear") -> PotentialFit:
    """Weighted linear least squares for V = sigma R + b or V = -alpha/R + c.

    ``points`` are (R, V, error) triples or :class:`PotentialPoint`.  With
    positive errors the weights are 1/error^2 and the covariance is the
    inverse normal matrix; otherwise the fit is unweighted and the
    covariance is scaled by the residual variance.
    """
    if kind not in _FIT_BASIS:
        raise ValueError(f"unknown fit kind {kind!r}")
    rows = [(p.R, p.V, p.error) if isinstance(p, PotentialPoint) else tuple(p) for p in points]
    if len(rows) < 3:
        raise MeasurementError("need at least 3 points for a 2-parameter fit")
    R, V, E = (np.asarray(c, dtype=float) for c in zip(*rows))
    names, basis = _FIT_BASIS[kind]
    A = basis(R)
    weighted = bool(np.all(E > 0))
    w = 1.0 / E**2 if weighted else np.ones_like(R)
    normal = A.T @ (w[:, None] * A)
    if np.linalg.cond(normal) > 1e14:
        raise MeasurementError("singular normal equations")
    cov = np.linalg.inv(normal)
    beta = cov @ (A.T @ (w * V))
    resid = V - A @ beta
    chi2 = float(np.sum(w * resid**2))
    dof = len(R) - 2
    if not weighted:
        cov = cov * (chi2 / dof if dof > 0 else 0.0)
    if not np.all(np.isfinite(resid)):
        raise MeasurementError("non-finite fit residuals")
    err = np.sqrt(np.diag(cov))
    return PotentialFit(kind, dict(zip(names, map(float, beta))), dict(zip(names, map(float, err))),
                        cov, chi2, dof, rows)


class StaticPotentialRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_potential`.

    ``fit(R, V, sigma=None)`` with ``R`` of shape (n,) or (n, 1).
    """

    def __init__(self, kind: str = "linear"):
        self.kind = kind

    def fit(self, X, y, sigma=None):
        X, y = check_X_y(np.asarray(X, dtype=float).reshape(len(y), -1), y, y_numeric=True)
        err = np.zeros(len(y)) if sigma is None else column_or_1d(sigma)
        self.fit_ = fit_potential(list(zip(X[:, 0], y, err)), self.kind)
        self.coef_ = np.array(list(self.fit_.params.values()))
        self.coef_err_ = np.array(list(self.fit_.errors.values()))
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = np.asarray(X, dtype=float).reshape(-1, 1)
        return self.fit_.predict(X[:, 0])
