"""Independent references: the time-lattice oscillator and closed forms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .observables import Histogram, mean_and_error


@dataclass
class LatticeResult:
    potential_avg: float
    potential_err: float
    q2_avg: float
    q2_err: float
    histogram: Histogram
    acceptance: float
    paths: np.ndarray


def lattice_ho_simulate(n_lat: int, a: float, step: float, n_sweeps: int, n_ensemble: int,
                        seed: int, mass: float = 1.0, omega: float = 1.0, bins: int = 16,
                        hist_range: tuple = (-4.0, 4.0), hot: bool = True) -> LatticeResult:
    """Discretised Euclidean oscillator on a periodic time lattice.

    Action ``sum_i a [m/2 ((q_{i+1} - q_i)/a)^2 + m w^2/2 q_i^2]``; each sweep
    visits sites 1..n_lat in order with a uniform proposal in
    [-step, step].  All ensemble members are updated together (one site at
    a time), each with its own proposals.
    """
    rng = np.random.default_rng(seed)
    kin = mass / a
    pot = 0.5 * a * mass * omega**2
    if hot:
        q = rng.uniform(-step, step, size=(n_ensemble, n_lat))
    else:
        q = np.zeros((n_ensemble, n_lat))
    accepted = 0
    for _ in range(n_sweeps):
        draws = rng.random((n_lat, 2, n_ensemble))
        for i in range(n_lat):
            left = q[:, i - 1]
            right = q[:, (i + 1) % n_lat]
            old = q[:, i]
            new = old + step * (2.0 * draws[i, 0] - 1.0)
            ds = (0.5 * kin * ((right - new) ** 2 + (new - left) ** 2
                               - (right - old) ** 2 - (old - left) ** 2)
                  + pot * (new**2 - old**2))
            ok = (ds <= 0) | (draws[i, 1] < np.exp(-np.clip(ds, 0, None)))
            q[:, i] = np.where(ok, new, old)
            accepted += int(ok.sum())
    q2_path = np.mean(q * q, axis=1)
    v_path = 0.5 * mass * omega**2 * q2_path
    v, verr = mean_and_error(v_path)
    q2, q2err = mean_and_error(q2_path)
    hist = Histogram.from_samples(q, bins=bins, range=hist_range)
    acc = accepted / (n_sweeps * n_lat * n_ensemble)
    return LatticeResult(v, verr, q2, q2err, hist, acc, q)


def lattice_ho_exact_q2(n_lat: int, a: float, mass: float = 1.0, omega: float = 1.0) -> float:
    """Exact <q^2> of the periodic lattice oscillator (Gaussian integral).

    The action is ``q.M.q / 2`` with eigenvalues
    ``(4m/a) sin^2(pi k / N) + a m w^2``; ``<q_i^2> = mean_k 1/lambda_k``.
    """
    k = np.arange(n_lat)
    lam = 4.0 * mass / a * np.sin(math.pi * k / n_lat) ** 2 + a * mass * omega**2
    return float(np.mean(1.0 / lam))


@dataclass
class GroundState:
    potential: float
    q2: float
    density: Callable


def analytic_ground_state(mass: float = 1.0, omega: float = 1.0) -> GroundState:
    """<V> = w/4, <q^2> = 1/(2 m w) and |psi_0(q)|^2 of the oscillator."""
    if not (mass > 0 and omega > 0):
        raise ValueError("mass and omega must be positive")
    mw = mass * omega

    def density(q):
        return math.sqrt(mw / math.pi) * np.exp(-mw * np.asarray(q, dtype=float) ** 2)

    return GroundState(omega / 4.0, 1.0 / (2.0 * mw), density)


def ground_state_bin_density(edges, mass: float = 1.0, omega: float = 1.0) -> np.ndarray:
    """Bin-averaged |psi_0|^2 over histogram bins."""
    from scipy.special import erf

    s = math.sqrt(mass * omega)
    e = np.asarray(edges, dtype=float)
    return 0.5 * (erf(s * e[1:]) - erf(s * e[:-1])) / np.diff(e)


def analytic_single_gaussian_action(c: float, width: float, mass: float = 1.0,
                                    omega: float = 1.0) -> float:
    """Oscillator action of ``c exp(-t^2/w^2)`` on the infinite line."""
    return c * c * math.sqrt(math.pi) / (2.0 * math.sqrt(2.0)) * mass * (1.0 / width
                                                                        + omega**2 * width)


def gaussian_basis_moments(config, model, quad):
    """Exact equilibrium (<V_avg>, <q2_avg>) for a fixed oscillator basis.

    With centers and widths frozen the action is a quadratic form in the
    coefficients, so exp(-S) is Gaussian and every second moment follows
    from the inverse of that form.  Uses the same nodes as the action.
    """
    from .action import FieldCache

    ncoef = config.n_sum
    npts = int(np.prod(quad.nodes_per_axis))
    G = np.zeros((npts, ncoef))
    Gp = np.zeros((npts, ncoef))
    probe = config.copy()
    probe.coefficients[:] = 0.0
    cache = FieldCache(probe, model, quad)
    for i in range(ncoef):
        cnt = cache._stencil(0, i)
        G[cache._idx[:cnt], i] = cache._g[:cnt]
        Gp[cache._idx[:cnt], i] = cache._gp[0, :cnt]
    h = quad.cell_volume(config.domain)
    M = h * model.mass * (Gp.T @ Gp + model.omega**2 * G.T @ G)
    cov = np.linalg.inv(M)
    q2 = float(np.mean(np.einsum("pi,ij,pj->p", G, cov, G)))
    return 0.5 * model.mass * model.omega**2 * q2, q2
