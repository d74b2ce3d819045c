import math

import numpy as np
import pytest
from scipy import stats

from gausspath.action import (GAUGE_SU2, GAUGE_U1, HARMONIC_OSCILLATOR, PhysicsModel,
                              action_total)
from gausspath.geometry import ConfigurationError
from gausspath.observables import ObservableSeries
from gausspath.oracle import gaussian_basis_moments
from gausspath.sampler import (ScaleStrategy, SimulationConfig, accept, chain_rng,
                               initialize, metropolis_step, propose, resync, run_chain,
                               run_ensemble)

HO = PhysicsModel(HARMONIC_OSCILLATOR)


def ho_sim(**kw):
    base = dict(model=HO, extents=(20.0,), n_sum=50, amplitude_cutoff=3.0,
                scale=ScaleStrategy.fixed(1.0), n_iteration=500, n_paths=2, seed=1)
    base.update(kw)
    return SimulationConfig(**base)


def small_gauge_sim(kind=GAUGE_SU2, **kw):
    base = dict(model=PhysicsModel(kind, coupling=3.5), extents=(4.0, 4.0, 4.0, 4.0),
                n_sum=16, center_grid=(2, 2, 2, 2), amplitude_cutoff=1.3,
                scale=ScaleStrategy.fixed(1.0), n_iteration=300, seed=2, spacing_ratio=0.5,
                measurement_interval=50, resync_interval=100)
    base.update(kw)
    return SimulationConfig(**base)


class TestConfig:
    def test_scale_strategy(self):
        with pytest.raises(ConfigurationError):
            ScaleStrategy.fixed(0.0)
        with pytest.raises(ConfigurationError):
            ScaleStrategy.random(1.0, 0.2)
        s = ScaleStrategy.random(0.2, 1.0)
        w = s.draw(np.random.default_rng(0), (1000,))
        assert w.min() >= 0.2 and w.max() <= 1.0
        assert (s.min_width, s.max_width) == (0.2, 1.0)

    @pytest.mark.parametrize("bad", [dict(n_sum=0), dict(amplitude_cutoff=0.0),
                                     dict(n_iteration=0), dict(start="warm"),
                                     dict(extents=(1.0, 2.0, 3.0, 4.0)), dict(epsilon=1.0),
                                     dict(update="checkerboard"), dict(center_grid=(7,))])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            ho_sim(**bad)

    def test_gauge_grid_must_match(self):
        with pytest.raises(ConfigurationError):
            small_gauge_sim(center_grid=(2, 2, 2, 3))


class TestInitialize:
    def test_cold_start(self):
        st = initialize(ho_sim(start="cold"))
        assert np.all(st.config.coefficients == 0.0)
        assert st.current_action == 0.0

    def test_hot_start_bounds_and_grid(self):
        sim = ho_sim()
        st = initialize(sim)
        c = st.config.coefficients
        assert np.all(np.abs(c) <= 3.0) and c.std() > 1.0
        np.testing.assert_allclose(st.config.centers[0, :, 0], np.arange(50) * 20.0 / 50)
        assert st.current_action == pytest.approx(
            action_total(st.config, sim.model, sim.quadrature()), rel=1e-12)

    def test_random_scale_widths(self):
        st = initialize(ho_sim(n_sum=100, scale=ScaleStrategy.random(0.2, 1.0)))
        w = st.config.widths
        assert w.shape == (1, 100) and w.min() >= 0.2 and w.max() <= 1.0

    def test_random_centers_inside_domain(self):
        st = initialize(ho_sim(center_placement="random"))
        x = st.config.centers
        assert np.all((x >= 0) & (x < 20.0))

    def test_gauge_lattice_centers(self):
        sim = small_gauge_sim()
        st = initialize(sim)
        assert st.config.centers.shape == (12, 16, 4)
        assert sorted(set(st.config.centers[0, :, 3])) == [0.0, 2.0]

    def test_per_chain_streams_differ(self):
        a = initialize(ho_sim(), 0).config.coefficients
        b = initialize(ho_sim(), 1).config.coefficients
        assert not np.array_equal(a, b)


class TestMetropolis:
    def test_non_positive_always_accepted(self):
        assert accept(0.0, 0.999999) and accept(-3.0, 0.999999)
        assert not accept(math.inf, 0.0)

    def test_acceptance_law(self):
        u = np.random.default_rng(9).random(1_000_000)
        rate = np.mean([accept(1.0, x) for x in u])
        assert abs(rate - math.exp(-1)) < 0.002

    def test_proposals_symmetric_and_uniform_over_terms(self):
        sim = small_gauge_sim()
        u = np.random.default_rng(4).random((1_000_000, 2))
        n = 1_000_000
        deltas = sim.amplitude_cutoff * (2 * u[:, 1] - 1)
        assert abs(deltas.mean()) < 3 * sim.amplitude_cutoff / math.sqrt(3 * n)
        picks = [propose(a, b, sim)[:2] for a, b in u[:20_000]]
        flat = np.array([k * sim.n_sum + i for k, i in picks])
        counts = np.bincount(flat, minlength=12 * 16)
        assert stats.chisquare(counts).pvalue > 1e-3
        comp, idx, d = propose(0.999999999, 1.0, sim)
        assert (comp, idx, d) == (11, 15, 1.3)

    def test_sweep_order(self):
        sim = ho_sim(update="sweep", n_sum=5)
        assert [propose(0.9, 0.5, sim, it)[1] for it in range(7)] == [0, 1, 2, 3, 4, 0, 1]

    @pytest.mark.parametrize("sim", [ho_sim(), small_gauge_sim(), ho_sim(update="sweep")],
                             ids=["ho", "su2", "ho-sweep"])
    def test_single_steps_match_block_kernel(self, sim):
        a = initialize(sim)
        b = initialize(sim)
        for _ in range(200):
            metropolis_step(a, sim)
        run_chain(b, sim, hooks=[], n_iteration=200)
        np.testing.assert_array_equal(a.config.coefficients, b.config.coefficients)
        assert a.accepted == b.accepted
        assert a.current_action == pytest.approx(b.current_action, rel=1e-9, abs=1e-9)


class TestRunChain:
    @pytest.mark.parametrize("kind", [GAUGE_U1, GAUGE_SU2])
    def test_drift_bound_gauge(self, kind):
        sim = small_gauge_sim(kind)
        st = initialize(sim)
        run_chain(st, sim)
        assert [it for it, _ in st.series.drifts] == [100, 200, 300]
        for _, d in st.series.drifts:
            assert abs(d) <= 1e-6 * (1 + abs(st.current_action))
        assert 0.0 < st.acceptance_rate < 1.0

    def test_series_schedule(self):
        sim = ho_sim(n_iteration=105, measurement_interval=10, resync_interval=50)
        st, series = run_chain(initialize(sim), sim)
        assert series.iterations == [0] + list(range(10, 101, 10)) + [105]
        assert set(series.names) >= {"action", "acceptance", "potential_avg", "q2_avg"}
        assert [it for it, _ in series.drifts] == [50, 100, 105]
        assert series.values["q2_avg"][-1] == pytest.approx(
            2 * series.values["potential_avg"][-1])

    def test_blocking_independence(self):
        a = initialize(ho_sim())
        b = initialize(ho_sim())
        run_chain(a, ho_sim(measurement_interval=7))
        run_chain(b, ho_sim(measurement_interval=50))
        np.testing.assert_array_equal(a.config.coefficients, b.config.coefficients)
        assert a.current_action == b.current_action

    def test_incremental_continuation(self):
        # bit-exact only when the split falls on a resync boundary
        sim = ho_sim(resync_interval=100)
        a = initialize(sim)
        run_chain(a, sim)
        b = initialize(sim)
        run_chain(b, sim, n_iteration=200)
        run_chain(b, sim)
        np.testing.assert_array_equal(a.config.coefficients, b.config.coefficients)
        assert a.series.to_dict() == b.series.to_dict()

    def test_resync_returns_drift(self):
        sim = ho_sim()
        st = initialize(sim)
        st.current_action += 1.0
        assert resync(st, sim) == pytest.approx(1.0)
        assert resync(st, sim) == 0.0

    def test_stop_on_convergence(self):
        sim = ho_sim(n_iteration=20_000, measurement_interval=20, start="cold")
        st, series = run_chain(initialize(sim), sim, stop_on_convergence=True)
        assert st.iteration < 20_000
        assert series.saturated("action")


class TestEnsemble:
    def test_single_path_is_run_chain(self):
        sim = ho_sim(n_paths=1)
        ((st, series),) = run_ensemble(sim)
        ref = initialize(sim)
        run_chain(ref, sim)
        np.testing.assert_array_equal(st.config.coefficients, ref.config.coefficients)
        assert series.to_dict() == ref.series.to_dict()

    def test_reproducible_and_worker_independent(self):
        sim = ho_sim(n_paths=3)
        one = run_ensemble(sim, workers=1, release=True)
        again = run_ensemble(sim, workers=1, release=True)
        two = run_ensemble(sim, workers=2, release=True)
        for (a, sa), (b, sb), (c, sc) in zip(one, again, two):
            assert sa.to_dict() == sb.to_dict() == sc.to_dict()
            np.testing.assert_array_equal(a.config.coefficients, c.config.coefficients)

    def test_chain_rng_is_spawned(self):
        x = chain_rng(5, 3).random(4)
        ss = np.random.SeedSequence(5, spawn_key=(3,))
        np.testing.assert_array_equal(x, np.random.Generator(np.random.PCG64(ss)).random(4))


class TestStationaryLaw:
    def test_fixed_basis_second_moment(self):
        # frozen centers and widths make exp(-S) Gaussian in the coefficients;
        # the sampled <q^2> must match the inverse of the quadratic form
        sim = ho_sim(extents=(10.0,), n_sum=10, n_iteration=30_000, measurement_interval=50,
                     n_paths=12, seed=3)
        ens = run_ensemble(sim)
        exact_v, exact_q2 = gaussian_basis_moments(ens[0][0].config, sim.model,
                                                   sim.quadrature())
        per_chain = []
        for _, s in ens:
            it = np.asarray(s.iterations)
            per_chain.append(s.column("q2_avg")[it >= 5000].mean())
        m = np.mean(per_chain)
        err = np.std(per_chain, ddof=1) / math.sqrt(len(per_chain))
        assert abs(m - exact_q2) < 4 * err + 0.01 * exact_q2
        assert exact_v == pytest.approx(0.5 * exact_q2)

    def test_one_coefficient_ks(self):
        sim = ho_sim(n_sum=1, n_iteration=1_000_000, measurement_interval=10,
                     resync_interval=100_000, seed=11, start="cold")
        st = initialize(sim)
        kappa = action_total(
            type(st.config)(st.config.domain, np.ones((1, 1)), st.config.centers,
                            st.config.widths), sim.model, sim.quadrature())

        def coefficient(state):
            return {"c": state.config.coefficients[0, 0]}

        run_chain(st, sim, hooks=[coefficient])
        c = st.series.column("c")[1:]
        assert len(c) == 100_000
        res = stats.kstest(c, "norm", args=(0.0, math.sqrt(1 / (2 * kappa))))
        assert res.pvalue > 0.01


def test_series_rejects_non_increasing():
    s = ObservableSeries()
    s.append(1, {"a": 1.0})
    with pytest.raises(ValueError):
        s.append(1, {"a": 2.0})
