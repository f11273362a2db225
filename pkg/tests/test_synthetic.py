"""Synthetic data generator and the two reference posterior oracles."""

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from gridcox.domain import load_domain
from gridcox.inference import GaussianObservation, poisson_loglik
from gridcox.models import (
    LatentComponent,
    custom_model,
    fixed_component,
)
from gridcox.structures import PCPrior, iid_structure, pc_prior_log_density
from gridcox.synthetic import (
    OracleError,
    OracleGrid,
    TruthConfig,
    dense_posterior_oracle,
    mcmc_oracle,
    simulate_counts,
    simulate_dataset,
    write_dataset,
)

from conftest import make_dataset, tiny_oracle_model


class TestTruthConfig:
    def test_intercept_required(self):
        with pytest.raises(ValueError, match="intercept"):
            TruthConfig("M0", 4, 4, 2, 0, fixed_effects={"slope": 1.0})

    def test_positive_precisions_required(self):
        with pytest.raises(ValueError, match="must be positive"):
            TruthConfig("M0", 4, 4, 2, 0,
                        fixed_effects={"intercept": 0.0},
                        hyperparameters={"tau_lse": -1.0})

    def test_beta_unrestricted(self):
        TruthConfig("M5", 4, 4, 2, 0,
                    fixed_effects={"intercept": 0.0},
                    hyperparameters={"beta": -0.5, "tau_lse": 1.0})

    def test_grid_dimensions_checked(self):
        with pytest.raises(ValueError, match="positive"):
            TruthConfig("M0", 0, 4, 2, 0, fixed_effects={"intercept": 0.0})


class TestSimulate:
    def test_deterministic(self):
        a = make_dataset(seed=5)
        b = make_dataset(seed=5)
        np.testing.assert_array_equal(a.domain.count, b.domain.count)
        np.testing.assert_array_equal(a.latent_truth, b.latent_truth)
        np.testing.assert_array_equal(a.raw_continuous, b.raw_continuous)

    def test_seed_changes_data(self):
        a = make_dataset(seed=5)
        b = make_dataset(seed=6)
        assert not np.array_equal(a.domain.count, b.domain.count)

    def test_missing_block_precision_rejected(self):
        with pytest.raises(ValueError, match="truth missing tau_aspect"):
            make_dataset(hyperparameters={"tau_lse": 1.0})

    def test_fixed_effects_planted_exactly(self):
        ds = make_dataset(fixed_effects={"intercept": -1.0, "cont_1": 0.7,
                                         "slope": 0.25})
        fx = ds.model.components[0]
        got = dict(zip(fx.labels, ds.latent_truth[:fx.size]))
        assert got == {"intercept": -1.0, "cont_1": 0.7, "slope": 0.25}

    def test_infinite_tau_suppresses_block(self):
        ds = make_dataset(hyperparameters={"tau_aspect": math.inf,
                                           "tau_lse": 2.0})
        aspect = next(c for c in ds.model.components if c.name == "aspect")
        block = ds.latent_truth[aspect.offset:aspect.offset + aspect.size]
        assert np.all(block == 0.0)

    def test_structured_blocks_satisfy_constraints(self):
        ds = make_dataset(seed=9)
        assert ds.model.constraint_violation(ds.latent_truth) < 1e-10

    def test_counts_follow_planted_intensity(self):
        # suppress every random block: eta is then exactly the intercept
        mu = 0.3
        domain, x_true = simulate_counts(TruthConfig(
            "M0", 100, 100, 4, seed=31,
            fixed_effects={"intercept": mu},
            hyperparameters={"tau_aspect": math.inf, "tau_lse": math.inf},
            n_continuous=1))
        lam = math.exp(mu)
        mean = domain.count.mean()
        se = math.sqrt(lam / domain.n_grid)
        assert abs(mean - lam) < 4.5 * se

    def test_block_prior_sampling_scale(self):
        # iid sum-to-zero block at precision tau: marginal variance of each
        # coordinate is (1 - 1/n) / tau after centering
        taus = 4.0
        draws = []
        for s in range(300):
            ds = make_dataset(model_id="M1b", nx=4, ny=4, n_su=4, seed=s,
                              hyperparameters={"tau_aspect": math.inf,
                                               "tau_lse": math.inf,
                                               "tau_su_iid": taus})
            c = next(c for c in ds.model.components if c.name == "su_iid")
            draws.append(ds.latent_truth[c.offset:c.offset + c.size])
        draws = np.array(draws)
        want = (1.0 - 1.0 / 4.0) / taus
        got = draws.var()
        se = want * math.sqrt(2.0 / draws.size)
        assert abs(got - want) < 5 * se

    def test_single_su_rejected(self):
        with pytest.raises(ValueError, match="at least 2 slope units"):
            simulate_dataset(TruthConfig(
                "M0", 4, 4, 1, 0, fixed_effects={"intercept": 0.0},
                hyperparameters={"tau_aspect": 1.0, "tau_lse": 1.0}))


class TestRoundTrip:
    def test_write_then_load_recovers_domain(self, tmp_path):
        ds = make_dataset(seed=12, categorical_levels=(3,),
                          hyperparameters={"tau_aspect": 4.0, "tau_lse": 2.0,
                                           "tau_cat_1": 4.0})
        px = tmp_path / "pixels.csv"
        adj = tmp_path / "adj.csv"
        tr = tmp_path / "truth.csv"
        with open(px, "w") as f1, open(adj, "w") as f2, open(tr, "w") as f3:
            write_dataset(ds, f1, f2, f3, header="# config_hash=ab seed=12")
        assert px.read_text().startswith("# config_hash=ab seed=12\n")
        d2 = load_domain(px, adj, pixel_area=ds.domain.pixel_area)
        np.testing.assert_array_equal(d2.count, ds.domain.count)
        np.testing.assert_array_equal(d2.su_id, ds.domain.su_id)
        np.testing.assert_array_equal(d2.aspect_bin, ds.domain.aspect_bin)
        np.testing.assert_array_equal(d2.slope_class, ds.domain.slope_class)
        np.testing.assert_array_equal(d2.categorical, ds.domain.categorical)
        np.testing.assert_allclose(d2.continuous, ds.domain.continuous,
                                   atol=1e-12)
        np.testing.assert_allclose(d2.slope_value, ds.domain.slope_value,
                                   atol=1e-12)
        assert d2.su_graph.edges == ds.domain.su_graph.edges

    def test_truth_file_lists_parameters(self, tmp_path):
        ds = make_dataset(seed=3)
        import io
        f1, f2, f3 = io.StringIO(), io.StringIO(), io.StringIO()
        write_dataset(ds, f1, f2, f3)
        text = f3.getvalue()
        assert text.startswith("parameter,value\n")
        entries = dict(line.split(",", 1)
                       for line in text.strip().split("\n")[1:])
        assert entries["model_id"] == "M0"
        assert float(entries["coef_intercept"]) == pytest.approx(0.3)
        assert float(entries["tau_aspect"]) == 4.0
        assert float(entries["seed"]) == 3


def gaussian_fixture(rng, n=12, dim=2):
    """Proper Gaussian model: fixed effects only, Gaussian observations."""
    names = [f"b{j}" for j in range(dim)]
    means = rng.normal(size=dim) * 0.3
    precisions = rng.uniform(0.5, 2.0, size=dim)
    fx = fixed_component(names, means, precisions)
    B = rng.standard_normal((n, dim))
    model = custom_model([fx], B)
    y = rng.standard_normal(n)
    p_obs = rng.uniform(0.8, 1.5, size=n)
    return model, B, y, means, precisions, GaussianObservation(p_obs), p_obs


class TestDenseOracle:
    def test_gaussian_closed_form(self):
        rng = np.random.default_rng(50)
        model, B, y, m0, p0, obs, p_obs = gaussian_fixture(rng)
        res = dense_posterior_oracle(model, y, obs=obs)
        Q = np.diag(p0) + B.T @ np.diag(p_obs) @ B
        mean = np.linalg.solve(Q, p0 * m0 + B.T @ (p_obs * y))
        sd = np.sqrt(np.diag(np.linalg.inv(Q)))
        np.testing.assert_allclose(res.latent_mean, mean, atol=2e-4)
        np.testing.assert_allclose(res.latent_sd, sd, rtol=2e-3)
        assert res.hyper_mean is None

    def test_poisson_intercept_only_against_line_quadrature(self):
        rng = np.random.default_rng(51)
        fx = fixed_component(["intercept"], [0.1], [1.0])
        B = np.ones((25, 1))
        model = custom_model([fx], B)
        y = rng.poisson(1.5, size=25).astype(float)
        res = dense_posterior_oracle(model, y)
        # independent 1-d quadrature on a much wider uniform grid
        g = np.linspace(-6, 6, 20001)
        logp = (norm.logpdf(g, loc=0.1)
                + y.sum() * g - 25.0 * np.exp(g))
        w = np.exp(logp - logp.max())
        w /= w.sum()
        mean = float(w @ g)
        sd = float(np.sqrt(w @ g ** 2 - mean ** 2))
        assert res.latent_mean[0] == pytest.approx(mean, abs=5e-5)
        assert res.latent_sd[0] == pytest.approx(sd, rel=1e-3)

    def test_one_hyper_against_per_z_gaussian_algebra(self):
        # proper iid block with a PC hyperprior and Gaussian observations:
        # conditional on z the posterior is exactly Gaussian, so mixture
        # moments reduce to a single z integral done here in closed form
        rng = np.random.default_rng(52)
        dim, n = 2, 30
        comp = LatentComponent(name="u", kind="iid", size=dim,
                               structure=iid_structure(dim, sum_to_zero=False),
                               hyper=PCPrior(1.0, 0.01))
        B = rng.standard_normal((n, dim))
        model = custom_model([comp], B)
        u_true = rng.normal(size=dim)
        p_obs = np.full(n, 4.0)
        y = B @ u_true + rng.normal(size=n) * 0.5
        obs = GaussianObservation(p_obs)

        grid = OracleGrid()
        res = dense_posterior_oracle(model, y, grid, obs=obs)

        lam = comp.hyper.rate
        z_med = -2.0 * math.log(math.log(2.0) / lam)
        zs = np.linspace(z_med - grid.z_below, z_med + grid.z_above, 4001)
        logw = np.empty(len(zs))
        means = np.empty((len(zs), dim))
        covs = np.empty((len(zs), dim, dim))
        for i, z in enumerate(zs):
            tau = math.exp(z)
            Q = tau * np.eye(dim) + B.T @ np.diag(p_obs) @ B
            S = np.linalg.inv(Q)
            mu = S @ (B.T @ (p_obs * y))
            cov_y = B @ (np.eye(dim) / tau) @ B.T + np.diag(1.0 / p_obs)
            logw[i] = (multivariate_normal.logpdf(y, mean=np.zeros(n),
                                                  cov=cov_y)
                       + pc_prior_log_density(tau, comp.hyper) + z)
            means[i] = mu
            covs[i] = S
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mean = w @ means
        second = np.einsum("z,zab->ab", w, covs) \
            + np.einsum("z,za,zb->ab", w, means, means)
        cov = second - np.outer(mean, mean)
        tau_mean = float(w @ np.exp(zs))

        np.testing.assert_allclose(res.latent_mean, mean, atol=2e-3)
        np.testing.assert_allclose(res.latent_sd, np.sqrt(np.diag(cov)),
                                   rtol=5e-3)
        assert res.hyper_mean == pytest.approx(tau_mean, rel=0.02)
        assert res.hyper_weights.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(res.hyper_values, np.exp(
            np.linspace(z_med - grid.z_below, z_med + grid.z_above,
                        grid.hyper_points)))

    def test_scope_limits(self):
        rng = np.random.default_rng(53)
        fx = fixed_component([f"b{j}" for j in range(5)], np.zeros(5),
                             np.ones(5))
        model = custom_model([fx], rng.standard_normal((8, 5)))
        with pytest.raises(OracleError, match="beyond oracle scope"):
            dense_posterior_oracle(model, np.zeros(8))

        model2, y2 = tiny_oracle_model(rng, n_pixels=20, block_size=8)
        with pytest.raises(OracleError, match="beyond oracle scope"):
            dense_posterior_oracle(model2, y2)

    def test_grid_resolution_policy(self):
        g = OracleGrid()
        assert g.points_for(1) == 1001
        assert g.points_for(2) == 201
        assert g.points_for(3) == 51
        assert OracleGrid(latent_points=77).points_for(2) == 77


class TestMcmcOracle:
    def test_gaussian_target_recovered(self):
        rng = np.random.default_rng(54)
        model, B, y, m0, p0, obs, p_obs = gaussian_fixture(rng, n=15, dim=2)
        res = mcmc_oracle(model, y, iterations=30_000, seed=7, obs=obs)
        Q = np.diag(p0) + B.T @ np.diag(p_obs) @ B
        mean = np.linalg.solve(Q, p0 * m0 + B.T @ (p_obs * y))
        sd = np.sqrt(np.diag(np.linalg.inv(Q)))
        np.testing.assert_allclose(res.latent_mean, mean, atol=0.05)
        np.testing.assert_allclose(res.latent.std(axis=0), sd, rtol=0.15)
        assert 0.05 <= res.acceptance_latent <= 0.8

    def test_constrained_chain_stays_on_subspace(self):
        rng = np.random.default_rng(55)
        model, y = tiny_oracle_model(rng, n_pixels=40, kind="iid")
        res = mcmc_oracle(model, y, iterations=4000, seed=3)
        A = model.constraints
        assert np.abs(A @ res.latent.T).max() < 1e-8

    def test_deterministic(self):
        rng = np.random.default_rng(56)
        model, y = tiny_oracle_model(rng, n_pixels=30)
        a = mcmc_oracle(model, y, iterations=2000, seed=11)
        b = mcmc_oracle(model, y, iterations=2000, seed=11)
        np.testing.assert_array_equal(a.latent, b.latent)
        np.testing.assert_array_equal(a.hyper_internal, b.hyper_internal)

    def test_latent_scope_limit(self):
        rng = np.random.default_rng(57)
        fx = fixed_component([f"b{j}" for j in range(250)], np.zeros(250),
                             np.ones(250))
        model = custom_model([fx], rng.standard_normal((10, 250)))
        with pytest.raises(OracleError, match="beyond sampler scope"):
            mcmc_oracle(model, np.zeros(10), iterations=100, seed=0)
