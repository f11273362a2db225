"""Model assembly: component inventory, incidence, priors, constraints."""

import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import norm

from gridcox.domain import N_ASPECT_BINS, N_SLOPE_CLASSES
from gridcox.models import (
    INTERCEPT_ONLY,
    MODEL_IDS,
    LatentComponent,
    ModelError,
    PriorSettings,
    assemble,
    custom_model,
    fixed_component,
)
from gridcox.structures import PCPrior, pc_prior_log_density, rw1_structure

from conftest import make_dataset


@pytest.fixture(scope="module")
def ds():
    return make_dataset(model_id="M2", n_su=5,
                        hyperparameters={"tau_aspect": 4.0, "tau_lse": 2.0,
                                         "tau_slope_classes": 4.0,
                                         "tau_cat_1": 4.0},
                        categorical_levels=(3,))


def names_of(model):
    return [c.name for c in model.components]


class TestInventory:
    def test_intercept_only(self, ds):
        m = assemble(INTERCEPT_ONLY, ds.domain)
        assert names_of(m) == ["fixed"]
        assert m.components[0].labels == ("intercept",)
        assert m.n_hyper == 0
        assert m.total_dim == 1
        assert m.n_constraints == 0

    def test_m0(self, ds):
        m = assemble("M0", ds.domain)
        assert names_of(m) == ["fixed", "cat_1", "aspect", "lse"]
        # linear slope is a fixed effect in M0
        assert m.components[0].labels == ("intercept", "cont_1", "slope")
        assert m.hyper_names == ["tau_cat_1", "tau_aspect", "tau_lse"]
        assert m.total_dim == 3 + 3 + N_ASPECT_BINS + 5
        assert not m.has_beta

    def test_m1a_adds_pixel_noise(self, ds):
        m = assemble("M1a", ds.domain)
        assert names_of(m)[-1] == "grid_iid"
        assert m.components[-1].size == ds.domain.n_grid
        assert m.hyper_names[-1] == "tau_grid_iid"

    def test_m1b_adds_su_noise(self, ds):
        m = assemble("M1b", ds.domain)
        assert names_of(m)[-1] == "su_iid"
        assert m.components[-1].size == 5

    def test_m2_swaps_linear_slope_for_classes(self, ds):
        m = assemble("M2", ds.domain)
        assert names_of(m) == ["fixed", "cat_1", "aspect", "slope_classes", "lse"]
        assert "slope" not in m.components[0].labels
        assert m.components[3].size == N_SLOPE_CLASSES
        assert m.hyper_names == ["tau_cat_1", "tau_aspect",
                                 "tau_slope_classes", "tau_lse"]

    def test_m3_adds_svr_copy(self, ds):
        m = assemble("M3", ds.domain)
        assert names_of(m) == ["fixed", "cat_1", "aspect", "lse", "svr"]
        assert "slope" in m.components[0].labels
        assert m.components[-1].kind == "car_copy"
        # unconstrained by default: identified through slope weighting
        assert len(m.components[-1].structure.constraints) == 0

    def test_m3_svr_constraint_opt_in(self, ds):
        m = assemble("M3", ds.domain, PriorSettings(svr_sum_to_zero=True))
        assert len(m.components[-1].structure.constraints) == 1

    def test_m4_has_both_extensions(self, ds):
        m = assemble("M4", ds.domain)
        assert names_of(m) == ["fixed", "cat_1", "aspect", "slope_classes",
                               "lse", "svr"]
        assert m.hyper_names == ["tau_cat_1", "tau_aspect", "tau_slope_classes",
                                 "tau_lse", "tau_svr"]

    def test_m5_is_m2_plus_beta(self, ds):
        m2 = assemble("M2", ds.domain)
        m5 = assemble("M5", ds.domain)
        assert names_of(m5) == names_of(m2)
        assert m5.has_beta
        assert m5.hyper_names == m2.hyper_names + ["beta"]
        assert m5.n_hyper == m2.n_hyper + 1

    def test_constraint_inventory(self, ds):
        m = assemble("M4", ds.domain)
        # cat_1, aspect (cyclic), slope_classes, lse each carry one
        # sum-to-zero row; the svr copy is unconstrained by default
        assert m.n_constraints == 4
        assert m.constraints.shape == (4, m.total_dim)
        for row in m.constraints:
            nz = row[row != 0]
            assert np.all(nz == 1.0)

    def test_unknown_model(self, ds):
        with pytest.raises(ModelError, match="unknown model M9"):
            assemble("M9", ds.domain)

    def test_slope_models_need_slope_column(self):
        from gridcox.domain import SlopeUnitGraph, build_domain
        g = SlopeUnitGraph(2, [(1, 2)])
        d = build_domain([1, 2, 3], [1, 1, 2], [0, 1, 0],
                         [[0.1], [0.5], [0.9]], ["cont_1"],
                         [], [], [0.1, 0.2, 0.3], None, g, 1.0)
        for mid in ("M2", "M3", "M4", "M5"):
            with pytest.raises(ModelError, match="missing slope column"):
                assemble(mid, d)
        # M0/M1 degrade gracefully: no linear slope term
        m = assemble("M0", d)
        assert "slope" not in m.components[0].labels


class TestIncidence:
    def test_row_sums(self, ds):
        # every pixel touches intercept, cat, aspect, slope-class, lse once
        m = assemble("M2", ds.domain)
        B = m.incidence([1.0, 1.0, 1.0, 1.0])
        base = np.asarray(B.sum(axis=1)).ravel()
        expect = 4.0 + 1.0 + ds.domain.continuous[:, 0]
        np.testing.assert_allclose(base, expect, atol=1e-12)

    def test_incidence_independent_of_tau(self, ds):
        m = assemble("M0", ds.domain)
        a = m.incidence([1.0, 1.0, 1.0])
        b = m.incidence([9.0, 0.2, 5.0])
        assert (a != b).nnz == 0

    def test_m5_beta_scales_lse_columns(self, ds):
        m2 = assemble("M2", ds.domain)
        m5 = assemble("M5", ds.domain)
        th2 = [1.0, 1.0, 1.0, 1.0]
        B0 = m5.incidence(th2 + [0.0])
        assert (B0 != m2.incidence(th2)).nnz == 0
        beta = 0.7
        Bb = m5.incidence(th2 + [beta]).toarray()
        lse = next(c for c in m5.components if c.name == "lse")
        cols = slice(lse.offset, lse.offset + lse.size)
        diff = Bb - B0.toarray()
        assert np.all(diff[:, :lse.offset] == 0.0)
        got = diff[np.arange(m5.n_grid), lse.offset + ds.domain.su_index]
        np.testing.assert_allclose(got, beta * ds.domain.slope_value, atol=1e-12)

    def test_incidence_row_matches_matrix(self, ds):
        m = assemble("M0", ds.domain)
        theta = [1.0, 2.0, 3.0]
        B = m.incidence(theta).toarray()
        for k in (0, 7, ds.domain.n_grid - 1):
            pix = m.domain.pixels[k]
            np.testing.assert_allclose(m.incidence_row(pix, theta), B[k])


class TestTheta:
    def test_check_theta_shape(self, ds):
        m = assemble("M0", ds.domain)
        with pytest.raises(ModelError, match="expects 3 hyperparameters"):
            m.check_theta([1.0])

    def test_check_theta_positivity(self, ds):
        m = assemble("M0", ds.domain)
        with pytest.raises(ModelError, match="positive"):
            m.check_theta([1.0, -2.0, 1.0])
        with pytest.raises(ModelError, match="non-finite"):
            m.check_theta([1.0, math.nan, 1.0])

    def test_m5_beta_may_be_negative(self, ds):
        m = assemble("M5", ds.domain)
        theta = m.check_theta([1.0, 1.0, 1.0, 1.0, -0.4])
        assert m.beta_value(theta) == -0.4


class TestPriors:
    def test_prior_precision_blocks(self, ds):
        m = assemble("M0", ds.domain)
        theta = np.array([2.0, 3.0, 5.0])
        Q = m.prior_precision(theta).toarray()
        # fixed block: configured precisions on the diagonal
        np.testing.assert_allclose(np.diag(Q)[:3], [1.0, 1.0, 1.0])
        for c, tau in zip(m.components[1:], theta):
            blk = Q[c.offset:c.offset + c.size, c.offset:c.offset + c.size]
            np.testing.assert_allclose(
                blk, tau * c.scaling * c.structure.matrix.toarray(), atol=1e-12)
        # block-diagonal: nothing off the component blocks
        mask = np.ones_like(Q, dtype=bool)
        for c in m.components:
            mask[c.offset:c.offset + c.size, c.offset:c.offset + c.size] = False
        assert np.all(Q[mask] == 0.0)

    def test_prior_mean_only_fixed_block(self, ds):
        m = assemble("M0", ds.domain,
                     PriorSettings(intercept_mean=-2.0, fixed_mean=0.5))
        mean = m.prior_mean
        np.testing.assert_allclose(mean[:3], [-2.0, 0.5, 0.5])
        assert np.all(mean[3:] == 0.0)

    def test_log_prior_latent_matches_manual(self):
        fx = fixed_component(["intercept"], [0.25], [2.0])
        comp = LatentComponent(name="w", kind="rw1", size=3,
                               structure=rw1_structure(3), hyper=PCPrior(1.0, 0.01))
        B = np.ones((4, 4))
        m = custom_model([fx, comp], B)
        x = np.array([0.7, 0.3, -0.1, -0.2])
        tau = 2.5
        got = m.log_prior_latent(x, [tau])
        fixed_part = norm.logpdf(0.7, loc=0.25, scale=1 / math.sqrt(2.0))
        taus = tau * comp.scaling
        R = comp.structure.matrix.toarray()
        quad = x[1:] @ R @ x[1:]
        # rw1 with one sum-to-zero constraint: effective dimension 2
        struct_part = (-0.5 * 2 * math.log(2 * math.pi)
                       + 0.5 * (2 * math.log(taus) + comp.gen_logdet)
                       - 0.5 * taus * quad)
        assert got == pytest.approx(fixed_part + struct_part, rel=1e-12)

    def test_log_prior_latent_rejects_violated_constraint(self):
        fx = fixed_component(["intercept"], [0.0], [1.0])
        comp = LatentComponent(name="w", kind="rw1", size=3,
                               structure=rw1_structure(3), hyper=PCPrior(1.0, 0.01))
        m = custom_model([fx, comp], np.ones((2, 4)))
        with pytest.raises(ModelError, match="violates constraints"):
            m.log_prior_latent([0.0, 1.0, 1.0, 1.0], [1.0])

    def test_log_prior_hyper_matches_pc_density(self, ds):
        m = assemble("M0", ds.domain)
        theta = np.array([0.7, 2.0, 9.0])
        got = m.log_prior_hyper(theta)
        want = sum(pc_prior_log_density(t, c.hyper)
                   for t, c in zip(theta, m.components[1:]))
        assert got == pytest.approx(want, rel=1e-12)

    def test_log_prior_hyper_m5_beta_gaussian(self, ds):
        priors = PriorSettings(beta_mean=1.0, beta_precision=10.0)
        m2 = assemble("M2", ds.domain, priors)
        m5 = assemble("M5", ds.domain, priors)
        th = [1.0, 1.5, 2.0, 0.5]
        beta = 0.3
        got = m5.log_prior_hyper(th + [beta])
        want = m2.log_prior_hyper(th) + norm.logpdf(
            beta, loc=1.0, scale=1 / math.sqrt(10.0))
        assert got == pytest.approx(want, rel=1e-12)

    def test_component_pc_override(self, ds):
        priors = PriorSettings(component_pc={"aspect": (0.5, 0.05)})
        m = assemble("M0", ds.domain, priors)
        aspect = next(c for c in m.components if c.name == "aspect")
        lse = next(c for c in m.components if c.name == "lse")
        assert aspect.hyper == PCPrior(0.5, 0.05)
        assert lse.hyper == PCPrior(5.0, 0.01)


class TestComponentValidation:
    def test_fixed_component_rejects_structure(self):
        with pytest.raises(ModelError, match="no structure"):
            LatentComponent(name="f", kind="fixed", size=1,
                            structure=rw1_structure(3),
                            fixed_prior_means=np.zeros(1),
                            fixed_prior_precisions=np.ones(1))

    def test_structured_needs_exactly_one_precision_source(self):
        with pytest.raises(ModelError, match="hyperprior or a fixed tau"):
            LatentComponent(name="w", kind="rw1", size=3,
                            structure=rw1_structure(3))
        with pytest.raises(ModelError, match="hyperprior or a fixed tau"):
            LatentComponent(name="w", kind="rw1", size=3,
                            structure=rw1_structure(3),
                            hyper=PCPrior(1.0, 0.01), fixed_tau=2.0)

    def test_size_mismatch(self):
        with pytest.raises(ModelError, match="dimension"):
            LatentComponent(name="w", kind="rw1", size=4,
                            structure=rw1_structure(3), hyper=PCPrior(1.0, 0.01))

    def test_incidence_shape_checked(self):
        fx = fixed_component(["intercept"], [0.0], [1.0])
        with pytest.raises(ModelError, match="incidence shape"):
            custom_model([fx], np.ones((3, 2)))


class TestLabels:
    def test_coordinate_labels_cover_vector(self, ds):
        m = assemble("M2", ds.domain)
        labels = m.coordinate_labels()
        assert len(labels) == m.total_dim
        assert labels[0] == ("fixed", 0, "intercept")
        lse = next(c for c in m.components if c.name == "lse")
        assert labels[lse.offset] == ("lse", 0, "1")
        assert labels[lse.offset + lse.size - 1] == ("lse", lse.size - 1, "5")

    def test_aspect_labels_default_indices(self, ds):
        m = assemble("M0", ds.domain)
        aspect = next(c for c in m.components if c.name == "aspect")
        assert aspect.labels == tuple(str(i) for i in range(N_ASPECT_BINS))


@pytest.mark.parametrize("mid", MODEL_IDS + (INTERCEPT_ONLY,))
def test_every_model_assembles(ds, mid):
    m = assemble(mid, ds.domain)
    assert m.model_id == mid
    assert m.total_dim >= 1
    theta = np.ones(m.n_hyper)
    Q = m.prior_precision(theta)
    assert sp.issparse(Q)
    assert Q.shape == (m.total_dim, m.total_dim)
    assert (abs(Q - Q.T) > 1e-12).nnz == 0
