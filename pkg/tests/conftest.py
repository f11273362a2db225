"""Shared factories for small graphs, domains, and oracle-scale models."""

import numpy as np
import pytest

from gridcox.domain import SlopeUnitGraph
from gridcox.models import LatentComponent, custom_model, fixed_component
from gridcox.structures import PCPrior, besag_structure, iid_structure, rw1_structure
from gridcox.synthetic import TruthConfig, simulate_dataset


def path_graph(n):
    return SlopeUnitGraph(n, tuple((i, i + 1) for i in range(1, n)))


def star_graph(n):
    """Node 1 connected to every other node."""
    return SlopeUnitGraph(n, tuple((1, i) for i in range(2, n + 1)))


def random_connected_graph(rng, n):
    """Random spanning tree plus a few extra edges, 1-based nodes."""
    perm = rng.permutation(n) + 1
    edges = {tuple(sorted((int(perm[i - 1]), int(perm[i]))))
             for i in range(1, n)}
    for _ in range(rng.integers(0, n)):
        a, b = rng.integers(1, n + 1, size=2)
        if a != b:
            edges.add(tuple(sorted((int(a), int(b)))))
    return SlopeUnitGraph(n, tuple(sorted(edges)))


def make_dataset(model_id="M0", nx=8, ny=8, n_su=4, seed=11,
                 fixed_effects=None, hyperparameters=None, **kw):
    fixed_effects = fixed_effects or {
        "intercept": 0.3, "cont_1": 0.4, "slope": 0.2}
    hyperparameters = hyperparameters or {"tau_aspect": 4.0, "tau_lse": 2.0}
    truth = TruthConfig(
        model_id=model_id, nx=nx, ny=ny, n_su=n_su, seed=seed,
        fixed_effects=fixed_effects, hyperparameters=hyperparameters,
        n_continuous=kw.pop("n_continuous", 1), **kw)
    return simulate_dataset(truth)


@pytest.fixture(scope="session")
def m0_dataset():
    """One small M0 synthetic dataset shared across read-only tests."""
    return make_dataset()


def tiny_oracle_model(rng, n_pixels=80, kind="rw1", block_size=3,
                      pc=(1.0, 0.01), truth_tau=4.0, intercept=0.4):
    """Random small model with 1 structured block and its data.

    Latent dimension after constraints stays at or below 3 so the dense
    quadrature oracle applies.
    """
    fx = fixed_component(["intercept"], [0.0], [1.0])
    if kind == "rw1":
        comp = LatentComponent(name="blk", kind="rw1", size=block_size,
                               structure=rw1_structure(block_size),
                               hyper=PCPrior(*pc))
    elif kind == "crw1":
        comp = LatentComponent(name="blk", kind="crw1", size=block_size,
                               structure=rw1_structure(block_size, cyclic=True),
                               hyper=PCPrior(*pc))
    elif kind == "besag":
        comp = LatentComponent(name="blk", kind="car",
                               size=block_size,
                               structure=besag_structure(path_graph(block_size)),
                               hyper=PCPrior(*pc))
    elif kind == "iid":
        comp = LatentComponent(name="blk", kind="iid", size=block_size,
                               structure=iid_structure(block_size,
                                                       sum_to_zero=True),
                               hyper=PCPrior(*pc))
    else:
        raise ValueError(kind)
    assign = rng.integers(0, block_size, size=n_pixels)
    B = np.zeros((n_pixels, 1 + block_size))
    B[:, 0] = 1.0
    B[np.arange(n_pixels), 1 + assign] = 1.0
    model = custom_model([fx, comp], B, pixel_area=1.0)

    x_true = np.zeros(1 + block_size)
    x_true[0] = intercept
    raw = rng.standard_normal(block_size) / np.sqrt(truth_tau)
    x_true[1:] = raw - raw.mean()
    y = rng.poisson(np.exp(B @ x_true))
    return model, y
