"""Synthetic data generation and brute-force posterior oracles.

The simulator draws structured latent blocks from their constrained priors
at known hyperparameters on a rectangular pixel grid with a rectangular
slope-unit partition, then Poisson counts through the model incidence.
Two oracles validate the inference engine on tiny instances: a dense
tensor-product quadrature of the exact posterior (latent dim <= 3, at most
one hyperparameter) and a random-walk Metropolis sampler (latent dim <= 200).
Both are verification tools; the production fit path never uses them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize
from scipy.stats import norm, poisson

from gridcox.domain import SpatialDomain, build_domain, SlopeUnitGraph
from gridcox.inference import PoissonObservation
from gridcox.models import LatentModel, ModelError, PriorSettings, assemble

_ORACLE_MAX_LATENT = 3
_ORACLE_MAX_HYPER = 1
_MCMC_MAX_LATENT = 200


class OracleError(RuntimeError):
    """Raised when an oracle is asked beyond its scope or misbehaves."""


@dataclass
class TruthConfig:
    """Generating configuration for a synthetic dataset.

    ``fixed_effects`` maps coefficient labels (intercept, cont_1, ...,
    slope) to true values; missing labels default to 0 but the intercept is
    required.  ``hyperparameters`` maps tau_<component> to true precisions
    (math.inf collapses a block to zero) and, for M5, beta to its true value.
    """

    model_id: str
    nx: int
    ny: int
    n_su: int
    seed: int
    fixed_effects: dict = field(default_factory=dict)
    hyperparameters: dict = field(default_factory=dict)
    n_continuous: int = 1
    categorical_levels: tuple = ()
    pixel_area: float = 1.0
    priors: PriorSettings | None = None

    def __post_init__(self):
        if "intercept" not in self.fixed_effects:
            raise ValueError("truth needs an intercept coefficient")
        for name, v in self.hyperparameters.items():
            if name != "beta" and not v > 0:
                raise ValueError(f"true precision {name} must be positive")
        if self.nx < 1 or self.ny < 1 or self.n_su < 1:
            raise ValueError("grid dimensions must be positive")


@dataclass
class SyntheticDataset:
    """Simulated domain plus everything needed to write or verify it."""

    domain: SpatialDomain
    latent_truth: np.ndarray
    truth: TruthConfig
    raw_continuous: np.ndarray
    raw_aspect: np.ndarray
    raw_slope: np.ndarray
    raw_categorical: np.ndarray
    edges: tuple
    model: LatentModel


def _su_grid_dims(n_su: int) -> tuple[int, int]:
    """Near-square factor pair (rows, cols) of the requested SU count."""
    best = (1, n_su)
    for d in range(1, int(math.isqrt(n_su)) + 1):
        if n_su % d == 0:
            best = (d, n_su // d)
    return best


def _su_partition(nx: int, ny: int, n_su: int):
    ry, rx = _su_grid_dims(n_su)
    if ry > ny or rx > nx:
        raise ValueError("more slope-unit bands than pixels per side")
    iy, ix = np.divmod(np.arange(nx * ny), nx)
    band_y = (iy * ry) // ny
    band_x = (ix * rx) // nx
    su_id = band_y * rx + band_x + 1
    edges = []
    for r in range(ry):
        for c in range(rx):
            u = r * rx + c + 1
            if c + 1 < rx:
                edges.append((u, u + 1))
            if r + 1 < ry:
                edges.append((u, u + rx))
    if not edges:                      # single SU: graph with no edges
        raise ValueError("need at least 2 slope units for an adjacency graph")
    return su_id, tuple(edges)


def _draw_block(component, tau: float, rng) -> np.ndarray:
    """Sample one structured block from its (constrained) prior at tau."""
    n = component.size
    if math.isinf(tau):
        return np.zeros(n)
    R = component.structure.matrix.toarray()
    w, v = np.linalg.eigh(R)
    keep = w > max(w[-1], 1.0) * 1e-9
    scale = 1.0 / np.sqrt(tau * component.scaling * w[keep])
    x = v[:, keep] @ (scale * rng.standard_normal(int(keep.sum())))
    for a in component.structure.constraints:
        a = np.asarray(a, dtype=float)
        x = x - a * (a @ x) / (a @ a)
    return x


def simulate_dataset(truth: TruthConfig) -> SyntheticDataset:
    """Draw covariates, latent truth and counts; fully seeded."""
    rng = np.random.default_rng(truth.seed)
    n = truth.nx * truth.ny
    su_id, edges = _su_partition(truth.nx, truth.ny, truth.n_su)
    graph = SlopeUnitGraph(truth.n_su, edges)
    if not graph.is_connected():
        raise ValueError("slope-unit partition is not connected")

    cont = rng.standard_normal((n, truth.n_continuous))
    cont_names = [f"cont_{j + 1}" for j in range(truth.n_continuous)]
    cat_cols = []
    for levels in truth.categorical_levels:
        codes = rng.integers(0, levels, size=n)
        codes[:levels] = np.arange(levels)   # guarantee dense level coding
        cat_cols.append(codes)
    cat = np.column_stack(cat_cols) if cat_cols else np.zeros((n, 0), dtype=np.int64)
    cat_names = [f"cat_{j + 1}" for j in range(len(truth.categorical_levels))]
    aspect = rng.uniform(0.0, 2.0 * math.pi, size=n)
    slope = rng.standard_normal(n)
    pixel_id = np.arange(1, n + 1)

    domain0 = build_domain(pixel_id, su_id, np.zeros(n, dtype=np.int64),
                           cont, cont_names, cat, cat_names, aspect, slope,
                           graph, truth.pixel_area)
    model = assemble(truth.model_id, domain0, truth.priors)

    x_true = np.zeros(model.total_dim)
    for c in model.components:
        if c.is_fixed:
            for i, label in enumerate(c.labels):
                x_true[c.offset + i] = float(truth.fixed_effects.get(label, 0.0))
        else:
            key = "tau_" + c.name
            if key not in truth.hyperparameters:
                raise ValueError(f"truth missing {key}")
            x_true[c.offset:c.offset + c.size] = _draw_block(
                c, float(truth.hyperparameters[key]), rng)

    if model.has_beta:
        beta = float(truth.hyperparameters.get("beta", 0.0))
        B = (model._incidence_base + beta * model._incidence_beta_mod).tocsr()
    else:
        B = model.incidence()
    eta = B @ x_true
    y = rng.poisson(truth.pixel_area * np.exp(eta))

    domain = build_domain(pixel_id, su_id, y, cont, cont_names, cat,
                          cat_names, aspect, slope, graph, truth.pixel_area)
    model = assemble(truth.model_id, domain, truth.priors)
    return SyntheticDataset(domain, x_true, truth, cont, aspect, slope,
                            cat, edges, model)


def simulate_counts(truth: TruthConfig):
    """(domain, latent truth vector) for the given generating configuration."""
    ds = simulate_dataset(truth)
    return ds.domain, ds.latent_truth


def write_dataset(ds: SyntheticDataset, pixels_fh, adjacency_fh,
                  truth_fh=None, header: str | None = None) -> None:
    """Write pixels.csv / su_adjacency.csv (and truth.csv) for a simulation."""
    d = ds.domain
    cont_hdr = [f"cont_{j + 1}" for j in range(ds.raw_continuous.shape[1])]
    cat_hdr = [f"cat_{j + 1}" for j in range(ds.raw_categorical.shape[1])]
    if header:
        pixels_fh.write(header + "\n")
    pixels_fh.write(",".join(
        ["pixel_id", "su_id", "count"] + cont_hdr + cat_hdr
        + ["aspect", "slope_raw"]) + "\n")
    for i in range(d.n_grid):
        cells = [str(int(d.pixel_id[i])), str(int(d.su_id[i])), str(int(d.count[i]))]
        cells += [f"{v:.17g}" for v in ds.raw_continuous[i]]
        cells += [str(int(v)) for v in ds.raw_categorical[i]]
        cells += [f"{ds.raw_aspect[i]:.17g}", f"{ds.raw_slope[i]:.17g}"]
        pixels_fh.write(",".join(cells) + "\n")
    if header:
        adjacency_fh.write(header + "\n")
    adjacency_fh.write("su_a,su_b\n")
    for a, b in ds.edges:
        adjacency_fh.write(f"{a},{b}\n")
    if truth_fh is not None:
        if header:
            truth_fh.write(header + "\n")
        truth_fh.write("parameter,value\n")
        t = ds.truth
        for k, v in [("model_id", t.model_id), ("nx", t.nx), ("ny", t.ny),
                     ("n_su", t.n_su), ("seed", t.seed),
                     ("pixel_area", t.pixel_area)]:
            truth_fh.write(f"{k},{v}\n")
        for k in sorted(t.fixed_effects):
            truth_fh.write(f"coef_{k},{t.fixed_effects[k]:.17g}\n")
        for k in sorted(t.hyperparameters):
            truth_fh.write(f"{k},{t.hyperparameters[k]:.17g}\n")


# -- dense quadrature oracle --------------------------------------------

@dataclass
class OracleGrid:
    """Quadrature resolution; per-axis points chosen by latent dimension.

    Latent axes are placed from conditional modes and curvatures at a few
    reference precisions; the log-precision axis is a fixed wide window
    around the prior median (the posterior right tail decays only like
    exp(-z/2) when a block is weakly identified, hence the asymmetry).
    """

    latent_points: int | None = None
    hyper_points: int = 121
    span: float = 8.0             # latent half-width in conditional sd units
    z_below: float = 10.0         # log-precision window below the prior median
    z_above: float = 20.0         # and above it

    def points_for(self, dim: int) -> int:
        if self.latent_points is not None:
            return self.latent_points
        return {1: 1001, 2: 201, 3: 51}[dim]


@dataclass
class OracleResult:
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    hyper_values: np.ndarray
    hyper_weights: np.ndarray
    hyper_mean: float | None


def _oracle_log_joint_factory(model: LatentModel, y, obs):
    """Exact unnormalized log joint in (subspace coords v, log tau z).

    Built from first principles (dense determinants, scipy.stats pdfs), not
    from the model's own density methods, so it is an independent check.
    The z-independent part (fixed-effect priors, fixed-precision blocks,
    observation likelihood) and the per-point quadratic form of the
    hyperparameter block are cached for the most recent V array, since the
    quadrature revisits one V grid for every z value.
    """
    A = model.constraints
    U = null_space(A) if model.n_constraints else np.eye(model.total_dim)
    B = model.incidence().toarray()
    BU = B @ U
    y = np.asarray(y, dtype=float)

    hyper_comp = model._hyper_comps[0] if model.n_hyper else None

    def block_pieces(c):
        """(Ub, Q0, logdet Q0) with the precision tau factored out."""
        if c.structure.constraints:
            Ub = null_space(np.vstack(c.structure.constraints))
            Q0 = c.scaling * (Ub.T @ c.structure.matrix.toarray() @ Ub)
        elif c.structure.rank_deficiency:
            w, vv = np.linalg.eigh(c.structure.matrix.toarray())
            keep = w > max(w[-1], 1.0) * 1e-9
            Ub = vv[:, keep]
            Q0 = c.scaling * np.diag(w[keep])
        else:
            Ub = np.eye(c.size)
            Q0 = c.scaling * c.structure.matrix.toarray()
        sign, ld0 = np.linalg.slogdet(Q0)
        if sign <= 0:
            raise OracleError("structure reduction lost definiteness")
        return Ub, Q0, ld0

    def decompose(V):
        """z-independent log density plus the hyper block's pieces."""
        X = V @ U.T
        const = np.zeros(len(V))
        hyper_quad = None
        hyper_dim = 0.0
        hyper_ld0 = 0.0
        for c in model.components:
            xb = X[:, c.offset:c.offset + c.size]
            if c.is_fixed:
                const += norm.logpdf(
                    xb, loc=np.asarray(c.fixed_prior_means),
                    scale=1.0 / np.sqrt(np.asarray(c.fixed_prior_precisions))
                ).sum(axis=1)
                continue
            Ub, Q0, ld0 = block_pieces(c)
            vb = xb @ Ub
            quad = np.einsum("pi,ij,pj->p", vb, Q0, vb)
            meff = Ub.shape[1]
            if c is hyper_comp:
                hyper_quad, hyper_dim, hyper_ld0 = quad, meff, ld0
            else:
                tau = c.fixed_tau
                const += 0.5 * (meff * math.log(tau) + ld0) \
                    - 0.5 * meff * math.log(2 * math.pi) - 0.5 * tau * quad
        eta = V @ BU.T
        if isinstance(obs, PoissonObservation):
            const += poisson.logpmf(y[None, :],
                                    model.pixel_area * np.exp(eta)).sum(axis=1)
        else:
            const += norm.logpdf(y[None, :], loc=eta,
                                 scale=1.0 / np.sqrt(obs.precision)).sum(axis=1)
        return const, hyper_quad, hyper_dim, hyper_ld0

    cache = {"key": None, "value": None}

    def log_joint(V, z):
        """V: (points, m) subspace coords; z: scalar log tau or None."""
        if cache["key"] is V:
            const, hquad, hdim, hld0 = cache["value"]
        else:
            const, hquad, hdim, hld0 = decompose(V)
            cache["key"] = V
            cache["value"] = (const, hquad, hdim, hld0)
        out = const.copy()
        if hyper_comp is not None:
            tau = math.exp(z)
            out += 0.5 * (hdim * z + hld0) \
                - 0.5 * hdim * math.log(2 * math.pi) - 0.5 * tau * hquad
            lam = hyper_comp.hyper.rate
            sigma = math.exp(-0.5 * z)
            # exponential density on sigma times |d sigma / d tau|, then the
            # log-scale Jacobian d tau / d z = tau
            out += math.log(lam) - lam * sigma + math.log(0.5 * sigma ** 3) \
                + math.log(tau)
        return out

    return log_joint, U


def dense_posterior_oracle(model: LatentModel, y, grid: OracleGrid | None = None,
                           obs=None) -> OracleResult:
    """Tensor-product quadrature of the exact posterior on a tiny model.

    The joint density of (latent, log tau) has no finite mode when an
    intrinsic block can collapse (the determinant gain beats the prior
    tail), so axes are never placed at a joint mode: each latent axis
    covers the union of conditional mode +- span * conditional sd boxes at
    three reference precisions, and the log-precision axis is a fixed wide
    window whose end masses are checked after the fact.  Reported hyper
    moments are means over that truncated window; the exact E[tau] need
    not exist for weakly identified blocks.
    """
    grid = grid or OracleGrid()
    obs = obs if obs is not None else PoissonObservation(model.pixel_area)
    m = model.total_dim - model.n_constraints
    if m > _ORACLE_MAX_LATENT:
        raise OracleError(f"latent dimension {m} beyond oracle scope")
    if model.n_hyper > _ORACLE_MAX_HYPER:
        raise OracleError("more than one hyperparameter beyond oracle scope")
    if model.has_beta:
        raise OracleError("interaction coefficient beyond oracle scope")

    log_joint, U = _oracle_log_joint_factory(model, y, obs)
    k = model.n_hyper

    if k:
        lam = model._hyper_comps[0].hyper.rate
        z_med = -2.0 * math.log(math.log(2.0) / lam)
        refs = [z_med - 4.0, z_med, z_med + 4.0]
        zs = np.linspace(z_med - grid.z_below, z_med + grid.z_above,
                         grid.hyper_points)
    else:
        refs = [None]
        zs = np.array([0.0])

    lo = np.full(m, np.inf)
    hi = np.full(m, -np.inf)
    for z in refs:
        def negv(v, z=z):
            return -float(log_joint(np.asarray(v, dtype=float)[None, :], z)[0])

        res = minimize(negv, np.zeros(m), method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-10,
                                "maxiter": 8000, "maxfev": 8000})
        c0 = res.x
        f0 = -negv(c0)
        h = 1e-3
        for j in range(m):
            e = np.zeros(m)
            e[j] = h
            second = (-negv(c0 + e) - 2.0 * f0 - negv(c0 - e)) / h ** 2
            sj = 1.0 / math.sqrt(max(-second, 1e-6))
            lo[j] = min(lo[j], c0[j] - grid.span * sj)
            hi[j] = max(hi[j], c0[j] + grid.span * sj)

    npts = grid.points_for(max(m, 1))
    axes = [np.linspace(lo[j], hi[j], npts) for j in range(m)]
    mesh = np.meshgrid(*axes, indexing="ij") if m else []
    V = np.column_stack([g.ravel() for g in mesh]) if m else np.zeros((1, 0))

    # one moment pass per z row; rows share the cached V decomposition
    n_z = len(zs)
    row_logmass = np.empty(n_z)
    row_mean = np.zeros((n_z, m))
    row_sq = np.zeros((n_z, m, m))
    for zi in range(n_z):
        row = log_joint(V, float(zs[zi]) if k else None)
        mz = float(row.max())
        w = np.exp(row - mz)
        s = float(w.sum())
        row_logmass[zi] = mz + math.log(s)
        if m:
            row_mean[zi] = (w @ V) / s
            row_sq[zi] = (V.T * w) @ V / s

    wz = np.exp(row_logmass - row_logmass.max())
    wz /= wz.sum()
    if k and max(wz[0], wz[-1]) > 2e-4:
        raise OracleError("log-precision window does not cover the posterior")

    mean_v = wz @ row_mean
    cov_v = np.einsum("z,zab->ab", wz, row_sq) - np.outer(mean_v, mean_v)
    latent_mean = U @ mean_v if m else np.zeros(model.total_dim)
    latent_var = np.einsum("ia,ab,ib->i", U, cov_v, U) if m else \
        np.zeros(model.total_dim)

    if k:
        taus = np.exp(zs)
        return OracleResult(latent_mean, np.sqrt(np.maximum(latent_var, 0)),
                            taus, wz, float(wz @ taus))
    return OracleResult(latent_mean, np.sqrt(np.maximum(latent_var, 0)),
                        np.empty(0), np.empty(0), None)


# -- random-walk Metropolis oracle --------------------------------------

@dataclass
class McmcResult:
    latent: np.ndarray            # kept draws, (kept, n)
    hyper_internal: np.ndarray    # kept draws in internal scale, (kept, k)
    acceptance_latent: float
    acceptance_hyper: float

    @property
    def latent_mean(self) -> np.ndarray:
        return self.latent.mean(axis=0)


def mcmc_oracle(model: LatentModel, y, iterations: int, seed: int,
                obs=None, burn_in: int | None = None) -> McmcResult:
    """Two-block random-walk Metropolis over (latent field, hyperparameters).

    Proposals for the latent block are projected onto the constraint
    tangent space (orthogonal projection keeps the kernel symmetric on the
    subspace); step sizes adapt during burn-in toward acceptance 0.2-0.4 and
    then freeze.  Errors if the frozen acceptance leaves [0.05, 0.8].
    """
    n = model.total_dim
    if n > _MCMC_MAX_LATENT:
        raise OracleError(f"latent dimension {n} beyond sampler scope")
    obs = obs if obs is not None else PoissonObservation(model.pixel_area)
    y = np.asarray(y, dtype=float)
    burn = iterations // 2 if burn_in is None else burn_in
    rng = np.random.default_rng(seed)

    A = model.constraints
    if model.n_constraints:
        P = np.eye(n) - A.T @ np.linalg.solve(A @ A.T, A)
    else:
        P = None
    k = model.n_hyper
    n_tau = len(model._hyper_comps)

    def theta_of(z):
        t = np.empty(k)
        t[:n_tau] = np.exp(z[:n_tau])
        if model.has_beta:
            t[-1] = z[-1]
        return t

    def log_post(x, z):
        theta = theta_of(z) if k else np.empty(0)
        try:
            lp = model.log_prior_latent(x, theta)
        except ModelError:
            return -math.inf
        if k:
            lp += model.log_prior_hyper(theta) + float(np.sum(z[:n_tau]))
        eta = model.incidence(theta if k else None) @ x
        lp += float(obs.loglik_terms(eta, y).sum())
        return lp

    x = np.zeros(n)
    for c in model.components:
        if c.is_fixed and "intercept" in c.labels:
            x[c.offset + c.labels.index("intercept")] = c.fixed_prior_means[
                c.labels.index("intercept")]
    if P is not None:
        x = P @ x
    z = np.zeros(k)
    for j, c in enumerate(model._hyper_comps):
        z[j] = -2.0 * math.log(math.log(2.0) / c.hyper.rate)
    if model.has_beta:
        z[-1] = model.beta_prior_mean

    s_x, s_z = 0.5, 0.5
    cur = log_post(x, z)
    if not math.isfinite(cur):
        raise OracleError("non-finite posterior at the starting point")

    kept_x = np.empty((iterations - burn, n))
    kept_z = np.empty((iterations - burn, k))
    post_acc_x = post_acc_z = post_n = 0
    window_x = window_z = window_n = 0

    for it in range(iterations):
        eps = s_x * rng.standard_normal(n)
        prop_x = x + (P @ eps if P is not None else eps)
        cand = log_post(prop_x, z)
        if math.log(rng.uniform()) < cand - cur:
            x, cur = prop_x, cand
            window_x += 1
            if it >= burn:
                post_acc_x += 1
        if k:
            prop_z = z + s_z * rng.standard_normal(k)
            cand = log_post(x, prop_z)
            if math.log(rng.uniform()) < cand - cur:
                z, cur = prop_z, cand
                window_z += 1
                if it >= burn:
                    post_acc_z += 1
        window_n += 1
        if it < burn and window_n == 200:
            s_x *= math.exp(min(max(window_x / window_n - 0.3, -0.5), 0.5))
            if k:
                s_z *= math.exp(min(max(window_z / window_n - 0.3, -0.5), 0.5))
            window_x = window_z = window_n = 0
        if it >= burn:
            kept_x[it - burn] = x
            kept_z[it - burn] = z
            post_n += 1
        if P is not None and it % 1000 == 999:
            x = P @ x           # cancel accumulated constraint drift

    rate_x = post_acc_x / post_n
    rate_z = post_acc_z / post_n if k else 0.3
    for name, rate in (("latent", rate_x),) + ((("hyper", rate_z),) if k else ()):
        if not (0.05 <= rate <= 0.8):
            raise OracleError(
                f"{name} acceptance rate {rate:.3f} outside [0.05, 0.8]")
    return McmcResult(kept_x, kept_z, rate_x, rate_z)
