"""Laplace-approximation inference for latent Gaussian Cox models.

Per hyperparameter point: Newton optimization of the constrained conditional
latent posterior (constraints enforced by conditioning-by-kriging each step),
giving a Gaussian approximation at the mode.  The hyperparameter posterior is
explored on an axis-aligned grid in internal scale (log tau for precisions,
identity for beta) around a quasi-Newton mode; latent marginals are mixtures
of the per-point Gaussians under the normalized grid weights.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.sparse.linalg import splu
from scipy.special import gammaln, ndtr

from gridcox.models import LatentModel, ModelError, assemble

_LOG_2PI = math.log(2.0 * math.pi)


class InferenceError(RuntimeError):
    """Numerical failure in the inference engine."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass
class InferenceSettings:
    """Engine knobs; defaults match the documented strategy."""

    grid_step: float = 0.75
    log_density_drop: float = 5.0
    newton_tol: float = 1e-8
    max_newton_iter: int = 50
    max_step_halvings: int = 30
    max_axis_steps: int = 8
    max_grid_points: int = 4000
    marginal_dense_cap: int = 4000
    threads: int = 1


# -- observation models -------------------------------------------------

class PoissonObservation:
    """Counts y_i ~ Poisson(C * exp(eta_i)) with C the pixel area."""

    def __init__(self, pixel_area: float):
        if pixel_area <= 0:
            raise ValueError("pixel area must be positive")
        self.pixel_area = float(pixel_area)
        self._log_c = math.log(self.pixel_area)

    def loglik_terms(self, eta, y):
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            raise InferenceError("non-finite log-intensity")
        with np.errstate(over="ignore"):
            rate = self.pixel_area * np.exp(eta)
        return y * (eta + self._log_c) - rate - gammaln(np.asarray(y) + 1.0)

    def gradient(self, eta, y):
        with np.errstate(over="ignore"):
            return y - self.pixel_area * np.exp(eta)

    def curvature(self, eta, y):
        with np.errstate(over="ignore"):
            return self.pixel_area * np.exp(np.asarray(eta, dtype=float))


class GaussianObservation:
    """y_i ~ N(eta_i, 1/precision): surrogate making the Laplace step exact."""

    def __init__(self, precision):
        self.precision = np.asarray(precision, dtype=float)
        if np.any(self.precision <= 0):
            raise ValueError("observation precision must be positive")

    def loglik_terms(self, eta, y):
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            raise InferenceError("non-finite latent predictor")
        p = self.precision
        return 0.5 * np.log(p / (2.0 * math.pi)) - 0.5 * p * (y - eta) ** 2

    def gradient(self, eta, y):
        return self.precision * (y - eta)

    def curvature(self, eta, y):
        return np.broadcast_to(self.precision, np.shape(eta)).astype(float)


def poisson_loglik(x, y, pixel_area: float) -> float:
    """Poisson log likelihood of counts y at pixel log-intensities x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("length mismatch between log-intensities and counts")
    return float(PoissonObservation(pixel_area).loglik_terms(x, y).sum())


# -- sparse factorization with jitter policy ----------------------------

_JITTERS = (0.0, 1e-8, 1e-6, 1e-4, 1e-2)


class Factorization:
    """Sparse LU of a (near-)SPD matrix with escalating diagonal jitter."""

    def __init__(self, Q: sp.spmatrix):
        Q = sp.csc_matrix(Q)
        n = Q.shape[0]
        scale = float(max(Q.diagonal().max(), 1.0))
        last = None
        for j in _JITTERS:
            M = Q + (j * scale) * sp.identity(n, format="csc") if j else Q
            try:
                lu = splu(M)
            except RuntimeError as e:
                last = e
                continue
            du = lu.U.diagonal()
            if np.all(np.isfinite(du)) and np.all(du != 0):
                self._lu = lu
                self.logdet = float(np.sum(np.log(np.abs(du))))
                self.jitter = j * scale
                self.shape = Q.shape
                return
            last = RuntimeError("singular factor")
        raise InferenceError(f"precision factorization failed: {last}")

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


class _ConstraintCache:
    """Kriging ingredients for a factorized precision: W = Q^-1 A^T etc."""

    def __init__(self, factor: Factorization, A: np.ndarray):
        self.A = A
        self.W = factor.solve(A.T)
        S = A @ self.W
        S = 0.5 * (S + S.T)
        try:
            self.S_cho = cho_factor(S)
        except np.linalg.LinAlgError as e:
            raise InferenceError(f"rank-deficient constraints: {e}") from None
        self.logdet_S = 2.0 * float(np.sum(np.log(np.diag(self.S_cho[0]))))
        sign, ld = np.linalg.slogdet(A @ A.T)
        if sign <= 0:
            raise InferenceError("rank-deficient constraints")
        self.logdet_AAt = float(ld)

    def project(self, x):
        """x minus Q^-1 A^T (A Q^-1 A^T)^-1 A x; the kriging correction."""
        return x - self.W @ cho_solve(self.S_cho, self.A @ x)


def condition_by_kriging(x, Q, A) -> np.ndarray:
    """Correct x to satisfy A x = 0 under the Gaussian with precision Q."""
    x = np.asarray(x, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return x.copy()
    factor = Q if isinstance(Q, Factorization) else Factorization(Q)
    return _ConstraintCache(factor, A).project(x)


# -- Gaussian approximation at fixed hyperparameters --------------------

class GaussianApprox:
    """Constrained Gaussian approximation of the latent posterior at theta."""

    def __init__(self, theta, mode, precision, factor, cons, incidence,
                 n_iterations, log_post=math.nan):
        self.theta = np.asarray(theta, dtype=float)
        self.mode = mode
        self.precision = precision
        self.log_post = log_post
        self.n_iterations = n_iterations
        self._factor = factor
        self._cons = cons
        self._B = incidence
        self._marg_var = None
        self._eta_var = None
        self._sample_chol = None

    @property
    def dimension(self) -> int:
        return len(self.mode)

    @property
    def eta_mode(self) -> np.ndarray:
        return self._B @ self.mode

    def marginal_variances(self, cap: int = 4000) -> np.ndarray:
        """Diagonal of the constrained covariance (dense solve, capped)."""
        if self._marg_var is not None:
            return self._marg_var
        n = self.dimension
        if n > cap:
            raise InferenceError(
                f"latent dimension {n} exceeds dense marginal cap {cap}")
        X = self._factor.solve(np.eye(n))
        d = np.diag(X).copy()
        if self._cons is not None:
            T = cho_solve(self._cons.S_cho, self._cons.W.T)
            d -= np.einsum("ij,ji->i", self._cons.W, T)
        self._marg_var = np.maximum(d, 0.0)
        return self._marg_var

    def covariance(self, cap: int = 4000) -> np.ndarray:
        """Dense constrained covariance matrix (tests and tiny models)."""
        n = self.dimension
        if n > cap:
            raise InferenceError(
                f"latent dimension {n} exceeds dense covariance cap {cap}")
        S = self._factor.solve(np.eye(n))
        S = 0.5 * (S + S.T)
        if self._cons is not None:
            W = self._cons.W
            S = S - W @ cho_solve(self._cons.S_cho, W.T)
            S = 0.5 * (S + S.T)
        return S

    def eta_variances(self, cap: int = 4000) -> np.ndarray:
        """Per-pixel variance of the log-intensity under this approximation."""
        if self._eta_var is not None:
            return self._eta_var
        n = self.dimension
        if n > cap:
            raise InferenceError(
                f"latent dimension {n} exceeds dense marginal cap {cap}")
        B = self._B
        X = self._factor.solve(B.T.toarray())
        v = np.asarray(B.multiply(X.T).sum(axis=1)).ravel()
        if self._cons is not None:
            G = B @ self._cons.W
            T = cho_solve(self._cons.S_cho, G.T)
            v -= np.einsum("ij,ji->i", G, T)
        self._eta_var = np.maximum(v, 0.0)
        return self._eta_var

    def sample_transform(self):
        """(mode, upper Cholesky R with Q = R^T R, kriging cache or None)."""
        if self._sample_chol is None:
            n = self.dimension
            dense = self.precision.toarray()
            if self._factor.jitter:
                dense = dense + self._factor.jitter * np.eye(n)
            self._sample_chol = np.linalg.cholesky(dense).T
        return self.mode, self._sample_chol, self._cons


def _initial_latent(model: LatentModel) -> np.ndarray:
    """All zeros except the intercept, which starts at its prior mean."""
    x = np.zeros(model.total_dim)
    for c in model.components:
        if c.is_fixed and "intercept" in c.labels:
            i = c.labels.index("intercept")
            x[c.offset + i] = c.fixed_prior_means[i]
    return x


def _validated_mask(model, obs_mask):
    if obs_mask is None:
        return None
    mask = np.asarray(obs_mask, dtype=bool)
    if mask.shape != (model.n_grid,):
        raise ModelError("observation mask length mismatch")
    if not mask.any():
        raise ModelError("observation mask excludes every pixel")
    return mask


def gaussian_approximation(model: LatentModel, theta, y, obs=None,
                           settings: InferenceSettings | None = None,
                           x0=None, obs_mask=None) -> GaussianApprox:
    """Newton optimization of the conditional latent posterior at theta.

    Each accepted step first solves the working linear system and then
    re-imposes the constraints by conditioning-by-kriging; step halving
    keeps the constrained objective non-decreasing.  Converges when the
    constraint-projected gradient max-norm drops below the tolerance.
    """
    settings = settings or InferenceSettings()
    theta = model.check_theta(theta)
    y = np.asarray(y, dtype=float)
    if y.shape != (model.n_grid,):
        raise ModelError("data vector length mismatch")
    obs = obs if obs is not None else PoissonObservation(model.pixel_area)
    mask = _validated_mask(model, obs_mask)

    B = model.incidence(theta)
    Qp = model.prior_precision(theta)
    b0 = Qp @ model.prior_mean
    A = model.constraints
    K = model.n_constraints
    AAt_cho = cho_factor(A @ A.T) if K else None
    AtA = sp.csc_matrix(A.T @ A) if K else None

    def build_precision(c):
        # Intrinsic block null spaces aligned with sum-to-zero constraints
        # make Q singular; adding a multiple of A'A restores definiteness
        # without changing any constrained quantity (A annihilates the
        # constraint subspace, so U'QU is untouched).
        Q = (Qp + B.T @ sp.diags(c) @ B).tocsc()
        if K:
            Q = (Q + max(1.0, float(Q.diagonal().mean())) * AtA).tocsc()
        return Q

    ysafe = np.where(mask, y, 0.0) if mask is not None else y

    def masked_sum(terms):
        if mask is None:
            return float(terms.sum())
        return float(np.where(mask, terms, 0.0).sum())

    def objective(xv):
        eta = B @ xv
        if not np.all(np.isfinite(eta)):
            return -math.inf
        with np.errstate(over="ignore", invalid="ignore"):
            ll = obs.loglik_terms(eta, ysafe)
        val = -0.5 * float(xv @ (Qp @ xv)) + float(b0 @ xv) + masked_sum(ll)
        return val if math.isfinite(val) else -math.inf

    def project_tangent(g):
        if not K:
            return g
        return g - A.T @ cho_solve(AAt_cho, A @ g)

    x = np.array(x0, dtype=float, copy=True) if x0 is not None else _initial_latent(model)
    if x.shape != (model.total_dim,):
        raise ModelError("starting latent vector dimension mismatch")
    if K and model.constraint_violation(x) > 1e-10:
        x = x - A.T @ cho_solve(AAt_cho, A @ x)

    gnorm = math.inf
    for iteration in range(settings.max_newton_iter):
        eta = B @ x
        g = obs.gradient(eta, ysafe)
        c = obs.curvature(eta, ysafe)
        if mask is not None:
            g = np.where(mask, g, 0.0)
            c = np.where(mask, c, 0.0)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(c))):
            raise InferenceError("non-finite likelihood derivatives", gnorm)
        grad = b0 - Qp @ x + B.T @ g
        gnorm = float(np.abs(project_tangent(grad)).max()) if len(grad) else 0.0
        if gnorm < settings.newton_tol:
            break

        Q = build_precision(c)
        factor = Factorization(Q)
        cons = _ConstraintCache(factor, A) if K else None
        xhat = factor.solve(b0 + B.T @ (g + c * eta))
        if cons is not None:
            xhat = cons.project(xhat)

        h0 = objective(x)
        step = 1.0
        for _ in range(settings.max_step_halvings + 1):
            xn = x + step * (xhat - x)
            hn = objective(xn)
            if hn >= h0 - 1e-12 * max(1.0, abs(h0)):
                x = xn
                break
            step *= 0.5
        else:
            raise InferenceError(
                f"step halving exhausted at gradient norm {gnorm:.3e}", gnorm)
    else:
        raise InferenceError(
            f"Newton did not converge in {settings.max_newton_iter} iterations "
            f"(gradient norm {gnorm:.3e})", gnorm)

    eta = B @ x
    c = obs.curvature(eta, ysafe)
    if mask is not None:
        c = np.where(mask, c, 0.0)
    Q = build_precision(c)
    factor = Factorization(Q)
    cons = _ConstraintCache(factor, A) if K else None
    return GaussianApprox(theta, x, Q, factor, cons, B, iteration)


def _evaluate_theta(model, theta, y, obs=None, settings=None, x0=None,
                    obs_mask=None) -> GaussianApprox:
    """Gaussian approximation plus the Laplace log posterior of theta."""
    settings = settings or InferenceSettings()
    obs = obs if obs is not None else PoissonObservation(model.pixel_area)
    ga = gaussian_approximation(model, theta, y, obs, settings, x0, obs_mask)
    mask = _validated_mask(model, obs_mask)
    ll = obs.loglik_terms(ga.eta_mode, np.where(mask, y, 0.0) if mask is not None else y)
    ll_sum = float(np.where(mask, ll, 0.0).sum()) if mask is not None else float(ll.sum())
    n, K = model.total_dim, model.n_constraints
    logdet_c = ga._factor.logdet
    if K:
        logdet_c += ga._cons.logdet_S - ga._cons.logdet_AAt
    theta = model.check_theta(theta)
    value = (model.log_prior_hyper(theta)
             + model.log_prior_latent(ga.mode, theta)
             + ll_sum
             + 0.5 * (n - K) * _LOG_2PI
             - 0.5 * logdet_c)
    ga.log_post = value
    return ga


def log_posterior_theta(model, theta, y, obs=None, settings=None,
                        obs_mask=None) -> float:
    """Unnormalized Laplace log posterior of the hyperparameter vector."""
    return _evaluate_theta(model, theta, y, obs, settings, None, obs_mask).log_post


# -- hyperparameter exploration -----------------------------------------

class PosteriorFit:
    """Weighted hyperparameter grid with per-point Gaussian approximations."""

    def __init__(self, model, y, obs, approxes, weights, internal_z,
                 settings, obs_mask=None):
        self.model = model
        self.y = np.asarray(y, dtype=float)
        self.obs = obs
        self.approxes = list(approxes)
        self.weights = np.asarray(weights, dtype=float)
        self.internal_z = np.asarray(internal_z, dtype=float).reshape(
            len(self.approxes), model.n_hyper)
        self.settings = settings
        self.obs_mask = obs_mask
        self.theta_names = list(model.hyper_names)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InferenceError("grid weights must be a normalized simplex")
        self.theta = np.array([a.theta for a in self.approxes]).reshape(
            len(self.approxes), model.n_hyper)
        self._mean = None
        self._var = None
        self._eta_mean = None
        self._eta_var = None

    @property
    def n_points(self) -> int:
        return len(self.approxes)

    # latent mixture marginals ------------------------------------------

    @property
    def latent_mean(self) -> np.ndarray:
        if self._mean is None:
            modes = np.array([a.mode for a in self.approxes])
            self._mean = self.weights @ modes
        return self._mean

    @property
    def latent_sd(self) -> np.ndarray:
        return np.sqrt(self._latent_var())

    def _latent_var(self) -> np.ndarray:
        if self._var is None:
            cap = self.settings.marginal_dense_cap
            acc = np.zeros(self.model.total_dim)
            for w, a in zip(self.weights, self.approxes):
                acc += w * (a.marginal_variances(cap) + a.mode ** 2)
            self._var = np.maximum(acc - self.latent_mean ** 2, 0.0)
        return self._var

    def latent_quantiles(self, probs) -> np.ndarray:
        """Quantiles of the Gaussian-mixture marginals, (n_latent, n_probs)."""
        probs = np.atleast_1d(np.asarray(probs, dtype=float))
        cap = self.settings.marginal_dense_cap
        means = np.array([a.mode for a in self.approxes])
        sds = np.sqrt(np.array(
            [np.maximum(a.marginal_variances(cap), 1e-300) for a in self.approxes]))
        out = np.empty((self.model.total_dim, len(probs)))
        for pj, p in enumerate(probs):
            lo = (means - 10 * sds).min(axis=0)
            hi = (means + 10 * sds).max(axis=0)
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                cdf = np.einsum("g,gn->n", self.weights,
                                ndtr((mid[None, :] - means) / sds))
                high = cdf >= p
                hi = np.where(high, mid, hi)
                lo = np.where(high, lo, mid)
            out[:, pj] = 0.5 * (lo + hi)
        return out

    # log-intensity mixture marginals -----------------------------------

    def _eta_moments(self):
        if self._eta_mean is None:
            cap = self.settings.marginal_dense_cap
            m = np.zeros(self.model.n_grid)
            s = np.zeros(self.model.n_grid)
            for w, a in zip(self.weights, self.approxes):
                em = a.eta_mode
                ev = a.eta_variances(cap)
                m += w * em
                s += w * (ev + em ** 2)
            self._eta_mean = m
            self._eta_var = np.maximum(s - m ** 2, 0.0)
        return self._eta_mean, self._eta_var

    @property
    def eta_mean(self) -> np.ndarray:
        return self._eta_moments()[0]

    @property
    def eta_sd(self) -> np.ndarray:
        return np.sqrt(self._eta_moments()[1])

    @property
    def lambda_hat(self) -> np.ndarray:
        """Posterior-mean predicted count per pixel (lognormal mixture mean)."""
        cap = self.settings.marginal_dense_cap
        out = np.zeros(self.model.n_grid)
        for w, a in zip(self.weights, self.approxes):
            out += w * np.exp(a.eta_mode + 0.5 * a.eta_variances(cap))
        return self.model.pixel_area * out

    # hyperparameter marginals ------------------------------------------

    def hyper_mean(self) -> np.ndarray:
        return self.weights @ self.theta

    def hyper_sd(self) -> np.ndarray:
        second = self.weights @ (self.theta ** 2)
        return np.sqrt(np.maximum(second - self.hyper_mean() ** 2, 0.0))

    def hyper_quantile(self, p: float, index: int) -> float:
        """Quantile of one hyperparameter, interpolating the grid CDF in
        internal scale (log tau for precisions)."""
        z = self.internal_z[:, index]
        order = np.argsort(z)
        zs, ws = z[order], self.weights[order]
        cdf = np.cumsum(ws)
        if p <= cdf[0] or len(zs) == 1:
            zq = zs[0]
        elif p >= cdf[-1]:
            zq = zs[-1]
        else:
            zq = float(np.interp(p, cdf, zs))
        is_beta = self.model.has_beta and index == self.model.n_hyper - 1
        return float(zq) if is_beta else float(math.exp(zq))

    def theta_table(self):
        """Rows (theta_1..k, log_density, weight) with log density recentred."""
        peak = max(a.log_post for a in self.approxes)
        rows = []
        for w, a in zip(self.weights, self.approxes):
            rows.append(list(a.theta) + [a.log_post - peak, w])
        return rows


def _internal_start(model: LatentModel) -> np.ndarray:
    """Prior medians in internal scale: log of the PC-median tau, beta mean."""
    z = []
    for c in model._hyper_comps:
        sigma_med = math.log(2.0) / c.hyper.rate
        z.append(-2.0 * math.log(sigma_med))
    if model.has_beta:
        z.append(model.beta_prior_mean)
    return np.array(z)


def _theta_from_internal(model: LatentModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    n_tau = len(model._hyper_comps)
    theta = np.empty(model.n_hyper)
    theta[:n_tau] = np.exp(np.clip(z[:n_tau], -45.0, 45.0))
    if model.has_beta:
        theta[-1] = z[-1]
    return theta


def _internal_from_theta(model: LatentModel, theta) -> np.ndarray:
    theta = model.check_theta(theta)
    n_tau = len(model._hyper_comps)
    z = np.empty(model.n_hyper)
    z[:n_tau] = np.log(theta[:n_tau])
    if model.has_beta:
        z[-1] = theta[-1]
    return z


def _log_jacobian(model: LatentModel, z) -> float:
    """log |d theta / d z| for the internal-scale change of variables."""
    n_tau = len(model._hyper_comps)
    return float(np.sum(np.clip(np.asarray(z)[:n_tau], -45.0, 45.0)))


def explore_hyperparameters(model: LatentModel, y, obs=None, settings=None,
                            obs_mask=None) -> PosteriorFit:
    """Grid exploration of the hyperparameter posterior.

    Quasi-Newton mode search in internal scale, axis scans with step
    ``grid_step`` until the log density drops by ``log_density_drop``, then
    the tensor-product grid (capped in size), pruned by the same drop rule
    and normalized.  Weights include the log-tau Jacobian, so they are
    posterior masses for equal-volume internal-scale cells.
    """
    settings = settings or InferenceSettings()
    obs = obs if obs is not None else PoissonObservation(model.pixel_area)
    k = model.n_hyper
    if k > 6:
        raise InferenceError("more than 6 hyperparameters are not supported")

    if k == 0:
        ga = _evaluate_theta(model, np.empty(0), y, obs, settings,
                             obs_mask=obs_mask)
        return PosteriorFit(model, y, obs, [ga], np.array([1.0]),
                            np.zeros((1, 0)), settings, obs_mask)

    warm = {"x0": None}

    def evaluate(z) -> GaussianApprox:
        theta = _theta_from_internal(model, z)
        ga = _evaluate_theta(model, theta, y, obs, settings,
                             x0=warm["x0"], obs_mask=obs_mask)
        warm["x0"] = ga.mode
        return ga

    def f_internal(z):
        try:
            ga = evaluate(z)
        except (InferenceError, ModelError, np.linalg.LinAlgError):
            return -1e12, None
        return ga.log_post + _log_jacobian(model, z), ga

    z0 = _internal_start(model)
    f0, ga0 = f_internal(z0)
    if ga0 is None:
        raise InferenceError("posterior evaluation failed at the starting point")

    res = minimize(lambda z: -f_internal(z)[0], z0, method="BFGS",
                   options={"gtol": 1e-5, "maxiter": 200})
    zmode = np.asarray(res.x, dtype=float)
    f_mode, ga_mode = f_internal(zmode)
    if ga_mode is None or not math.isfinite(f_mode):
        raise InferenceError("hyperparameter mode search failed")
    if f_mode < f0:
        zmode, f_mode, ga_mode = z0, f0, ga0

    delta = settings.grid_step
    drop = settings.log_density_drop
    cache: dict[tuple, tuple[float, GaussianApprox]] = {
        tuple([0] * k): (f_mode, ga_mode)}

    def eval_offset(off):
        key = tuple(off)
        if key in cache:
            return cache[key][0]
        z = zmode + delta * np.asarray(off, dtype=float)
        val, ga = f_internal(z)
        if ga is None:
            cache[key] = (-math.inf, None)
            return -math.inf
        cache[key] = (val, ga)
        return val

    axis_offsets = []
    for j in range(k):
        offs = [0]
        for sign in (1, -1):
            for m in range(1, settings.max_axis_steps + 1):
                off = [0] * k
                off[j] = sign * m
                if eval_offset(off) < f_mode - drop:
                    break
                offs.append(sign * m)
        axis_offsets.append(sorted(offs))

    def total_points():
        return int(np.prod([len(o) for o in axis_offsets]))

    while total_points() > settings.max_grid_points:
        j = int(np.argmax([len(o) for o in axis_offsets]))
        offs = axis_offsets[j]
        far = max(offs, key=lambda o: (abs(o), o))
        offs.remove(far)

    combos = sorted(product(*axis_offsets))
    todo = [c for c in combos if c not in cache]
    if settings.threads > 1 and todo:
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            list(pool.map(eval_offset, todo))
    else:
        for c in todo:
            eval_offset(c)

    points = []
    for c in combos:
        val, ga = cache[c]
        if ga is not None:
            points.append((c, val, ga))
    if not points:
        raise InferenceError("all hyperparameter grid points dropped")
    best = max(val for _, val, _ in points)
    points = [(c, val, ga) for c, val, ga in points if val >= best - drop]

    fvals = np.array([val for _, val, _ in points])
    weights = np.exp(fvals - fvals.max())
    weights /= weights.sum()
    approxes = [ga for _, _, ga in points]
    internal = np.array([zmode + delta * np.asarray(c, dtype=float)
                         for c, _, _ in points])
    return PosteriorFit(model, y, obs, approxes, weights, internal,
                        settings, obs_mask)


def _fit_fixed_grid(model, y, obs, settings, theta_grid, obs_mask):
    """Evaluate an explicit list of hyperparameter vectors (no search)."""
    approxes, internal, fvals = [], [], []
    x0 = None
    for theta in theta_grid:
        ga = _evaluate_theta(model, theta, y, obs, settings, x0=x0,
                             obs_mask=obs_mask)
        x0 = ga.mode
        z = _internal_from_theta(model, theta)
        approxes.append(ga)
        internal.append(z)
        fvals.append(ga.log_post + _log_jacobian(model, z))
    fvals = np.asarray(fvals)
    weights = np.exp(fvals - fvals.max())
    weights /= weights.sum()
    return PosteriorFit(model, y, obs, approxes, weights, np.array(internal),
                        settings, obs_mask)


def fit(model, domain=None, y=None, obs=None, priors=None, settings=None,
        obs_mask=None, theta_grid=None) -> PosteriorFit:
    """Fit a model (id or assembled LatentModel) and return its posterior."""
    if isinstance(model, str):
        if domain is None:
            raise ModelError("fitting by model id requires a domain")
        model = assemble(model, domain, priors)
    if y is None:
        if model.domain is None:
            raise ModelError("data vector required for domain-less models")
        y = model.domain.count
    settings = settings or InferenceSettings()
    obs = obs if obs is not None else PoissonObservation(model.pixel_area)
    if theta_grid is not None:
        return _fit_fixed_grid(model, y, obs, settings, theta_grid, obs_mask)
    return explore_hyperparameters(model, y, obs, settings, obs_mask)
