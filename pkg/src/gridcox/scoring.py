"""Predictive scoring (AUC, RSA, RSS, count-CRPS), information criteria,
and the 10-fold slope-unit-stratified cross-validation harness.

Pixel-level scores use the posterior-mean predicted count per pixel; SU-level
scores aggregate predictions and observations over the pixels of each slope
unit before scoring.  Cross-validation holds out whole SUs by removing their
likelihood contributions while keeping the latent structure intact, so the
spatial priors smooth predictions into the held-out units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from gridcox.domain import SpatialDomain
from gridcox.inference import InferenceSettings, PosteriorFit, fit as _fit
from gridcox.models import PriorSettings, assemble
from gridcox.sampling import PosteriorSampleSet, aggregate_su, sample_posterior, su_indicator

SCORE_FIELDS = ("auc_grid", "auc_su", "rsa_grid", "rsa_su",
                "rss_grid", "rss_su", "crps_grid", "crps_su")


class ScoringError(ValueError):
    """Raised when a score is requested on inadmissible inputs."""


@dataclass
class FoldScores:
    """The eight predictive scores for one evaluation unit set."""

    fold: str
    auc_grid: float
    auc_su: float
    rsa_grid: float
    rsa_su: float
    rss_grid: float
    rss_su: float
    crps_grid: float
    crps_su: float

    def values(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in SCORE_FIELDS])

    def as_row(self):
        return [self.fold] + [getattr(self, f) for f in SCORE_FIELDS]


@dataclass
class InformationCriteria:
    dic: float
    waic: float
    n_eff: float


@dataclass
class ScoreReport:
    """Per-fold scores plus their mean; information criteria when computed."""

    per_fold: list
    aggregate: FoldScores
    information: InformationCriteria | None = None


@dataclass
class FoldPlan:
    """Random SU partition into folds of near-equal size."""

    n_folds: int
    assignment: np.ndarray        # SU index -> fold number
    seed: int

    def __post_init__(self):
        sizes = np.bincount(self.assignment, minlength=self.n_folds)
        if sizes.max() - sizes.min() > 1:
            raise ScoringError("fold sizes differ by more than one")


def make_fold_plan(n_su: int, n_folds: int, seed: int) -> FoldPlan:
    """Seeded round-robin assignment over a random SU permutation."""
    if n_folds < 2:
        raise ScoringError("need at least two folds")
    if n_folds > n_su:
        raise ScoringError("more folds than slope units")
    perm = np.random.default_rng(seed).permutation(n_su)
    assignment = np.empty(n_su, dtype=np.int64)
    assignment[perm] = np.arange(n_su) % n_folds
    return FoldPlan(n_folds, assignment, int(seed))


def auc(labels, scores) -> float:
    """Area under the ROC curve via the rank statistic, midranks for ties."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape:
        raise ScoringError("labels and scores length mismatch")
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ScoringError("degenerate labels")
    r = rankdata(scores)
    u = r[labels].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def rsa_rss(y, lambda_hat):
    """(sum of absolute residuals, sum of squared residuals)."""
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lambda_hat, dtype=float)
    if y.shape != lam.shape:
        raise ScoringError("length mismatch")
    resid = y - lam
    return float(np.abs(resid).sum()), float((resid ** 2).sum())


def crps_counts(count_samples, y, pad: int = 0) -> float:
    """Total count-CRPS over units from empirical predictive CDFs.

    Per unit: sum over k of (Fhat(k) - 1{k >= y})^2, truncated once the
    empirical CDF has reached 1 and k has passed y (both tails contribute
    zero beyond that point; ``pad`` extends the sum with those zero terms).
    """
    samples = np.asarray(count_samples)
    if samples.size and not np.all(samples == np.floor(samples)):
        raise ScoringError("count samples must be integers")
    samples = samples.astype(np.int64, copy=False)
    if samples.ndim == 1:
        samples = samples[:, None]
    y = np.atleast_1d(np.asarray(y))
    n_s, n_u = samples.shape
    if n_s < 1:
        raise ScoringError("empty sample set")
    if len(y) != n_u:
        raise ScoringError("observation length mismatch")
    total = 0.0
    for u in range(n_u):
        col = samples[:, u]
        k_max = int(max(col.max(), y[u])) + pad
        pmf = np.bincount(col, minlength=k_max + 1) / n_s
        cdf = np.cumsum(pmf)
        ind = np.arange(k_max + 1) >= y[u]
        total += float(((cdf - ind) ** 2).sum())
    return total


def occurrence_probability(lambda_hat) -> np.ndarray:
    """P(at least one event) under a Poisson with mean lambda_hat."""
    return 1.0 - np.exp(-np.asarray(lambda_hat, dtype=float))


def dic_waic(fit: PosteriorFit, samples: PosteriorSampleSet, y=None,
             batch: int = 500):
    """(DIC, WAIC, n_eff) from posterior latent draws.

    DIC uses the deviance at the mixture posterior-mean latent field as the
    plug-in; n_eff is the DIC effective number of parameters p_D.  WAIC
    streams the per-pixel log predictive ordinates over sample batches.
    """
    if samples.n_samples < 100:
        raise ScoringError("insufficient samples for information criteria")
    y = fit.y if y is None else np.asarray(y, dtype=float)
    obs = fit.obs
    n_grid = fit.model.n_grid
    n_s = samples.n_samples

    dev_sum = 0.0
    lse = np.full(n_grid, -np.inf)         # running log sum exp of loglik
    mean_ll = np.zeros(n_grid)
    m2_ll = np.zeros(n_grid)
    seen = 0
    for k in np.unique(samples.theta_indices):
        B = fit.approxes[k]._B
        rows = np.flatnonzero(samples.theta_indices == k)
        for lo in range(0, len(rows), batch):
            sel = rows[lo:lo + batch]
            eta = (B @ samples.latent_draws[sel].T).T
            ll = obs.loglik_terms(eta, y[None, :])
            dev_sum += -2.0 * float(ll.sum())
            lse = np.logaddexp(lse, _logsumexp_rows(ll))
            for row in ll:                  # Welford update per sample
                seen += 1
                d = row - mean_ll
                mean_ll += d / seen
                m2_ll += d * (row - mean_ll)
    var_ll = m2_ll / (n_s - 1)

    d_bar = dev_sum / n_s
    theta_bar = fit.hyper_mean() if fit.model.n_hyper else None
    eta_bar = fit.model.incidence(theta_bar) @ fit.latent_mean
    d_hat = -2.0 * float(obs.loglik_terms(eta_bar, y).sum())
    p_d = d_bar - d_hat
    dic = d_bar + p_d

    lppd = float((lse - math.log(n_s)).sum())
    waic = -2.0 * (lppd - float(var_ll.sum()))
    return dic, waic, p_d


def _logsumexp_rows(ll: np.ndarray) -> np.ndarray:
    """Column-wise log-sum-exp of a (samples, pixels) block."""
    m = ll.max(axis=0)
    return m + np.log(np.exp(ll - m).sum(axis=0))


def _su_lambda(lambda_hat, domain) -> np.ndarray:
    return np.asarray(su_indicator(domain).T @ lambda_hat).ravel()


def _score_units(y_units, lam_units, count_draw_units, fold_label, prefixes):
    labels = np.asarray(y_units) >= 1
    p = occurrence_probability(lam_units)
    # a unit set with only presences (or only absences) has no ranking to
    # assess; record nan rather than abort the whole run
    try:
        a = auc(labels, p)
    except ScoringError:
        a = math.nan
    rsa, rss = rsa_rss(y_units, lam_units)
    crps = crps_counts(count_draw_units, y_units)
    return {f"{prefixes}auc": a, f"{prefixes}rsa": rsa,
            f"{prefixes}rss": rss, f"{prefixes}crps": crps}


def score_sets(fit: PosteriorFit, samples: PosteriorSampleSet,
               domain: SpatialDomain, pixel_sel=None, su_sel=None,
               fold_label="full") -> FoldScores:
    """All eight scores on a pixel subset and the matching SU subset."""
    y = domain.count
    lam = fit.lambda_hat
    if pixel_sel is None:
        pixel_sel = np.ones(domain.n_grid, dtype=bool)
    if su_sel is None:
        su_sel = np.zeros(domain.su_graph.n_su, dtype=bool)
        su_sel[np.unique(domain.su_index[pixel_sel])] = True
    # drop slope units that contain no pixels: nothing to score there
    occupied = np.zeros(domain.su_graph.n_su, dtype=bool)
    occupied[np.unique(domain.su_index)] = True
    su_sel = su_sel & occupied

    g = _score_units(y[pixel_sel], lam[pixel_sel],
                     samples.count_draws[:, pixel_sel], fold_label, "")
    y_su = domain.su_counts[su_sel]
    lam_su = _su_lambda(lam, domain)[su_sel]
    su_draws = aggregate_su(samples, domain)[:, su_sel]
    s = _score_units(y_su, lam_su, su_draws, fold_label, "")
    return FoldScores(
        fold=str(fold_label),
        auc_grid=g["auc"], auc_su=s["auc"],
        rsa_grid=g["rsa"], rsa_su=s["rsa"],
        rss_grid=g["rss"], rss_su=s["rss"],
        crps_grid=g["crps"], crps_su=s["crps"])


def score(fit: PosteriorFit, samples: PosteriorSampleSet,
          domain: SpatialDomain | None = None) -> ScoreReport:
    """In-sample scores over all units plus DIC/WAIC/n_eff."""
    domain = domain if domain is not None else fit.model.domain
    if domain is None:
        raise ScoringError("scoring needs a domain")
    row = score_sets(fit, samples, domain)
    dic, waic, n_eff = dic_waic(fit, samples)
    return ScoreReport(per_fold=[row], aggregate=row,
                       information=InformationCriteria(dic, waic, n_eff))


def _aggregate_rows(rows) -> FoldScores:
    vals = np.mean([r.values() for r in rows], axis=0)
    return FoldScores("aggregate", *vals)


def cross_validate(model_id, domain: SpatialDomain,
                   priors: PriorSettings | None = None, seed: int = 0,
                   n_folds: int = 10, n_samples: int = 5000,
                   settings: InferenceSettings | None = None,
                   obs=None) -> ScoreReport:
    """SU-stratified k-fold cross-validation of one model.

    Each fold's pixels are held out by masking their likelihood terms; the
    refit model predicts them through the spatial structure, and all eight
    scores are computed on the held-out units from posterior-predictive
    samples.  The aggregate row is the arithmetic mean over folds.
    """
    n_su = domain.su_graph.n_su
    if n_folds > n_su:
        raise ScoringError("more folds than slope units")
    plan = make_fold_plan(n_su, n_folds, seed)
    model = assemble(model_id, domain, priors) if isinstance(model_id, str) else model_id
    fold_of_pixel = plan.assignment[domain.su_index]

    rows = []
    for f in range(n_folds):
        held = fold_of_pixel == f
        if not held.any():
            raise ScoringError(f"fold {f} holds no pixels")
        pf = _fit(model, y=domain.count, obs=obs, settings=settings,
                  obs_mask=~held)
        fold_seed = int(np.random.SeedSequence([int(seed), f]).generate_state(1)[0])
        samples = sample_posterior(pf, n_samples, fold_seed)
        su_sel = plan.assignment == f
        rows.append(score_sets(pf, samples, domain, pixel_sel=held,
                               su_sel=su_sel, fold_label=f))
    return ScoreReport(per_fold=rows, aggregate=_aggregate_rows(rows))
