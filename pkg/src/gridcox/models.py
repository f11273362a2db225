"""Latent Gaussian model assembly for the M0-M5 family.

A LatentModel is an ordered list of components (fixed effects, iid blocks,
random walks, CAR fields) together with a sparse incidence matrix mapping the
stacked latent vector to pixel log-intensities, the constraint inventory, and
the hyperparameter list (one precision per structured block, plus the
interaction coefficient beta for M5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from gridcox.domain import (
    N_ASPECT_BINS,
    N_SLOPE_CLASSES,
    PixelRecord,
    SpatialDomain,
)
from gridcox.structures import (
    PCPrior,
    SparsePrecision,
    besag_structure,
    generalized_logdet,
    iid_structure,
    pc_prior_log_density,
    rw1_structure,
    scaling_constant,
)

MODEL_IDS = ("M0", "M1a", "M1b", "M2", "M3", "M4", "M5")

# baseline model used as the cross-validation reference
INTERCEPT_ONLY = "intercept"

_LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Raised for invalid model requests or latent-vector contract breaches."""


@dataclass
class PriorSettings:
    """Prior configuration shared by all models.

    PC-prior (u, alpha) pairs: the generic setting applies to categorical,
    aspect, slope-class and iid blocks; the primary CAR field and the
    space-varying field have their own.  ``component_pc`` overrides by
    component name.  ``svr_sum_to_zero`` attaches a constraint to the
    space-varying CAR block (off by default: that block is identified
    through its slope-weighted incidence).
    """

    default_u: float = 1.0
    default_alpha: float = 0.01
    lse_u: float = 5.0
    lse_alpha: float = 0.01
    svr_u: float = 0.1
    svr_alpha: float = 0.01
    fixed_mean: float = 0.0
    fixed_precision: float = 1.0
    intercept_mean: float = -2.0
    intercept_precision: float = 1.0
    beta_mean: float = 1.0
    beta_precision: float = 10.0
    svr_sum_to_zero: bool = False
    component_pc: dict = field(default_factory=dict)

    def pc_for(self, name: str, role: str) -> PCPrior:
        if name in self.component_pc:
            u, a = self.component_pc[name]
        elif role == "lse":
            u, a = self.lse_u, self.lse_alpha
        elif role == "svr":
            u, a = self.svr_u, self.svr_alpha
        else:
            u, a = self.default_u, self.default_alpha
        return PCPrior(u, a)


@dataclass
class LatentComponent:
    """One block of the latent vector.

    kind 'fixed' carries independent Gaussian priors (means/precisions per
    coordinate) and no hyperparameter.  Structured kinds carry a structure
    matrix and either a PC hyperprior on their precision or a fixed
    precision (``fixed_tau``, used by test oracles).
    """

    name: str
    kind: str                      # fixed | iid | rw1 | crw1 | car | car_copy
    size: int
    structure: SparsePrecision | None = None
    hyper: PCPrior | None = None
    fixed_prior_means: np.ndarray | None = None
    fixed_prior_precisions: np.ndarray | None = None
    fixed_tau: float | None = None
    labels: tuple = ()
    # filled during model assembly
    offset: int = 0
    scaling: float = 1.0
    gen_logdet: float = 0.0
    eff_dim: int = 0

    def __post_init__(self):
        if self.kind == "fixed":
            if self.structure is not None or self.hyper is not None:
                raise ModelError("fixed component takes no structure or hyperprior")
            if len(self.fixed_prior_means) != self.size or \
                    len(self.fixed_prior_precisions) != self.size:
                raise ModelError("fixed prior vectors must match component size")
            if np.any(np.asarray(self.fixed_prior_precisions) <= 0):
                raise ModelError("fixed prior precisions must be positive")
        else:
            if self.structure is None:
                raise ModelError(f"component {self.name!r} needs a structure")
            if self.structure.dimension != self.size:
                raise ModelError("structure dimension must equal component size")
            if (self.hyper is None) == (self.fixed_tau is None):
                raise ModelError(
                    f"component {self.name!r} needs a hyperprior or a fixed tau")
        if not self.labels:
            self.labels = tuple(str(i) for i in range(self.size))

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    def finalize(self, offset: int) -> None:
        """Cache offset, scaling constant, generalized log-det, effective dim."""
        self.offset = offset
        if self.is_fixed:
            self.scaling, self.gen_logdet, self.eff_dim = 1.0, 0.0, self.size
            return
        self.scaling = scaling_constant(self.structure)
        self.gen_logdet = generalized_logdet(self.structure)
        drop = max(self.structure.n_constraints, self.structure.rank_deficiency)
        self.eff_dim = self.size - drop
        if self.eff_dim < 1:
            raise ModelError(f"component {self.name!r} has no free dimensions")


@dataclass
class LatentModel:
    """Assembled latent Gaussian model tied to one domain."""

    model_id: str
    components: list
    n_grid: int
    pixel_area: float
    domain: SpatialDomain | None = None
    beta_prior_mean: float = 1.0
    beta_prior_precision: float = 10.0
    _incidence_base: sp.csr_matrix = None
    _incidence_beta_mod: sp.csr_matrix | None = None

    def __post_init__(self):
        offset = 0
        for c in self.components:
            c.finalize(offset)
            offset += c.size
        self.total_dim = offset
        self._hyper_comps = [c for c in self.components
                             if not c.is_fixed and c.hyper is not None]
        self.hyper_names = ["tau_" + c.name for c in self._hyper_comps]
        self.has_beta = self._incidence_beta_mod is not None
        if self.has_beta:
            self.hyper_names.append("beta")
        self.n_hyper = len(self.hyper_names)
        rows = []
        for c in self.components:
            if c.is_fixed or c.structure is None:
                continue
            for a in c.structure.constraints:
                row = np.zeros(self.total_dim)
                row[c.offset:c.offset + c.size] = a
                rows.append(row)
        self.constraints = np.array(rows) if rows else np.zeros((0, self.total_dim))
        self.n_constraints = len(rows)
        if self._incidence_base.shape != (self.n_grid, self.total_dim):
            raise ModelError("incidence shape mismatch")

    # -- hyperparameter bookkeeping -------------------------------------

    def check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if len(theta) != self.n_hyper:
            raise ModelError(
                f"model {self.model_id} expects {self.n_hyper} hyperparameters, "
                f"got {len(theta)}")
        if not np.all(np.isfinite(theta)):
            raise ModelError("non-finite hyperparameter")
        n_tau = len(self._hyper_comps)
        if np.any(theta[:n_tau] <= 0):
            raise ModelError("precision hyperparameters must be positive")
        return theta

    def component_tau(self, component: LatentComponent, theta) -> float:
        if component.fixed_tau is not None:
            return component.fixed_tau
        k = self._hyper_comps.index(component)
        return float(theta[k])

    def beta_value(self, theta) -> float:
        if not self.has_beta:
            return 0.0
        return float(theta[-1])

    # -- incidence -------------------------------------------------------

    def incidence(self, theta=None) -> sp.csr_matrix:
        """Sparse map from latent vector to pixel log-intensities.

        Only beta (last hyperparameter, M5) changes the weights; precision
        hyperparameters never do, so the beta-free matrix is shared.
        """
        if not self.has_beta:
            return self._incidence_base
        theta = self.check_theta(theta)
        beta = self.beta_value(theta)
        return (self._incidence_base + beta * self._incidence_beta_mod).tocsr()

    def incidence_row(self, pixel: PixelRecord, theta=None) -> np.ndarray:
        """Dense incidence row for one pixel; row . x = log-intensity."""
        if self.domain is None:
            raise ModelError("per-pixel incidence rows need a domain-backed model")
        pos = int(np.flatnonzero(self.domain.pixel_id == pixel.pixel_id)[0])
        return np.asarray(self.incidence(theta)[pos].todense()).ravel()

    # -- priors ----------------------------------------------------------

    @property
    def prior_mean(self) -> np.ndarray:
        m = np.zeros(self.total_dim)
        for c in self.components:
            if c.is_fixed:
                m[c.offset:c.offset + c.size] = c.fixed_prior_means
        return m

    def prior_precision(self, theta) -> sp.csc_matrix:
        """Block-diagonal latent prior precision at hyperparameters theta."""
        theta = self.check_theta(theta)
        blocks = []
        for c in self.components:
            if c.is_fixed:
                blocks.append(sp.diags(np.asarray(c.fixed_prior_precisions, dtype=float)))
            else:
                tau = self.component_tau(c, theta)
                blocks.append(tau * c.scaling * c.structure.matrix)
        return sp.block_diag(blocks, format="csc")

    def constraint_violation(self, x) -> float:
        if self.n_constraints == 0:
            return 0.0
        return float(np.abs(self.constraints @ x).max())

    def log_prior_latent(self, x, theta) -> float:
        """Joint log prior density of the latent vector at theta.

        Constrained blocks are priced on their constraint subspace
        (effective dimension size - #constraints); unconstrained intrinsic
        blocks use the generalized determinant (size - rank deficiency).
        """
        x = np.asarray(x, dtype=float)
        if len(x) != self.total_dim:
            raise ModelError("latent vector dimension mismatch")
        theta = self.check_theta(theta)
        tol = 1e-8 * max(1.0, float(np.abs(x).max())) * max(1.0, math.sqrt(self.total_dim))
        if self.constraint_violation(x) > tol:
            raise ModelError("latent vector violates constraints")
        total = 0.0
        for c in self.components:
            xb = x[c.offset:c.offset + c.size]
            if c.is_fixed:
                p = np.asarray(c.fixed_prior_precisions, dtype=float)
                m = np.asarray(c.fixed_prior_means, dtype=float)
                total += float(0.5 * np.sum(np.log(p)) - 0.5 * c.size * _LOG_2PI
                               - 0.5 * np.sum(p * (xb - m) ** 2))
            else:
                tau = self.component_tau(c, theta) * c.scaling
                quad = float(xb @ (c.structure.matrix @ xb))
                total += (-0.5 * c.eff_dim * _LOG_2PI
                          + 0.5 * (c.eff_dim * math.log(tau) + c.gen_logdet)
                          - 0.5 * tau * quad)
        return total

    def log_prior_hyper(self, theta) -> float:
        """Log prior of the hyperparameter vector (PC priors, beta Gaussian)."""
        theta = self.check_theta(theta)
        total = 0.0
        for k, c in enumerate(self._hyper_comps):
            total += pc_prior_log_density(theta[k], c.hyper)
        if self.has_beta:
            b = theta[-1]
            total += float(0.5 * math.log(self.beta_prior_precision / (2 * math.pi))
                           - 0.5 * self.beta_prior_precision * (b - self.beta_prior_mean) ** 2)
        return total

    # -- summaries -------------------------------------------------------

    def coordinate_labels(self):
        """(component name, within-block index, label) for every coordinate."""
        out = []
        for c in self.components:
            for i in range(c.size):
                out.append((c.name, i, c.labels[i]))
        return out


def fixed_component(names, means, precisions) -> LatentComponent:
    names = tuple(names)
    return LatentComponent(
        name="fixed", kind="fixed", size=len(names),
        fixed_prior_means=np.asarray(means, dtype=float),
        fixed_prior_precisions=np.asarray(precisions, dtype=float),
        labels=names)


def custom_model(components, incidence, pixel_area=1.0, model_id="custom",
                 beta_modifier=None, beta_prior_mean=1.0,
                 beta_prior_precision=10.0, domain=None) -> LatentModel:
    """Build a LatentModel from explicit parts (test oracles, surrogates)."""
    B = sp.csr_matrix(incidence)
    mod = sp.csr_matrix(beta_modifier) if beta_modifier is not None else None
    return LatentModel(
        model_id=model_id, components=list(components), n_grid=B.shape[0],
        pixel_area=float(pixel_area), domain=domain,
        beta_prior_mean=beta_prior_mean, beta_prior_precision=beta_prior_precision,
        _incidence_base=B, _incidence_beta_mod=mod)


def _uses_linear_slope(model_id: str) -> bool:
    return model_id in ("M0", "M1a", "M1b", "M3")


def _uses_slope_classes(model_id: str) -> bool:
    return model_id in ("M2", "M4", "M5")


def assemble(model_id: str, domain: SpatialDomain,
             priors: PriorSettings | None = None) -> LatentModel:
    """Assemble the latent model for one of M0-M5 (or the intercept baseline).

    Component inventory: fixed effects (intercept, continuous covariates,
    linear slope where the model keeps it), one constrained iid block per
    categorical covariate, a cyclic RW1 over 16 aspect sectors, an RW1 over
    10 slope classes for M2/M4/M5, the primary CAR field over slope units,
    a slope-weighted CAR copy for M3/M4, and the extra iid blocks of M1a/M1b.
    M5 reuses M2's components but makes the primary CAR incidence
    (1 + beta * slope) with beta an extra hyperparameter.
    """
    if priors is None:
        priors = PriorSettings()
    if model_id not in MODEL_IDS and model_id != INTERCEPT_ONLY:
        raise ModelError(f"unknown model {model_id}")
    if (_uses_slope_classes(model_id) or model_id == "M3") and not domain.has_slope:
        raise ModelError(f"missing slope column for model {model_id}")

    n = domain.n_grid
    su = domain.su_index
    comps: list[LatentComponent] = []
    rows, cols, vals = [], [], []
    all_rows = np.arange(n)

    # fixed effects: intercept first, then continuous covariates, then slope
    fx_names = ["intercept"]
    fx_means = [priors.intercept_mean]
    fx_prec = [priors.intercept_precision]
    fx_cols: list[np.ndarray] = [np.ones(n)]
    if model_id != INTERCEPT_ONLY:
        for j, name in enumerate(domain.continuous_names):
            fx_names.append(name)
            fx_means.append(priors.fixed_mean)
            fx_prec.append(priors.fixed_precision)
            fx_cols.append(domain.continuous[:, j])
        if _uses_linear_slope(model_id) and domain.has_slope:
            fx_names.append("slope")
            fx_means.append(priors.fixed_mean)
            fx_prec.append(priors.fixed_precision)
            fx_cols.append(domain.slope_value)
    fixed = fixed_component(fx_names, fx_means, fx_prec)
    comps.append(fixed)
    offset = 0
    for j, colvals in enumerate(fx_cols):
        rows.extend(all_rows.tolist())
        cols.extend([j] * n)
        vals.extend(np.asarray(colvals, dtype=float).tolist())
    offset = len(fx_cols)

    def append_structured(name, kind, structure, role, labels=None):
        nonlocal offset
        comp = LatentComponent(
            name=name, kind=kind, size=structure.dimension, structure=structure,
            hyper=priors.pc_for(name, role),
            labels=tuple(labels) if labels else ())
        comps.append(comp)
        start = offset
        offset += comp.size
        return comp, start

    if model_id != INTERCEPT_ONLY:
        for j, name in enumerate(domain.categorical_names):
            levels = domain.categorical_levels[j]
            if levels < 2:
                raise ModelError(f"categorical {name!r} needs at least 2 levels")
            _, start = append_structured(
                name, "iid", iid_structure(levels, sum_to_zero=True), "default")
            rows.extend(all_rows.tolist())
            cols.extend((start + domain.categorical[:, j]).tolist())
            vals.extend([1.0] * n)

        _, start = append_structured(
            "aspect", "crw1", rw1_structure(N_ASPECT_BINS, cyclic=True), "default")
        rows.extend(all_rows.tolist())
        cols.extend((start + domain.aspect_bin).tolist())
        vals.extend([1.0] * n)

        if _uses_slope_classes(model_id):
            _, start = append_structured(
                "slope_classes", "rw1", rw1_structure(N_SLOPE_CLASSES), "default")
            rows.extend(all_rows.tolist())
            cols.extend((start + domain.slope_class).tolist())
            vals.extend([1.0] * n)

        su_labels = tuple(str(i) for i in range(1, domain.su_graph.n_su + 1))
        _, lse_start = append_structured(
            "lse", "car", besag_structure(domain.su_graph), "lse", su_labels)
        rows.extend(all_rows.tolist())
        cols.extend((lse_start + su).tolist())
        vals.extend([1.0] * n)

        if model_id in ("M3", "M4"):
            svr_structure = besag_structure(domain.su_graph)
            if not priors.svr_sum_to_zero:
                svr_structure.constraints = []
            _, start = append_structured(
                "svr", "car_copy", svr_structure, "svr", su_labels)
            rows.extend(all_rows.tolist())
            cols.extend((start + su).tolist())
            vals.extend(domain.slope_value.astype(float).tolist())

        if model_id == "M1a":
            _, start = append_structured(
                "grid_iid", "iid", iid_structure(n, sum_to_zero=True), "default",
                tuple(str(p) for p in domain.pixel_id))
            rows.extend(all_rows.tolist())
            cols.extend((start + all_rows).tolist())
            vals.extend([1.0] * n)
        elif model_id == "M1b":
            _, start = append_structured(
                "su_iid", "iid", iid_structure(domain.su_graph.n_su, sum_to_zero=True),
                "default", su_labels)
            rows.extend(all_rows.tolist())
            cols.extend((start + su).tolist())
            vals.extend([1.0] * n)

    total = offset
    B = sp.csr_matrix(
        (np.asarray(vals), (np.asarray(rows), np.asarray(cols))), shape=(n, total))

    beta_mod = None
    if model_id == "M5":
        beta_mod = sp.csr_matrix(
            (domain.slope_value.astype(float), (all_rows, lse_start + su)),
            shape=(n, total))

    return LatentModel(
        model_id=model_id, components=comps, n_grid=n,
        pixel_area=domain.pixel_area, domain=domain,
        beta_prior_mean=priors.beta_mean, beta_prior_precision=priors.beta_precision,
        _incidence_base=B, _incidence_beta_mod=beta_mod)
