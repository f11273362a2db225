"""Run configuration: INI file parsing, defaults, and the config hash.

Every key has a default; an empty or missing config file reproduces the
documented prior settings (generic PC prior (1, 0.01); (5, 0.01) for the
primary CAR field; (0.1, 0.01) for the space-varying field; fixed-effect
priors mean 0 precision 1, intercept mean -2; beta prior mean 1 precision
10) and a pixel area of 225 squared meters.  Unknown keys are rejected so
typos fail loudly.  The config hash covers every resolved setting plus the
seed and is stamped into every output file.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from gridcox.inference import InferenceSettings
from gridcox.models import PriorSettings


class ConfigError(ValueError):
    """Raised for unreadable, unknown, or out-of-range configuration."""


@dataclass
class RunConfig:
    """Resolved configuration for one CLI run."""

    model_id: str = "M0"
    pixels_path: str = "pixels.csv"
    adjacency_path: str = "su_adjacency.csv"
    pixel_area: float = 225.0
    priors: PriorSettings = field(default_factory=PriorSettings)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    n_folds: int = 10
    n_samples: int = 5000
    crps_pad: int = 0
    seed: int = 0
    out_dir: str = "."
    plots: bool = True
    # simulate subcommand
    sim_nx: int = 10
    sim_ny: int = 10
    sim_n_su: int = 4
    sim_n_continuous: int = 1
    sim_categorical_levels: tuple = ()
    sim_pixel_area: float = 1.0
    sim_fixed_effects: dict = field(default_factory=lambda: {"intercept": -2.0})
    sim_hyperparameters: dict = field(default_factory=dict)


_SCHEMA = {
    "data": {"pixels": str, "adjacency": str, "pixel_area": float},
    "model": {"id": str, "svr_sum_to_zero": bool},
    "priors": {
        "default_u": float, "default_alpha": float,
        "lse_u": float, "lse_alpha": float,
        "svr_u": float, "svr_alpha": float,
        "fixed_mean": float, "fixed_precision": float,
        "intercept_mean": float, "intercept_precision": float,
        "beta_mean": float, "beta_precision": float,
    },
    "inference": {
        "grid_step": float, "log_density_drop": float,
        "newton_tol": float, "max_newton_iter": int,
        "max_axis_steps": int, "max_grid_points": int,
    },
    "cv": {"n_folds": int, "n_samples": int, "crps_pad": int},
    "output": {"directory": str, "plots": bool},
    "simulate": {
        "nx": int, "ny": int, "n_su": int, "n_continuous": int,
        "categorical_levels": str, "pixel_area": float,
    },
}


def _convert(raw: str, typ, section: str, key: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"bad value {raw!r} for [{section}] {key}") from None


def load_config(path: str | None = None, **overrides) -> RunConfig:
    """Build a RunConfig from an INI file plus CLI overrides.

    Recognized overrides: model_id, seed, out_dir, threads.  A missing path
    yields pure defaults.
    """
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            base = section.split(".")[0]
            if base not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                _apply_key(cfg, section, base, key, raw)

    if overrides.get("model_id") is not None:
        cfg.model_id = overrides["model_id"]
    if overrides.get("seed") is not None:
        cfg.seed = int(overrides["seed"])
    if overrides.get("out_dir") is not None:
        cfg.out_dir = overrides["out_dir"]
    if overrides.get("threads") is not None:
        cfg.inference.threads = int(overrides["threads"])
        if cfg.inference.threads < 1:
            raise ConfigError("thread count must be at least 1")
    _validate(cfg)
    return cfg


def _apply_key(cfg: RunConfig, section: str, base: str, key: str, raw: str):
    # [priors] accepts per-component overrides `pc_<name> = u,alpha`
    if base == "priors" and key.startswith("pc_"):
        parts = raw.split(",")
        if len(parts) != 2:
            raise ConfigError(f"[{section}] {key} needs 'u,alpha'")
        u = _convert(parts[0], float, section, key)
        a = _convert(parts[1], float, section, key)
        cfg.priors.component_pc[key[3:]] = (u, a)
        return
    if base == "simulate" and (key.startswith("coef_") or key.startswith("tau_")
                               or key == "beta"):
        v = _convert(raw, float, section, key)
        if key.startswith("coef_"):
            cfg.sim_fixed_effects[key[5:]] = v
        else:
            cfg.sim_hyperparameters[key] = v
        return
    if key not in _SCHEMA[base]:
        raise ConfigError(f"unknown config key {key!r} in [{section}]")
    val = _convert(raw, _SCHEMA[base][key], section, key)
    target = {
        ("data", "pixels"): ("pixels_path",),
        ("data", "adjacency"): ("adjacency_path",),
        ("data", "pixel_area"): ("pixel_area",),
        ("model", "id"): ("model_id",),
        ("model", "svr_sum_to_zero"): ("priors", "svr_sum_to_zero"),
        ("cv", "n_folds"): ("n_folds",),
        ("cv", "n_samples"): ("n_samples",),
        ("cv", "crps_pad"): ("crps_pad",),
        ("output", "directory"): ("out_dir",),
        ("output", "plots"): ("plots",),
        ("simulate", "nx"): ("sim_nx",),
        ("simulate", "ny"): ("sim_ny",),
        ("simulate", "n_su"): ("sim_n_su",),
        ("simulate", "n_continuous"): ("sim_n_continuous",),
        ("simulate", "pixel_area"): ("sim_pixel_area",),
    }.get((base, key))
    if target is None:
        if base == "priors":
            setattr(cfg.priors, key, val)
        elif base == "inference":
            setattr(cfg.inference, key, val)
        elif (base, key) == ("simulate", "categorical_levels"):
            levels = tuple(int(s) for s in val.split(",") if s.strip())
            cfg.sim_categorical_levels = levels
        else:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
    elif len(target) == 1:
        setattr(cfg, target[0], val)
    else:
        setattr(getattr(cfg, target[0]), target[1], val)


def _validate(cfg: RunConfig):
    if cfg.pixel_area <= 0 or cfg.sim_pixel_area <= 0:
        raise ConfigError("pixel area must be positive")
    if cfg.n_folds < 2:
        raise ConfigError("need at least two folds")
    if cfg.n_samples < 1:
        raise ConfigError("need at least one posterior sample")
    if cfg.inference.grid_step <= 0 or cfg.inference.log_density_drop <= 0:
        raise ConfigError("grid step and density drop must be positive")
    if cfg.inference.newton_tol <= 0:
        raise ConfigError("Newton tolerance must be positive")


# keys that steer presentation or scheduling, not the analysis; they are
# left out of the hash so moving output or changing worker count does not
# masquerade as a different run
_UNHASHED = {"out_dir", "plots", "inference.threads"}


def canonical_text(cfg: RunConfig) -> str:
    """Deterministic flat key=value rendering of every resolved setting."""
    lines = []

    def emit(prefix, obj):
        for f in fields(obj):
            key = f"{prefix}{f.name}"
            if key in _UNHASHED:
                continue
            v = getattr(obj, f.name)
            if hasattr(v, "__dataclass_fields__"):
                emit(key + ".", v)
            elif isinstance(v, dict):
                for k in sorted(v):
                    lines.append(f"{key}.{k}={v[k]!r}")
            else:
                lines.append(f"{key}={v!r}")

    emit("", cfg)
    return "\n".join(sorted(lines))


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the canonical rendering; stamped into output headers."""
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


def output_header(cfg: RunConfig) -> str:
    return f"# config_hash={config_hash(cfg)} seed={cfg.seed}"
