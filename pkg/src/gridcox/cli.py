"""Batch command-line front end.

Subcommands: ``fit`` (posterior summaries, hyperparameter grid, pixel
intensities, effect tables and figures), ``cv`` (slope-unit-stratified
k-fold cross-validation scores), ``score`` (fit outputs plus in-sample
scores and information criteria), ``simulate`` (synthetic dataset
generation).  Every command is a pure function of (config file, data
files, seed): reruns write byte-identical output.  All output files begin
with a comment line recording the config hash and seed.  Exit codes:
0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from gridcox.config import ConfigError, RunConfig, load_config, output_header
from gridcox.domain import DataError, load_domain
from gridcox.inference import InferenceError, PosteriorFit, fit
from gridcox.models import INTERCEPT_ONLY, MODEL_IDS, ModelError, assemble
from gridcox.sampling import sample_posterior
from gridcox.scoring import (
    SCORE_FIELDS,
    ScoringError,
    cross_validate,
    dic_waic,
    score_sets,
)
from gridcox.synthetic import TruthConfig, simulate_dataset, write_dataset

_VALID_MODELS = MODEL_IDS + (INTERCEPT_ONLY,)


class _UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser whose failures surface as single-line errors."""

    def error(self, message):
        raise _UsageError(message)


def _fmt(v) -> str:
    """Render one CSV cell: 6 significant digits for floats."""
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if math.isnan(f):
        return "nan"
    return f"{f:.6g}"


def _write_csv(path: str, header_line: str, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="gridcox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, helptext in (
            ("fit", "fit one model and write posterior summaries"),
            ("cv", "run k-fold cross-validation and write scores"),
            ("score", "fit plus in-sample scores and information criteria"),
            ("simulate", "generate a synthetic dataset")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="INI configuration file")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory (default from config)")
        p.add_argument("--seed", metavar="N", type=int, default=None,
                       help="random seed (default from config)")
        p.add_argument("--model", metavar="ID", default=None,
                       help="model id: M0 M1a M1b M2 M3 M4 M5 or intercept")
        p.add_argument("--threads", metavar="N", type=int, default=None,
                       help="worker thread cap (default 1)")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, model_id=args.model, seed=args.seed,
                      out_dir=args.out, threads=args.threads)
    if cfg.model_id not in _VALID_MODELS:
        raise ConfigError(f"unknown model {cfg.model_id}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


# -- fit output files ---------------------------------------------------

def _structured_blocks(model):
    return [c for c in model.components if not c.is_fixed]


def _fit_tables(cfg: RunConfig, domain, model, pf: PosteriorFit, criteria):
    head = output_header(cfg)
    mean = pf.latent_mean
    sd = pf.latent_sd
    q = pf.latent_quantiles([0.025, 0.975])

    rows = []
    for j, (comp, idx, label) in enumerate(model.coordinate_labels()):
        rows.append([comp, idx, label, mean[j], sd[j], q[j, 0], q[j, 1]])
    hm, hs = pf.hyper_mean(), pf.hyper_sd()
    for j, name in enumerate(pf.theta_names):
        rows.append(["hyperparameter", j, name, hm[j], hs[j],
                     pf.hyper_quantile(0.025, j), pf.hyper_quantile(0.975, j)])
    if domain.slope_bin_range is not None:
        lo, hi = domain.slope_bin_range
        rows.append(["meta", 0, "slope_bin_min", lo, None, None, None])
        rows.append(["meta", 1, "slope_bin_max", hi, None, None, None])
    if criteria is not None:
        dic, waic, n_eff = criteria
        rows.append(["criterion", 0, "dic", dic, None, None, None])
        rows.append(["criterion", 1, "waic", waic, None, None, None])
        rows.append(["criterion", 2, "n_eff", n_eff, None, None, None])
    _write_csv(os.path.join(cfg.out_dir, "fit_summary.csv"), head,
               ("component", "index", "label", "post_mean", "post_sd",
                "q025", "q975"), rows)

    k = model.n_hyper
    theta_cols = [f"theta_{j + 1}" for j in range(k)] + ["log_density", "weight"]
    _write_csv(os.path.join(cfg.out_dir, "theta_grid.csv"), head,
               theta_cols, pf.theta_table())

    eta_rows = zip(domain.pixel_id, pf.eta_mean, pf.eta_sd)
    _write_csv(os.path.join(cfg.out_dir, "intensity.csv"), head,
               ("pixel_id", "post_mean_log_intensity", "post_sd"), eta_rows)

    for c in _structured_blocks(model):
        sl = slice(c.offset, c.offset + c.size)
        block_rows = [
            [i, c.labels[i], mean[sl][i], sd[sl][i], q[sl, 0][i], q[sl, 1][i]]
            for i in range(c.size)]
        _write_csv(os.path.join(cfg.out_dir, f"effects_{c.name}.csv"), head,
                   ("index", "label", "post_mean", "post_sd", "q025", "q975"),
                   block_rows)

    if cfg.plots:
        from gridcox import plots
        for c in _structured_blocks(model):
            sl = slice(c.offset, c.offset + c.size)
            plots.plot_effect(c.name, c.labels, mean[sl], q[sl, 0], q[sl, 1],
                              cfg.out_dir)
        if k:
            plots.plot_theta(pf.theta_names, hm, hs,
                             [pf.hyper_quantile(0.025, j) for j in range(k)],
                             [pf.hyper_quantile(0.975, j) for j in range(k)],
                             cfg.out_dir)


def _fit_once(cfg: RunConfig):
    domain = load_domain(cfg.pixels_path, cfg.adjacency_path, cfg.pixel_area)
    model = assemble(cfg.model_id, domain, cfg.priors)
    pf = fit(model, settings=cfg.inference)
    samples = sample_posterior(pf, cfg.n_samples, cfg.seed)
    criteria = dic_waic(pf, samples) if cfg.n_samples >= 100 else None
    return domain, model, pf, samples, criteria


def run_fit(cfg: RunConfig) -> int:
    domain, model, pf, _, criteria = _fit_once(cfg)
    _fit_tables(cfg, domain, model, pf, criteria)
    return 0


def run_score(cfg: RunConfig) -> int:
    domain, model, pf, samples, criteria = _fit_once(cfg)
    _fit_tables(cfg, domain, model, pf, criteria)
    row = score_sets(pf, samples, domain)
    _write_csv(os.path.join(cfg.out_dir, "scores.csv"), output_header(cfg),
               ("fold",) + SCORE_FIELDS,
               [row.as_row(), ["aggregate"] + row.as_row()[1:]])
    return 0


def run_cv(cfg: RunConfig) -> int:
    domain = load_domain(cfg.pixels_path, cfg.adjacency_path, cfg.pixel_area)
    report = cross_validate(cfg.model_id, domain, cfg.priors, seed=cfg.seed,
                            n_folds=cfg.n_folds, n_samples=cfg.n_samples,
                            settings=cfg.inference)
    rows = [r.as_row() for r in report.per_fold]
    rows.append(report.aggregate.as_row())
    _write_csv(os.path.join(cfg.out_dir, "scores.csv"), output_header(cfg),
               ("fold",) + SCORE_FIELDS, rows)
    if cfg.plots:
        from gridcox import plots
        fold_rows = [dict(zip(("fold",) + SCORE_FIELDS, r.as_row()))
                     for r in report.per_fold]
        plots.plot_cv_scores(fold_rows, cfg.out_dir)
    return 0


def run_simulate(cfg: RunConfig) -> int:
    truth = TruthConfig(
        model_id=cfg.model_id, nx=cfg.sim_nx, ny=cfg.sim_ny,
        n_su=cfg.sim_n_su, seed=cfg.seed,
        fixed_effects=dict(cfg.sim_fixed_effects),
        hyperparameters=dict(cfg.sim_hyperparameters),
        n_continuous=cfg.sim_n_continuous,
        categorical_levels=tuple(cfg.sim_categorical_levels),
        pixel_area=cfg.sim_pixel_area, priors=cfg.priors)
    ds = simulate_dataset(truth)
    head = output_header(cfg)
    paths = [os.path.join(cfg.out_dir, f)
             for f in ("pixels.csv", "su_adjacency.csv", "truth.csv")]
    with open(paths[0], "w", encoding="utf-8", newline="\n") as pfh, \
            open(paths[1], "w", encoding="utf-8", newline="\n") as afh, \
            open(paths[2], "w", encoding="utf-8", newline="\n") as tfh:
        write_dataset(ds, pfh, afh, tfh, header=head)
    return 0


_COMMANDS = {"fit": run_fit, "cv": run_cv, "score": run_score,
             "simulate": run_simulate}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:         # --help
        return int(exc.code or 0)
    if args.command is None:
        print("error: a command is required (fit, cv, score, simulate)",
              file=sys.stderr)
        return 2
    try:
        cfg = _resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except (InferenceError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, ModelError, ScoringError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
