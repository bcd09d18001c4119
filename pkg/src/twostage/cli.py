"""Command-line front end: ``twostage {limit,interaction,simulate,compare,verify}``.

Exit codes: 0 success, 1 failed verification or computation, 2 configuration error.
Every artifact starts with ``#`` comment lines carrying the seed and config hash.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, config_hash, load_config, serialize
from .errors import ConfigError, TwoStageError
from .factor_model import FactorPopulation, factor_limit_law, factor_limit_law_exact
from .harness import FactorExperiment, SpectralExperiment, compare, run_two_stage
from .laws import LimitLaw
from .mog_model import InteractionConfig, MixtureParams, SignalSpec, gating_state, interaction_term_mc
from .spectral_model import SpectralPopulation, concrete_limit_law, spectral_limit_law

SIMULATE_COLUMNS = ("rep_index", "m", "n", "rep_term", "leakage_term", "variance_term", "excess_scaled")
COMMANDS = ("limit", "interaction", "simulate", "compare", "verify")


def fmt(x) -> str:
    """17 significant digits for floats, so every double round-trips."""
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


# ---------------------------------------------------------------- builders


def _require(cfg: ExperimentConfig, *models: str) -> None:
    if cfg.model not in models:
        raise ConfigError(f"this command needs model in {{{', '.join(models)}}}, config has '{cfg.model}'")


def build_factor(cfg: ExperimentConfig) -> FactorPopulation:
    return FactorPopulation.orthogonal(cfg.d, cfg.loadings, cfg.beta_star, cfg.sigma_nu)


def build_spectral(cfg: ExperimentConfig) -> SpectralPopulation:
    if cfg.pre_diag:
        return SpectralPopulation.diagonal(cfg.pre_diag, cfg.plus_diag, cfg.k, beta_star=cfg.beta_star)
    lam = 1.0 / np.arange(1, cfg.d + 1)
    return SpectralPopulation.diagonal(np.ones(cfg.d), lam, cfg.k, beta_star=cfg.beta_star)


def build_experiment(cfg: ExperimentConfig):
    _require(cfg, "spectral", "factor")
    if cfg.model == "factor":
        return FactorExperiment(build_factor(cfg))
    return SpectralExperiment(build_spectral(cfg), cfg.sigma2)


def build_law(cfg: ExperimentConfig) -> LimitLaw:
    _require(cfg, "spectral", "factor")
    alpha = cfg.effective_alpha
    if cfg.model == "factor":
        pop = build_factor(cfg)
        if cfg.law == "closed_form":
            return factor_limit_law(pop, alpha)
        if cfg.law == "corrected":
            return factor_limit_law_exact(pop, alpha)
        raise ConfigError("law = ambient applies to the spectral model only")
    if cfg.law == "closed_form":
        if cfg.pre_diag or any(b != 1.0 for b in cfg.beta_star):
            raise ConfigError("law = closed_form needs the concrete spectral example (no pre_diag, beta_star all ones)")
        return concrete_limit_law(cfg.d, cfg.k, alpha, cfg.sigma2)
    hessian = "riemannian" if cfg.law == "corrected" else "ambient"
    return spectral_limit_law(build_spectral(cfg), alpha, cfg.sigma2, hessian=hessian)


def build_mixture(cfg: ExperimentConfig) -> tuple[MixtureParams, SignalSpec]:
    _require(cfg, "mog")
    params = MixtureParams.simplex(cfg.K, cfg.d, cfg.separation).canonical()
    r = cfg.r_star or gating_state(params).r_star
    if cfg.theta_preset:
        signal = SignalSpec.block_preset(cfg.K, r)
    else:
        if len(cfg.theta) != cfg.K * (r + 1):
            raise ConfigError(f"theta must have K (r_star + 1) = {cfg.K * (r + 1)} entries")
        signal = SignalSpec.from_vector(cfg.theta, cfg.K, r)
    return params, signal


# ---------------------------------------------------------------- output


def header_lines(cfg: ExperimentConfig, command: str) -> list[str]:
    return [f"# twostage {command}", f"# seed = {cfg.seed}", f"# config_hash = {config_hash(cfg)}"]


def render_csv(comments: list[str], columns: Sequence[str], rows: list[Sequence]) -> str:
    buf = io.StringIO()
    for line in comments:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _emit(text: str, path: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def read_csv_column(path: str, column: str) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or column not in reader.fieldnames:
        raise ConfigError(f"{path} has no '{column}' column")
    return np.array([float(row[column]) for row in reader])


# ---------------------------------------------------------------- commands


def cmd_limit(cfg: ExperimentConfig, out: str) -> int:
    law = build_law(cfg)
    comps = law.components or ((0.0, 0),)
    rows = [(law.constant, w, k, law.mean()) for w, k in comps]
    text = render_csv(header_lines(cfg, "limit"), ("constant", "weight", "dof", "mean"), rows)
    print("\n".join(header_lines(cfg, "limit")))
    print(f"constant = {fmt(law.constant)}")
    for w, k in law.components:
        print(f"weight = {fmt(w)}  dof = {k}")
    print(f"mean = {fmt(law.mean())}")
    _emit(text, out)
    return 0


def cmd_interaction(cfg: ExperimentConfig, out: str) -> int:
    params, signal = build_mixture(cfg)
    mc = InteractionConfig(cfg.n_fisher, cfg.n_proj, cfg.n_eval, cfg.h_rel, cfg.batches, cfg.seed)
    est = interaction_term_mc(params, signal, mc)
    cols = ("K", "d", "separation", "r_star", "value", "se", "se_eval", "se_resample", "h")
    row = (cfg.K, cfg.d, cfg.separation, est.r_star, est.value, est.se, est.se_eval, est.se_resample, est.h)
    print("\n".join(header_lines(cfg, "interaction")))
    print(f"interaction = {fmt(est.value)}  se = {fmt(est.se)}")
    _emit(render_csv(header_lines(cfg, "interaction"), cols, [row]), out)
    return 0


def simulate_csv(cfg: ExperimentConfig) -> tuple[str, object]:
    model = build_experiment(cfg)
    sample = run_two_stage(model, cfg.pretrain_size, cfg.n, cfg.reps, cfg.seed, alpha=cfg.effective_alpha)
    comments = header_lines(cfg, "simulate") + [f"# failures = {sample.failures}"]
    return render_csv(comments, SIMULATE_COLUMNS, sample.rows()), sample


def cmd_simulate(cfg: ExperimentConfig, out: str) -> int:
    text, sample = simulate_csv(cfg)
    print("\n".join(header_lines(cfg, "simulate")))
    print(f"replications = {len(sample)}  failures = {sample.failures}  mean = {fmt(float(sample.values.mean()))}")
    if out:
        _emit(text, out)
    else:
        sys.stdout.write(text)
    return 0


def cmd_compare(cfg: ExperimentConfig, out: str, input_path: str) -> int:
    path = input_path or cfg.input
    if not path:
        raise ConfigError("compare needs --input or input = ... under [output]")
    try:
        values = read_csv_column(path, "excess_scaled")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    rep = compare(values, build_law(cfg), cfg.law_mc, seed=cfg.seed)
    row = rep.as_row()
    print("\n".join(header_lines(cfg, "compare")))
    for key, val in row.items():
        print(f"{key} = {fmt(val)}")
    _emit(render_csv(header_lines(cfg, "compare"), tuple(row), [tuple(row.values())]), out)
    return 0


def cmd_verify(out: str) -> int:
    from .verification import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if out:
        rows = [(r.name, "pass" if r.passed else "fail", r.detail) for r in results]
        _emit(render_csv(["# twostage verify"], ("check", "status", "detail"), rows), out)
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twostage", description="Two-stage pre-training risk experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("model", nargs="?", choices=("spectral", "factor", "mog"), help="must match the config model")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--input", help="empirical CSV for compare")
    p.add_argument("--print-config", action="store_true", help="echo the resolved config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        if args.command == "verify":
            return cmd_verify(args.out or "")
        if not args.config:
            raise ConfigError(f"{args.command} needs --config FILE")
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(seed=args.seed, reps=args.reps)
        if args.model and args.model != cfg.model:
            raise ConfigError(f"command names model '{args.model}' but the config has '{cfg.model}'")
        if args.print_config:
            print(serialize(cfg))
        out = args.out if args.out is not None else cfg.out
        if args.command == "limit":
            return cmd_limit(cfg, out)
        if args.command == "interaction":
            return cmd_interaction(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        return cmd_compare(cfg, out, args.input or "")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TwoStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
