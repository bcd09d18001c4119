"""Experiment configuration: flat ``key = value`` lines under section headers.

Sections are [model], [sizes], [signal], [mc] and [output]. Booleans are
true/false, vectors are comma-separated, ``#`` starts a comment. Every error
names the offending key and line.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError

MODELS = ("spectral", "factor", "mog")
LAWS = ("closed_form", "corrected", "ambient")


@dataclass(frozen=True)
class _Key:
    section: str
    kind: type  # int, float, str, bool or tuple (of floats)
    default: object


SCHEMA: dict[str, _Key] = {
    # [model]
    "model": _Key("model", str, "factor"),
    "d": _Key("model", int, 6),
    "k": _Key("model", int, 2),
    "K": _Key("model", int, 2),
    "r_star": _Key("model", int, 0),
    "sigma_nu": _Key("model", float, 1.0),
    "sigma2": _Key("model", float, 1.0),
    "loadings": _Key("model", tuple, (2.0, 1.0)),
    "pre_diag": _Key("model", tuple, ()),
    "plus_diag": _Key("model", tuple, ()),
    "law": _Key("model", str, "closed_form"),
    # [sizes]
    "alpha": _Key("sizes", float, 2.0),
    "m": _Key("sizes", int, 0),
    "n": _Key("sizes", int, 4000),
    "reps": _Key("sizes", int, 400),
    # [signal]
    "beta_star": _Key("signal", tuple, (1.0, 1.0)),
    "separation": _Key("signal", float, 2.0),
    "theta_preset": _Key("signal", bool, True),
    "theta": _Key("signal", tuple, ()),
    # [mc]
    "seed": _Key("mc", int, 0),
    "n_fisher": _Key("mc", int, 100_000),
    "n_proj": _Key("mc", int, 1_000_000),
    "n_eval": _Key("mc", int, 1_000_000),
    "batches": _Key("mc", int, 10),
    "h_rel": _Key("mc", float, 1e-3),
    "law_mc": _Key("mc", int, 1_000_000),
    # [output]
    "out": _Key("output", str, ""),
    "input": _Key("output", str, ""),
}
SECTIONS = ("model", "sizes", "signal", "mc", "output")

MIN_N = 2
MIN_REPS = 1
MIN_FISHER = 10_000
MIN_MC = 100


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "factor"
    d: int = 6
    k: int = 2
    K: int = 2
    r_star: int = 0
    sigma_nu: float = 1.0
    sigma2: float = 1.0
    loadings: tuple = (2.0, 1.0)
    pre_diag: tuple = ()
    plus_diag: tuple = ()
    law: str = "closed_form"
    alpha: float = 2.0
    m: int = 0
    n: int = 4000
    reps: int = 400
    beta_star: tuple = (1.0, 1.0)
    separation: float = 2.0
    theta_preset: bool = True
    theta: tuple = ()
    seed: int = 0
    n_fisher: int = 100_000
    n_proj: int = 1_000_000
    n_eval: int = 1_000_000
    batches: int = 10
    h_rel: float = 1e-3
    law_mc: int = 1_000_000
    out: str = ""
    input: str = ""

    @property
    def pretrain_size(self) -> int:
        """Explicit m when set, else round(alpha n)."""
        return self.m if self.m > 0 else int(round(self.alpha * self.n))

    @property
    def effective_alpha(self) -> float:
        return self.pretrain_size / self.n

    def with_overrides(self, **kw) -> "ExperimentConfig":
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        errs = validate(cfg)
        if errs:
            raise ConfigError("; ".join(errs))
        return cfg


def _convert(kind: type, raw: str, key: str):
    raw = raw.strip()
    if kind is bool:
        if raw not in ("true", "false"):
            raise ValueError(f"{key} expects true or false, got {raw!r}")
        return raw == "true"
    if kind is int:
        try:
            return int(raw.replace("_", ""))
        except ValueError:
            raise ValueError(f"{key} expects an integer, got {raw!r}") from None
    if kind is float:
        try:
            val = float(raw)
        except ValueError:
            raise ValueError(f"{key} expects a number, got {raw!r}") from None
        if not np.isfinite(val):
            raise ValueError(f"{key} must be finite")
        return val
    if kind is tuple:
        if raw == "":
            return ()
        try:
            vals = tuple(float(p) for p in raw.split(","))
        except ValueError:
            raise ValueError(f"{key} expects comma-separated numbers, got {raw!r}") from None
        if not all(np.isfinite(vals)):
            raise ValueError(f"{key} entries must be finite")
        return vals
    return raw


def validate(cfg: ExperimentConfig) -> list[str]:
    """Constraint violations as messages naming the key."""
    errs = []
    if cfg.model not in MODELS:
        errs.append(f"model must be one of {', '.join(MODELS)}")
    if cfg.law not in LAWS:
        errs.append(f"law must be one of {', '.join(LAWS)}")
    if cfg.alpha <= 0:
        errs.append("alpha must be positive")
    if cfg.m < 0:
        errs.append("m must be nonnegative (0 means round(alpha n))")
    if cfg.n < MIN_N:
        errs.append(f"n must be at least {MIN_N}")
    if cfg.reps < MIN_REPS:
        errs.append(f"reps must be at least {MIN_REPS}")
    if cfg.seed < 0:
        errs.append("seed must be nonnegative")
    if cfg.sigma_nu < 0:
        errs.append("sigma_nu must be nonnegative")
    if cfg.sigma2 < 0:
        errs.append("sigma2 must be nonnegative")
    if cfg.law_mc < MIN_MC:
        errs.append(f"law_mc must be at least {MIN_MC}")
    if cfg.model in ("spectral", "factor"):
        if not 1 <= cfg.k < cfg.d:
            errs.append("k must satisfy 1 <= k < d")
        elif len(cfg.beta_star) != cfg.k:
            errs.append(f"beta_star must have k = {cfg.k} entries")
    if cfg.model == "factor" and len(cfg.loadings) != cfg.k:
        errs.append(f"loadings must have k = {cfg.k} entries")
    if cfg.model == "spectral":
        for name in ("pre_diag", "plus_diag"):
            vec = getattr(cfg, name)
            if vec and len(vec) != cfg.d:
                errs.append(f"{name} must have d = {cfg.d} entries")
        if bool(cfg.pre_diag) != bool(cfg.plus_diag):
            errs.append("pre_diag and plus_diag must be given together")
    if cfg.model == "mog":
        if not 2 <= cfg.K <= cfg.d:
            errs.append("K must satisfy 2 <= K <= d")
        if cfg.r_star < 0 or cfg.r_star > cfg.K - 1:
            errs.append("r_star must lie in [0, K-1] (0 means automatic)")
        if cfg.separation <= 0:
            errs.append("separation must be positive")
        if cfg.n_fisher < MIN_FISHER:
            errs.append(f"n_fisher must be at least {MIN_FISHER}")
        if cfg.batches < 2:
            errs.append("batches must be at least 2")
        for name in ("n_proj", "n_eval"):
            if getattr(cfg, name) < max(MIN_MC, cfg.batches):
                errs.append(f"{name} must be at least {max(MIN_MC, cfg.batches)}")
        if cfg.h_rel <= 0:
            errs.append("h_rel must be positive")
        if not cfg.theta_preset and not cfg.theta:
            errs.append("theta is required when theta_preset = false")
    if cfg.d < 1:
        errs.append("d must be at least 1")
    return errs


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; all problems are collected and raised together."""
    values: dict = {}
    where: dict[str, int] = {}
    errs: list[str] = []
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                errs.append(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            errs.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = (p.strip() for p in stripped.split("=", 1))
        spec = SCHEMA.get(key)
        if spec is None:
            errs.append(f"line {lineno}: unknown key '{key}'")
            continue
        if section != spec.section:
            errs.append(f"line {lineno}: key '{key}' belongs in [{spec.section}]")
            continue
        if key in values:
            errs.append(f"line {lineno}: duplicate key '{key}' (first set on line {where[key]})")
            continue
        try:
            values[key] = _convert(spec.kind, raw, key)
            where[key] = lineno
        except ValueError as exc:
            errs.append(f"line {lineno}: {exc}")
    if errs:
        raise ConfigError("\n".join(errs))
    cfg = ExperimentConfig(**values)
    problems = validate(cfg)
    if problems:
        lines = []
        for msg in problems:
            key = msg.split()[0]
            loc = f"line {where[key]}: " if key in where else ""
            lines.append(loc + msg)
        raise ConfigError("\n".join(lines))
    return cfg


def _render(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, tuple):
        return ", ".join(repr(float(v)) for v in val)
    return str(val)


def serialize(cfg: ExperimentConfig) -> str:
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        for f in fields(cfg):
            if SCHEMA[f.name].section == sec:
                out.append(f"{f.name} = {_render(getattr(cfg, f.name))}")
        out.append("")
    return "\n".join(out)


def config_hash(cfg: ExperimentConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical serialization."""
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()[:16]


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    return parse_config(text)
