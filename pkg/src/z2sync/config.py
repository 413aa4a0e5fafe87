"""Experiment configuration: defaults < key=value file < Z2SYNC_* env vars < CLI flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "Z2SYNC_"

# execution settings that do not change any result; kept out of embedded configs
RUNTIME_KEYS = ("threads", "out_dir", "config")


class ConfigError(ValueError):
    def __init__(self, parameter: str, message: str, value=None):
        super().__init__(f"{parameter}: {message}")
        self.parameter = parameter
        self.message = message
        self.value = value

    def to_dict(self) -> dict:
        return {"error": self.message, "parameter": self.parameter, "value": self.value}


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).replace(";", ",").split(",") if x.strip()]


def _ints(text) -> list[int]:
    return [int(x) for x in _floats(text)]


@dataclass
class ExperimentConfig:
    d: int = 2
    n: int = 20
    p: float = 0.05
    eta: float = 0.5
    seed: int = 0
    range_L: int = 0
    scale_L: int = 6
    kappa: int = 2
    t: float = 0.5
    sweeps: int = 500
    replicas: int = 2
    reps: int = 1
    p_grid: list = field(default_factory=list)
    eta_grid: list = field(default_factory=list)
    L_grid: list = field(default_factory=list)
    sample_pairs: int = 200_000
    threads: int = 1
    out_dir: str = "."
    goe: bool = False

    _LISTS = {"p_grid": _floats, "eta_grid": _floats, "L_grid": _ints}

    def embedded(self) -> dict:
        """Everything that determines the results (no thread count, no paths)."""
        d = dataclasses.asdict(self)
        for k in RUNTIME_KEYS:
            d.pop(k, None)
        return d

    def effective_range(self) -> int:
        return self.range_L if self.range_L > 0 else 2 * self.scale_L

    def model_params(self, **changes):
        from .model import ModelParams

        kw = dict(d=self.d, n=self.n, p=self.p, eta=self.eta, range_L=self.effective_range(), seed=self.seed)
        kw.update(changes)
        return ModelParams(**kw)

    def validate(self, command: str = "sync") -> "ExperimentConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg, getattr(self, name))

        need(self.d >= 2, "d", "must be an integer >= 2")
        need(self.n >= 1, "n", "must be an integer >= 1")
        need(0.0 < self.p < 0.5, "p", "must lie in the open interval (0, 1/2)")
        need(self.eta >= 0.0, "eta", "must be >= 0")
        need(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        need(self.range_L >= 0, "range_L", "must be >= 1 (or 0 for 2 * scale_L)")
        need(self.scale_L >= 6 and self.scale_L % 6 == 0, "scale_L", "must be a positive multiple of 6")
        need(self.kappa >= 1, "kappa", "must be >= 1")
        need(0.0 <= self.t <= 1.0, "t", "must lie in [0, 1]")
        need(self.sweeps >= 1, "sweeps", "must be >= 1")
        need(self.replicas >= 2, "replicas", "must be >= 2")
        need(self.reps >= 1, "reps", "must be >= 1")
        need(self.sample_pairs >= 2, "sample_pairs", "must be >= 2")
        need(self.threads >= 1, "threads", "must be >= 1")
        for p in self.p_grid:
            need(0.0 < p < 0.5, "p_grid", "every value must lie in (0, 1/2)")
        for e in self.eta_grid:
            need(e >= 0.0, "eta_grid", "every value must be >= 0")
        for L in self.L_grid:
            need(L >= 6 and L % 6 == 0, "L_grid", "every value must be a positive multiple of 6")
        if command in ("sync", "sweep", "diag"):
            need(self.effective_range() >= 2 * self.scale_L, "range_L", "must be >= 2 * scale_L")
            need(2 * self.n + 1 >= 3 * self.scale_L, "n", "box is too small for one block at scale_L")
        return self


def _coerce(name: str, raw):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise ConfigError(name, "unknown configuration key", raw)
    if name in ExperimentConfig._LISTS:
        try:
            return ExperimentConfig._LISTS[name](raw)
        except ValueError:
            raise ConfigError(name, "must be a comma-separated list of numbers", raw) from None
    kind = kinds[name]
    try:
        if kind == "int":
            f = float(raw)
            if f != int(f):
                raise ValueError
            return int(f)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        return str(raw)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {kind}", raw) from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"line {lineno} is not key=value", line)
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    names = {f.name.upper(): f.name for f in fields(ExperimentConfig)}
    out = {}
    for key, val in environ.items():
        if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):] in names:
            out[names[key[len(ENV_PREFIX):]]] = val
    return out


def load_config(file=None, flags: dict | None = None, environ=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    layers = []
    if file:
        layers.append(read_config_file(file))
    layers.append(env_overrides(environ))
    layers.append({k: v for k, v in (flags or {}).items() if v is not None})
    for layer in layers:
        for k, v in layer.items():
            setattr(cfg, k, _coerce(k, v))
    return cfg
