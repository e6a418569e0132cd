"""Experiment configuration: flat ``key = value`` text with ``#`` comments.

Keys are lower_snake_case; unknown keys, malformed values and violated
constraints raise :class:`ConfigError` before any computation starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from crf_lab.elliptic import PRESSURE_MAX_ITER, PRESSURE_TOL, YAMABE_MAX_ITER, YAMABE_TOL
from crf_lab.errors import ConfigError
from crf_lab.flow import PRESSURE_FORMS, FlowSettings, einstein_stub
from crf_lab.grid import GridSpec

EXPERIMENTS = ("verify", "flow", "twin")
SCHEMES = ("rk4", "half-step")
CURVATURE_MODELS = ("levi-civita", "einstein-stub")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "flow"
    resolution: int = 16
    resolutions: tuple[int, ...] = (16, 32)
    dim: int = 3
    period: float = 1.0
    s0: float = -1.0
    final_time: float = 0.1
    dt: float = 1e-3
    seed: int = 1
    perturbation: float = 0.0
    scheme_a: str = "rk4"
    scheme_b: str = "rk4"
    output_dir: str = "crf_output"
    output_every: int = 10
    monitor_every: int = 5
    warp_strength: float = 0.5
    noise: float = 0.01
    curvature_model: str = "levi-civita"
    identical_pair: bool = False
    self_test: bool = False
    pressure_tol: float = PRESSURE_TOL
    pressure_max_iter: int = PRESSURE_MAX_ITER
    yamabe_tol: float = YAMABE_TOL
    yamabe_max_iter: int = YAMABE_MAX_ITER
    constraint_ceiling: float = 1e-4
    cfl_coefficient: float = 0.6
    reproject_every: int = 0
    pressure_form: str = "compatible"

    @property
    def grid(self) -> GridSpec:
        return GridSpec.cube(self.resolution, self.dim, self.period)

    @property
    def steps(self) -> int:
        return int(round(self.final_time / self.dt))

    def flow_settings(self) -> FlowSettings:
        return FlowSettings(
            pressure_tol=self.pressure_tol,
            pressure_max_iter=self.pressure_max_iter,
            yamabe_tol=self.yamabe_tol,
            yamabe_max_iter=self.yamabe_max_iter,
            constraint_ceiling=self.constraint_ceiling,
            cfl_coefficient=self.cfl_coefficient,
            reproject_every=self.reproject_every,
            pressure_form=self.pressure_form,
            ricci_hook=einstein_stub if self.curvature_model == "einstein-stub" else None,
        )

    def replace(self, **kw) -> "ExperimentConfig":
        return validate(dataclasses.replace(self, **kw))


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines into typed values (no validation of ranges)."""
    values = {}
    for num, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {num}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {num}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {num}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {num}: empty value for {key!r}")
        values[key] = _convert(key, raw)
    return values


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(ok: bool, msg: str):
        if not ok:
            raise ConfigError(msg)

    need(cfg.experiment in EXPERIMENTS, f"experiment must be one of {EXPERIMENTS}")
    need(cfg.dim >= 3, "dim must be >= 3")
    need(cfg.resolution >= 8, "resolution must be >= 8")
    need(len(cfg.resolutions) >= 2 and min(cfg.resolutions) >= 8, "resolutions needs two or more entries >= 8")
    need(list(cfg.resolutions) == sorted(set(cfg.resolutions)), "resolutions must be strictly increasing")
    need(cfg.period > 0, "period must be positive")
    need(cfg.s0 < 0, "s0 must be negative")
    need(cfg.final_time >= 0, "final_time must be non-negative")
    need(cfg.dt > 0, "dt must be positive")
    if cfg.final_time > 0:
        need(abs(cfg.steps * cfg.dt - cfg.final_time) <= 1e-9 * cfg.final_time, "final_time must be a multiple of dt")
    h = cfg.period / cfg.resolution
    need(cfg.cfl_coefficient > 0, "cfl_coefficient must be positive")
    need(
        cfg.dt <= cfg.cfl_coefficient * h * h * (1 + 1e-12),
        f"dt={cfg.dt:g} exceeds cfl_coefficient * dx^2 = {cfg.cfl_coefficient * h * h:g}",
    )
    need(cfg.perturbation >= 0, "perturbation must be non-negative")
    need(cfg.scheme_a in SCHEMES and cfg.scheme_b in SCHEMES, f"schemes must be among {SCHEMES}")
    need(cfg.output_every >= 1 and cfg.monitor_every >= 1, "output_every and monitor_every must be >= 1")
    need(cfg.warp_strength >= 0 and cfg.noise >= 0, "warp_strength and noise must be non-negative")
    need(cfg.curvature_model in CURVATURE_MODELS, f"curvature_model must be one of {CURVATURE_MODELS}")
    need(cfg.pressure_tol > 0 and cfg.yamabe_tol > 0, "tolerances must be positive")
    need(cfg.pressure_max_iter > 0 and cfg.yamabe_max_iter > 0, "iteration caps must be positive")
    need(cfg.constraint_ceiling > 0, "constraint_ceiling must be positive")
    need(cfg.reproject_every >= 0, "reproject_every must be non-negative")
    need(cfg.pressure_form in PRESSURE_FORMS, f"pressure_form must be one of {PRESSURE_FORMS}")
    return cfg


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_config(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return validate(ExperimentConfig(**values))
