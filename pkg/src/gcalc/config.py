"""Experiment configuration: a versioned JSON schema validated before any compute."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cylinder import CylinderConfig
from .gpde import SolverConfig
from .model import GCalcError, TimePartition, VolatilityBand
from .payoff import PayoffExpr, parse_payoff

SCHEMA_VERSION = 1
CHECKS = ("thm33", "lemma32", "cor34", "cor49", "martingale")


class ConfigError(GCalcError):
    """Invalid configuration; ``errors`` lists (field path, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in errors))


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BandSpec(_Model):
    sigma_min: float = 1.0
    sigma_max: float = 2.0

    @model_validator(mode="after")
    def _band(self):
        VolatilityBand(self.sigma_min, self.sigma_max)
        return self


class SolverSpec(_Model):
    nx: int = 401
    cfl_factor: float = 0.45
    boundary: Literal["linear", "clamped"] = "linear"
    richardson: bool = True
    half_width: float | None = None

    @model_validator(mode="after")
    def _solver(self):
        self.build()
        return self

    def build(self) -> SolverConfig:
        return SolverConfig(self.half_width, self.nx, self.cfl_factor, self.boundary, self.richardson)


class CylinderSpec(_Model):
    stage_points: int = 61
    stage_width: float = 6.0
    n_max: int = 3
    max_slices: int = 65
    stage_refine: int = 4
    slab_budget_mb: float = 256.0


class SimSpec(_Model):
    n_paths: int = Field(100_000, ge=2)
    n_steps: int = Field(500, ge=1)
    increments: Literal["rademacher", "gaussian"] = "rademacher"
    block_size: int = Field(4096, ge=1)


class ControlSpec(_Model):
    n_constants: int = Field(5, ge=2)
    schedule_intervals: int = Field(4, ge=0, le=8)
    feedback: bool = True


class ExponentSpec(_Model):
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 1.5
    delta: float = 1.0
    cor49_alpha: float = 1.2


class ConditionalSpec(_Model):
    stage: int = Field(1, ge=0)
    points: list[list[float]] = Field(default_factory=list)


class OutputSpec(_Model):
    dir: str | None = None
    format: Literal["json", "csv"] = "json"


class ExperimentConfig(_Model):
    schema_version: Literal[1] = SCHEMA_VERSION
    band: BandSpec = BandSpec()
    partition: list[float] = Field(default_factory=lambda: [0.0, 1.0])
    payoffs: list[str] = Field(default_factory=lambda: ["B(1)^2"], min_length=1)
    other_payoff: str = "0"
    solver: SolverSpec = SolverSpec()
    cylinder: CylinderSpec = CylinderSpec()
    sim: SimSpec = SimSpec()
    controls: ControlSpec = ControlSpec()
    exponents: ExponentSpec = ExponentSpec()
    checks: list[Literal["thm33", "lemma32", "cor34", "cor49", "martingale"]] = Field(
        default_factory=lambda: ["thm33"]
    )
    martingale_pairs: list[tuple[float, float]] = Field(default_factory=lambda: [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0)])
    conditional: ConditionalSpec = ConditionalSpec()
    seed: int = Field(20100101, ge=0, lt=2**64)
    output: OutputSpec = OutputSpec()

    @field_validator("partition")
    @classmethod
    def _partition(cls, v):
        TimePartition(tuple(v))
        return v

    @model_validator(mode="after")
    def _cross(self):
        part = self.time_partition()
        errors = []
        for i, text in enumerate(self.payoffs):
            try:
                p = parse_payoff(text, part)
            except GCalcError as e:
                errors.append((f"payoffs.{i}", str(e)))
                continue
            if p.n > self.cylinder.n_max:
                errors.append((f"payoffs.{i}", f"payoff spans {p.n} increments; the limit is n_max = {self.cylinder.n_max}"))
        try:
            parse_payoff(self.other_payoff, part)
        except GCalcError as e:
            errors.append(("other_payoff", str(e)))
        try:
            self.cylinder_config()
        except GCalcError as e:
            errors.append(("cylinder", str(e)))
        dt = part.horizon / self.sim.n_steps
        for t in part.times:
            if abs(t / dt - round(t / dt)) > 1e-6:
                errors.append(("sim.n_steps", f"path grid dt = {dt:g} does not refine partition time {t:g}"))
                break
        errors += self._exponent_errors()
        if "cor34" in self.checks and not errors:
            from .decomp import _range_check

            for i, p in enumerate(self.payoff_exprs()):
                try:
                    _range_check(p, self.volatility_band(), 0.0, 1.0)
                except GCalcError as e:
                    errors.append((f"payoffs.{i}", f"cor34: {e}"))
        if self.conditional.stage > part.n:
            errors.append(("conditional.stage", f"stage {self.conditional.stage} exceeds the {part.n} increments"))
        for j, pt in enumerate(self.conditional.points):
            if len(pt) != self.conditional.stage:
                errors.append((f"conditional.points.{j}", f"needs {self.conditional.stage} observed increments"))
        if errors:
            raise ValueError("; ".join(f"[{loc}] {msg}" for loc, msg in errors))
        return self

    def _exponent_errors(self) -> list[tuple[str, str]]:
        e = self.exponents
        out = []
        checks = set(self.checks)
        if "thm33" in checks:
            beta = (e.alpha + e.delta) / e.alpha if e.alpha > 0 else 0.0
            if e.alpha < 1:
                out.append(("exponents.alpha", "thm33: alpha >= 1 required"))
            if not e.delta > 0:
                out.append(("exponents.delta", "thm33: delta > 0 required"))
            if not (1 < e.gamma < beta and e.gamma <= 2):
                out.append(("exponents.gamma", f"thm33: 1 < gamma < (alpha+delta)/alpha = {beta:g} and gamma <= 2 required"))
        if "lemma32" in checks and not (1 < e.gamma < e.beta and e.gamma <= 2):
            msg = "lemma32: gamma <= 2 required" if e.gamma > 2 else f"lemma32: 1 < gamma < beta = {e.beta:g} required"
            out.append(("exponents.gamma", msg))
        if "cor34" in checks and not (1 < e.gamma <= 2):
            out.append(("exponents.gamma", "cor34: 1 < gamma <= 2 required"))
        if "cor49" in checks:
            if not 1 < e.cor49_alpha < e.beta:
                out.append(("exponents.cor49_alpha", f"cor49: 1 < alpha < beta = {e.beta:g} required"))
            elif not (1 < e.gamma < e.beta / e.cor49_alpha and e.gamma <= 2):
                out.append(("exponents.gamma", f"cor49: 1 < gamma < beta/alpha = {e.beta / e.cor49_alpha:g} and gamma <= 2 required"))
        return out

    def time_partition(self) -> TimePartition:
        return TimePartition(tuple(self.partition))

    def volatility_band(self) -> VolatilityBand:
        return VolatilityBand(self.band.sigma_min, self.band.sigma_max)

    def cylinder_config(self) -> CylinderConfig:
        c = self.cylinder
        return CylinderConfig(
            solver=self.solver.build(),
            stage_points=c.stage_points,
            stage_width=c.stage_width,
            n_max=c.n_max,
            max_slices=c.max_slices,
            slab_budget_mb=c.slab_budget_mb,
            stage_refine=c.stage_refine,
        )

    def payoff_exprs(self) -> list[PayoffExpr]:
        part = self.time_partition()
        return [parse_payoff(t, part) for t in self.payoffs]

    def other_expr(self) -> PayoffExpr:
        return parse_payoff(self.other_payoff, self.time_partition())


def _loc(loc) -> str:
    return ".".join(str(x) for x in loc) or "config"


def _flatten(err: ValidationError) -> list[tuple[str, str]]:
    out = []
    for e in err.errors():
        msg = e["msg"].removeprefix("Value error, ")
        if msg.startswith("[") and not e["loc"]:
            for part in msg.split("; ["):
                loc, _, rest = part.lstrip("[").partition("] ")
                out.append((loc, rest))
        else:
            out.append((_loc(e["loc"]), msg))
    return out


def load_config(data: dict | str | Path | None = None, **overrides) -> ExperimentConfig:
    """Build a config from a dict, a JSON file path or defaults; raises ConfigError."""
    if data is None:
        raw = {}
    elif isinstance(data, dict):
        raw = dict(data)
    else:
        try:
            raw = json.loads(Path(data).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([("config", f"cannot read {data}: {e}")]) from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_flatten(e)) from None


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
