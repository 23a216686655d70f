"""Experiment configuration: TOML schema, validation and model assembly."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .kernels import (
    Exponential,
    KernelMatrix,
    PowerLaw,
    SemiSeparableSpec,
    SeparableSpec,
    ZERO,
    assemble_semi_separable,
    assemble_separable,
    criticality_norm,
    sign_expand,
)

_UNITS = {"y": 1.0, "m": 1.0 / 12, "w": 1.0 / 52, "d": 1.0 / 252, "h": 1.0 / (252 * 24), "s": 1.0 / (252 * 24 * 3600)}
_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([ymwdhs])\s*$")


def parse_duration(value) -> float:
    """Years from a number or a string such as ``"1w"`` (1/52) or ``"1d"`` (1/252)."""
    if isinstance(value, bool):
        raise ValueError("duration must be a number or a string like '1d'")
    if isinstance(value, (int, float)):
        return float(value)
    m = _DURATION.match(str(value))
    if not m:
        raise ValueError(f"cannot parse duration {value!r}; use years or e.g. '1w', '1d'")
    return float(m.group(1)) * _UNITS[m.group(2)]


Duration = Union[float, str]
Matrix = Union[float, list[list[float]]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProfileConfig(_Strict):
    family: Literal["power_law", "exponential"] = "power_law"
    alpha: Optional[float] = None
    gamma: Optional[float] = None
    scale: Duration = 1.0
    beta: Optional[float] = None

    @model_validator(mode="after")
    def _required(self):
        _need(self, "alpha", "varphi")
        if self.family == "power_law":
            _need(self, "gamma", "varphi")
        else:
            _need(self, "beta", "varphi")
        return self

    def build(self):
        if self.family == "power_law":
            return PowerLaw(self.alpha, self.gamma, parse_duration(self.scale))
        return Exponential(self.alpha, self.beta)


class FactorConfig(_Strict):
    z: list[float]
    varphi: ProfileConfig


def _need(obj, key: str, where: str):
    if getattr(obj, key) is None:
        raise ValueError(f"missing required key '{where}.{key}'")


class KernelConfig(_Strict):
    """``structure`` picks how the kernel is assembled.

    * ``zero``: no excitation (Poisson flow).
    * ``dense``: ``alpha`` is the full signed matrix.
    * ``strike``: ``alpha`` is per option pair and is copied to every sign pair
      with weight ``share``.
    * ``separable`` / ``semi_separable``: rank-one factors ``z z^T varphi`` with
      calendar scaling, then split over signs with ``share``.
    """

    structure: Literal["zero", "dense", "strike", "separable", "semi_separable"]
    family: Literal["power_law", "exponential"] = "power_law"
    alpha: Optional[Matrix] = None
    gamma: Optional[Matrix] = None
    scale: Duration = 1.0
    beta: Optional[Matrix] = None
    share: float = 0.5
    z: Optional[list[float]] = None
    varphi: Optional[ProfileConfig] = None
    factors: Optional[list[FactorConfig]] = None
    at_criticality: bool = False

    @model_validator(mode="after")
    def _required(self):
        where = "model.kernel"
        if self.structure in ("dense", "strike"):
            _need(self, "alpha", where)
            _need(self, "gamma" if self.family == "power_law" else "beta", where)
        elif self.structure == "separable":
            _need(self, "z", where)
            _need(self, "varphi", where)
        elif self.structure == "semi_separable":
            _need(self, "factors", where)
        if not self.share > 0:
            raise ValueError("model.kernel.share must be positive")
        return self


class ModelConfig(_Strict):
    strikes: list[Union[str, float]]
    maturities: list[Duration]
    tick: float = 1e-4
    sigma0: Union[float, list[list[float]]] = 0.0
    mu: Union[float, list[float]] = 1.0
    kernel: KernelConfig

    @field_validator("strikes")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("model.strikes must not be empty")
        return v

    @field_validator("maturities")
    @classmethod
    def _maturities(cls, v):
        if not v:
            raise ValueError("model.maturities must not be empty")
        for x in v:
            parse_duration(x)
        return v


class BetasConfig(_Strict):
    beta_mu_plus: float = 1.0
    beta_mu_minus: float = 1.0
    beta_phi_plus: float = 1.0
    beta_phi_minus: float = 1.0
    beta_wing: float = 0.9
    beta_B: float = 1.0
    beta_Btilde: float = 1.2
    beta_RR_25: float = 1.0
    beta_RR_10: float = 1.0
    beta_SS: float = 1.0


class PerturbConfig(_Strict):
    row: int
    col: int
    factor: float = 1.01


class NoArbConfig(_Strict):
    mode: Literal["three_point", "five_point"] = "three_point"
    build: bool = True
    betas: BetasConfig = Field(default_factory=BetasConfig)
    rtol: float = 1e-9
    perturb: Optional[PerturbConfig] = None


class SimulationConfig(_Strict):
    horizon: Duration = 1.0
    method: Literal["thinning", "cluster"] = "thinning"
    n_grid: int = Field(101, ge=2)


class RoughParamsConfig(_Strict):
    C: float = 1.0
    theta: float
    lambda_volvol: float
    V0: float = 0.0
    speed: float = 1.0
    rho: float = 0.0


class ScalingConfig(_Strict):
    limit: Literal["factor", "general"] = "factor"
    alpha: float = 0.75
    T: Duration = 1.0
    n_grid: int = Field(101, ge=2)
    horizon: float = 1.0
    steps: int = Field(1000, ge=10)
    n_paths: int = Field(20, ge=1)
    factors: list[RoughParamsConfig] = Field(default_factory=list)
    vectors: Optional[list[list[float]]] = None
    T_sequence: list[float] = Field(default_factory=lambda: [1e4, 1e6, 1e8])
    kappa: float = 1.0


class StrategyConfig(_Strict):
    kind: Literal["constant", "inventory_linear"] = "constant"
    c: float = 0.0
    c0: float = 0.0
    c1: float = 0.0
    traded: Optional[list[Union[int, str]]] = None


class BacktestConfig(_Strict):
    lambda_scale: Optional[list[float]] = None
    lambda_atm: Optional[float] = None
    lambda_decay: float = 0.0
    alpha_fill: float = -0.7
    beta_fill: float = 10.0
    vega: Union[float, list[float]] = 1.0
    strategy: StrategyConfig = Field(default_factory=StrategyConfig)
    horizon: Duration = "1d"
    seeds: int = Field(200, ge=1)
    n_grid: int = Field(101, ge=2)
    feedback: bool = False
    compare_poisson: bool = True

    @model_validator(mode="after")
    def _rates(self):
        if self.lambda_scale is None and self.lambda_atm is None:
            raise ValueError("missing required key 'backtest.lambda_scale' (or 'backtest.lambda_atm')")
        return self


class ImpactConfig(_Strict):
    alpha: float = 0.75
    T: Optional[Duration] = None
    seeds: int = Field(200, ge=100)
    n_grid: int = Field(101, ge=2)
    xi_bp: float = 5.0
    C0: Union[float, list[float]] = 1.0
    compare_poisson: bool = True


class OutputConfig(_Strict):
    directory: str = "out"
    files: Optional[list[str]] = None


class ExperimentConfig(_Strict):
    seed: int = 0
    model: ModelConfig
    noarb: Optional[NoArbConfig] = None
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    scaling: Optional[ScalingConfig] = None
    backtest: Optional[BacktestConfig] = None
    impact: Optional[ImpactConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}" if loc else msg)
    return "\n".join(lines)


def load_config(source: Union[str, Path, dict]) -> ExperimentConfig:
    """Parse and validate; every problem surfaces as ConfigError naming the key."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = tomli.loads(Path(source).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {source}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {source}: {e}") from e
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def to_plain(cfg: ExperimentConfig) -> dict[str, Any]:
    return cfg.model_dump(mode="json", exclude_none=True)


# ---------------------------------------------------------------------------
# assembly


def _matrix(value, n: int, key: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full((n, n), float(arr))
    if arr.shape != (n, n):
        raise ConfigError(f"{key} must be a scalar or a {n}x{n} matrix, got shape {arr.shape}")
    return arr


def _entries(kc: KernelConfig, n: int) -> tuple:
    alpha = _matrix(kc.alpha, n, "model.kernel.alpha")
    if kc.family == "power_law":
        gamma = _matrix(kc.gamma, n, "model.kernel.gamma")
        scale = parse_duration(kc.scale)
        make = lambda i, j: PowerLaw(alpha[i, j], gamma[i, j], scale) if alpha[i, j] else ZERO
    else:
        beta = _matrix(kc.beta, n, "model.kernel.beta")
        make = lambda i, j: Exponential(alpha[i, j], beta[i, j]) if alpha[i, j] else ZERO
    return tuple(tuple(make(i, j) for j in range(n)) for i in range(n))


def build_kernel(cfg: ExperimentConfig, grid) -> KernelMatrix:
    kc = cfg.model.kernel
    d = grid.dim
    n_opt = grid.n_options
    labels = tuple(str(c) for c in grid.components)
    if kc.structure == "zero":
        return KernelMatrix.zeros(d, labels)
    if kc.structure == "dense":
        return KernelMatrix(_entries(kc, d), labels)
    if kc.structure == "strike":
        opt = KernelMatrix(_entries(kc, n_opt), tuple(grid.option_labels()))
        return sign_expand(opt, kc.share).relabel(labels)
    taus = tuple(grid.maturities)
    if kc.structure == "separable":
        if len(kc.z) != grid.n_strikes:
            raise ConfigError(f"model.kernel.z needs {grid.n_strikes} entries, got {len(kc.z)}")
        spec = SeparableSpec(np.asarray(kc.z, float), kc.varphi.build(), taus)
        if kc.at_criticality:
            spec = spec.at_criticality()
        opt = assemble_separable(spec)
    else:
        for f in kc.factors:
            if len(f.z) != grid.n_strikes:
                raise ConfigError(f"model.kernel.factors[].z needs {grid.n_strikes} entries")
        spec = SemiSeparableSpec(tuple((np.asarray(f.z, float), f.varphi.build()) for f in kc.factors), taus)
        if kc.at_criticality:
            # put the first factor exactly on the critical mass
            c = criticality_norm(spec, 0) / spec.factors[0][1].mass()
            spec = SemiSeparableSpec(tuple((z, v.scaled(c)) for z, v in spec.factors), taus, spec.tol)
        opt = assemble_semi_separable(spec)
    return sign_expand(opt, kc.share).relabel(labels)


def build_grid(cfg: ExperimentConfig):
    from .surface import SurfaceGrid

    m = cfg.model
    return SurfaceGrid(
        tuple(m.strikes), tuple(parse_duration(x) for x in m.maturities), tick=m.tick, sigma0=np.asarray(m.sigma0, float)
    )


def build_model(cfg: ExperimentConfig):
    from .surface import SurfaceModel

    grid = build_grid(cfg)
    kernel = build_kernel(cfg, grid)
    mu = np.asarray(cfg.model.mu, float)
    return SurfaceModel(grid, kernel, mu)
