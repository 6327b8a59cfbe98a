import json
import math
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import DEFAULT_CAPS, DEFAULT_CFL, DEFAULT_KERNEL_DT, SCHEMA_VERSION

CHECK_NAMES = (
    "mass_bracket",
    "on_diag_upper",
    "on_diag_lower",
    "gaussian_envelope",
    "mean_value",
    "doubling",
    "seed_sensitivity",
    "lambda0",
    "w_monotonicity",
    "log_sobolev",
    "sobolev",
    "f_lower_bound",
)

MODEL_KINDS = ("exact_sphere", "warped_sphere", "flat_torus")


def finite_or_none(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def dump_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)


class CheckReport(BaseModel):
    """Outcome of one bound / inequality verification."""
    model_config = ConfigDict(populate_by_name=True)

    name: str
    samples: int = 0
    ratio_min: Optional[float] = None
    ratio_max: Optional[float] = None
    fitted_constants: Dict[str, Optional[float]] = Field(default_factory=dict)
    passed: bool = Field(default=False, alias="pass")
    margin: Optional[float] = None
    notes: List[str] = Field(default_factory=list)
    control: bool = False
    rows: List[Dict[str, Any]] = Field(default_factory=list, exclude=True)

    @field_validator("ratio_min", "ratio_max", "margin", mode="before")
    @classmethod
    def _finite(cls, value):
        return finite_or_none(value)

    @field_validator("fitted_constants", mode="before")
    @classmethod
    def _finite_constants(cls, value):
        return {key: finite_or_none(val) for key, val in (value or {}).items()}

    def to_json(self) -> str:
        return dump_json(self.model_dump(by_alias=True))


class LimitReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    tau_list: List[float]
    s_ref: float = 1.0
    residual_seq: List[float] = Field(default_factory=list)
    W_seq: List[float] = Field(default_factory=list)
    W_next_seq: List[float] = Field(default_factory=list)
    W_gap_seq: List[float] = Field(default_factory=list)
    f_variance_seq: List[float] = Field(default_factory=list)
    radius_defect_seq: List[float] = Field(default_factory=list)
    rate_constant: Optional[float] = None
    limit_max_R: Optional[float] = None
    nonflat: bool = False
    verdict: Literal["pass", "fail"] = "fail"
    notes: List[str] = Field(default_factory=list)
    control: bool = False

    @field_validator("rate_constant", "limit_max_R", mode="before")
    @classmethod
    def _finite(cls, value):
        return finite_or_none(value)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> str:
        return dump_json(self.model_dump(by_alias=True))


def check_caps(value: Dict[str, float]) -> Dict[str, float]:
    for key, cap in value.items():
        if key not in DEFAULT_CAPS:
            raise ValueError(f"unknown cap '{key}'")
        if not cap > 0:
            raise ValueError(f"cap '{key}' must be positive")
    return value


class ModelSpec(BaseModel):
    kind: Literal["exact_sphere", "warped_sphere", "flat_torus"]
    n: int = 2
    M: int = 64
    r0: float = 2.0
    T0: float = 1.0
    sides: List[float] = Field(default_factory=list)
    amplitude: float = 0.0
    mode: int = 2

    @model_validator(mode="after")
    def _check_shape(self):
        if self.kind == "flat_torus" and len(self.sides) != self.n:
            raise ValueError(f"flat_torus needs {self.n} sides")
        if self.n < 1 or self.M < 2:
            raise ValueError("n and M must be positive")
        return self


class FlowSpec(BaseModel):
    t_start: float = -1.0
    t_end: float = 0.0
    snapshots: int = 10
    cfl: float = DEFAULT_CFL
    kappa_scales: List[float] = Field(default_factory=list)
    doubling_pairs: List[List[float]] = Field(default_factory=lambda: [[0.0, 1.0]])
    doubling_times: List[List[float]] = Field(default_factory=list)
    caps: Dict[str, float] = Field(default_factory=dict)

    @field_validator("caps")
    @classmethod
    def _positive(cls, value):
        return check_caps(value)


class KernelSpec(BaseModel):
    source: Union[float, List[float]] = 0.0
    l: float = -1.0
    t_list: List[float] = Field(default_factory=lambda: [0.0])
    dt: float = DEFAULT_KERNEL_DT
    seed_eps: Optional[float] = None
    method: Literal["auto", "solver", "oracle"] = "auto"


class CheckSpec(BaseModel):
    name: str
    caps: Dict[str, float] = Field(default_factory=dict)
    params: Dict[str, Any] = Field(default_factory=dict)
    control: bool = False

    @field_validator("name")
    @classmethod
    def _known(cls, value):
        if value not in CHECK_NAMES:
            raise ValueError(f"unknown check '{value}'")
        return value

    @field_validator("caps")
    @classmethod
    def _positive(cls, value):
        return check_caps(value)


class LimitSpec(BaseModel):
    tau_list: List[float]
    s_ref: float = 1.0
    control: bool = False
    torus_side: float = 40.0
    dt: Optional[float] = None
    caps: Dict[str, float] = Field(default_factory=dict)

    @field_validator("caps")
    @classmethod
    def _positive(cls, value):
        return check_caps(value)

    @field_validator("dt")
    @classmethod
    def _positive_dt(cls, value):
        if value is not None and not value > 0:
            raise ValueError("dt must be positive")
        return value


class Scenario(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    schema_version: str = Field(alias="schema")
    name: str
    model: ModelSpec
    flow: FlowSpec = Field(default_factory=FlowSpec)
    kernel: Optional[KernelSpec] = None
    checks: List[CheckSpec] = Field(default_factory=list)
    limit: Optional[LimitSpec] = None
    seed: int = 0
    output: Optional[str] = None

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, value):
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema '{value}', expected '{SCHEMA_VERSION}'")
        return value

    def stage_requested(self, stage: str) -> bool:
        if stage == "kernel":
            return self.kernel is not None
        if stage == "checks":
            return bool(self.checks)
        if stage == "limit":
            return self.limit is not None
        return True
