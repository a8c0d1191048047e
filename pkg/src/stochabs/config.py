"""Project configuration: one JSON document per study, validated on load."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .certificate import Certificate
from .model import BoxUnion, GainFn, SystemSpec, grid_points

Box = list[tuple[float, float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Lipschitz(_Strict):
    L_x: float = Field(ge=0)
    L_u: float = Field(ge=0)
    Z: float = Field(ge=0)


class SystemBlock(_Strict):
    drift: Literal["linear", "pendulum"]
    n: int = Field(ge=1)
    m: int = Field(ge=1)
    p: int = Field(ge=1)
    params: dict[str, float] = Field(default_factory=dict)
    A: Optional[list[list[float]]] = None
    B: Optional[list[list[float]]] = None
    sigmas: list[list[list[float]]]
    lipschitz: Lipschitz
    domain: list[Box]
    input_set: list[Box]
    input_grid: Optional[float] = Field(default=None, gt=0)
    inputs: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _dims(self) -> SystemBlock:
        n, m = self.n, self.m
        if len(self.sigmas) != self.p or any(
                len(s) != n or any(len(r) != n for r in s) for s in self.sigmas):
            raise ValueError("sigmas must be p matrices of size n x n")
        if self.drift == "linear":
            if self.A is None or self.B is None:
                raise ValueError("linear drift needs A and B")
            if len(self.A) != n or any(len(r) != n for r in self.A):
                raise ValueError("A must be n x n")
            if len(self.B) != n or any(len(r) != m for r in self.B):
                raise ValueError("B must be n x m")
        if any(len(b) != n for b in self.domain) or any(len(b) != m for b in self.input_set):
            raise ValueError("domain / input_set boxes must match n / m")
        if (self.input_grid is None) == (self.inputs is None):
            raise ValueError("give exactly one of input_grid or inputs")
        if self.inputs is not None and any(len(u) != m for u in self.inputs):
            raise ValueError("inputs must have length m")
        return self

    def spec(self) -> SystemSpec:
        params = dict(self.params)
        if self.drift == "linear":
            params.update(A=np.array(self.A), B=np.array(self.B))
        return SystemSpec(self.n, self.m, self.p, self.drift, params, np.array(self.sigmas),
                          self.lipschitz.L_x, self.lipschitz.L_u, self.lipschitz.Z,
                          BoxUnion(tuple(tuple(b) for b in self.input_set)),
                          BoxUnion(tuple(tuple(b) for b in self.domain)))

    def input_list(self) -> np.ndarray:
        if self.inputs is not None:
            return np.array(self.inputs, dtype=float)
        return grid_points(BoxUnion(tuple(tuple(b) for b in self.input_set)), self.input_grid)


class Gain(_Strict):
    c: float = Field(ge=0)
    p: float = Field(gt=0)


class CertificateBlock(_Strict):
    form: Literal["scaled-quadratic", "plain-quadratic"]
    P: list[list[float]]
    q: int = Field(ge=1)
    kappa_hat: Optional[float] = Field(default=None, gt=0)
    kappa_tilde: Optional[float] = Field(default=None, gt=0)
    kappa: Optional[float] = Field(default=None, gt=0)
    rho: Optional[Gain] = None
    # "lmi" and "sampled" verify the certificate; "assume" takes literature
    # gains as given and only reports the sampled check.
    verify: Literal["lmi", "sampled", "assume"] = "sampled"
    # "paper" reproduces the published gamma_hat constants; "sound" is exact
    # for the infinity norm (see certificate.gamma_hat).
    gamma_hat: Literal["paper", "sound"] = "paper"
    samples: int = Field(default=100000, ge=1)
    seed: int = 0

    def certificate(self) -> Certificate:
        rho = GainFn(self.rho.c, self.rho.p) if self.rho else None
        return Certificate(np.array(self.P), self.q, self.form, self.kappa_tilde,
                           self.kappa_hat, self.kappa, rho)


class PlanBlock(_Strict):
    eps: float = Field(gt=0)
    tau: float = Field(gt=0)
    route: Literal["thm51", "thm53"]
    eta: Optional[float] = Field(default=None, gt=0)
    mu: Optional[float] = Field(default=None, ge=0)
    h_route: Literal["linear", "quadratic", "general"]
    # Keep the sup||u|| term of the h bounds (see README, "h routes").
    input_term: bool = True
    quad_steps: int = Field(default=256, ge=16)
    substeps: Optional[int] = Field(default=None, ge=1)


class SpecBlock(_Strict):
    template: Literal["SAFE", "REACH", "REACH_STAY", "REACH_STAY_WHILE", "SEQ_THEN_STAY"]
    sets: dict[str, list[Box]]
    args: list[str]
    shrink: Optional[list[float]] = None
    initial_states: list[list[float]]

    @model_validator(mode="after")
    def _names(self) -> SpecBlock:
        missing = [a for a in self.args if a not in self.sets]
        if missing:
            raise ValueError(f"spec args reference unknown sets {missing}")
        return self


class SimBlock(_Strict):
    dt: Optional[float] = Field(default=None, gt=0)
    runs: int = Field(ge=1)
    horizon: float = Field(gt=0)
    master_seed: int = Field(default=0, ge=0)
    record_stride: int = Field(default=1, ge=1)
    report_sets: list[str]


class BoundsBlock(_Strict):
    epsilon_pointwise: list[float] = Field(default_factory=list)
    epsilon_finite: Optional[float] = Field(default=None, gt=0)
    N: Optional[int] = Field(default=None, ge=1)
    finite_region: Optional[list[Box]] = None
    alpha_convention: Literal["paper", "vertex"] = "paper"
    epsilon_infinite: Optional[float] = Field(default=None, gt=0)
    phi_x0: Optional[float] = Field(default=None, ge=0)
    eps_infinite: Optional[float] = Field(default=None, ge=0)


class ProjectConfig(_Strict):
    name: str
    system: SystemBlock
    certificate: CertificateBlock
    plan: PlanBlock
    spec: SpecBlock
    sim: SimBlock
    bounds: BoundsBlock = Field(default_factory=BoundsBlock)

    @model_validator(mode="after")
    def _cross(self) -> ProjectConfig:
        n = self.system.n
        if len(self.certificate.P) != n or any(len(r) != n for r in self.certificate.P):
            raise ValueError("certificate P must be n x n")
        for name, boxes in self.spec.sets.items():
            if any(len(b) != n for b in boxes):
                raise ValueError(f"set {name} must have dimension n")
        if any(len(x) != n for x in self.spec.initial_states):
            raise ValueError("initial states must have dimension n")
        unknown = [s for s in self.sim.report_sets if s not in self.spec.sets]
        if unknown:
            raise ValueError(f"sim.report_sets references unknown sets {unknown}")
        return self

    def box(self, name: str) -> BoxUnion:
        return BoxUnion(tuple(tuple(b) for b in self.spec.sets[name]))


def load_config(path) -> ProjectConfig:
    return ProjectConfig.model_validate_json(Path(path).read_text())


def dump_config(cfg: ProjectConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json", exclude_none=True), indent=2)


def bundled(name: str) -> Path:
    """Path of a bundled example config ("pendulum" or "dcmotor")."""
    ref = resources.files("stochabs") / "configs" / f"{name}.json"
    return Path(str(ref))
