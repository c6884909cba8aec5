"""Run configuration: a strict JSON schema and builders for the domain objects."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError

from .channel import (
    BaseVar,
    BpskPacket,
    ChannelModel,
    ConstantPolicy,
    FadingModel,
    LinkGain,
    Logistic,
    PowerPolicy,
    QuantizedInverse,
    SaturatedInverse,
    TableSuccess,
)
from .model import SystemModel
from .topology import Node, Topology, compute_layers

__all__ = ["RunConfig", "ConfigError", "parse_config", "load_config", "bundled_config", "BUNDLED"]

BUNDLED = ("fig1.json", "fig1_direct.json")


class ConfigError(ValueError):
    """Schema or consistency errors, each prefixed with its location."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Matrix = list[list[float]]


class SystemSection(_Strict):
    A: Matrix
    B: Matrix
    C: Matrix
    W: Matrix
    sigma2: list[PositiveFloat]


class NodeSection(_Strict):
    id: str
    role: Literal["sensor", "relay", "estimator"]
    output: int | None = Field(default=None, ge=0)
    layer: int | None = Field(default=None, ge=0)


class TopologySection(_Strict):
    nodes: list[NodeSection] = []
    edges: list[tuple[str, str]] = []


class ExponentialVar(_Strict):
    name: str
    dist: Literal["exponential"]
    mean: PositiveFloat


class PointVar(_Strict):
    name: str
    dist: Literal["point"]
    value: float = Field(ge=0)


class BpskSection(_Strict):
    family: Literal["bpsk"]
    bits: int = Field(default=4, ge=1)


class LogisticSection(_Strict):
    family: Literal["logistic"]
    slope: PositiveFloat
    midpoint: float


class TableSection(_Strict):
    family: Literal["table"]
    xs: list[float]
    ps: list[float]


Success = Annotated[Union[BpskSection, LogisticSection, TableSection], Field(discriminator="family")]


class LinkSection(_Strict):
    edge: tuple[str, str]
    gain: dict[str, float] = {}
    const: float = Field(default=0.0, ge=0)
    success: Success | None = None


class ChannelsSection(_Strict):
    base_vars: list[Annotated[Union[ExponentialVar, PointVar], Field(discriminator="dist")]]
    links: list[LinkSection]
    success: Success = BpskSection(family="bpsk")


class PolicySection(_Strict):
    family: Literal["constant", "saturated_inverse", "quantized_inverse"]
    u: float | None = Field(default=None, ge=0)
    c: float | None = Field(default=None, ge=0)
    levels: list[PositiveFloat] | None = None
    ref_edge: tuple[str, str] | None = None


class GroupingSection(_Strict):
    target_gain_count: int = Field(ge=1)


class EstimationSection(_Strict):
    taubar: int | None = Field(default=None, ge=0)
    grouping: Literal["full"] | GroupingSection = "full"


class CodesignSection(_Strict):
    gamma_P: PositiveFloat | None = None
    gamma_P_relative: PositiveFloat | None = 1.1  # ceiling as a multiple of the full-power index
    xi: PositiveFloat | None = None
    mu: dict[str, PositiveFloat] = {}
    u_max: PositiveFloat = 10.0
    families: dict[str, Literal["constant", "saturated_inverse", "quantized_inverse"]] = {}
    levels: dict[str, list[PositiveFloat]] = {}


class SimulationSection(_Strict):
    steps: int = Field(default=10_000, ge=1)
    replications: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    correlated_fading: bool = False
    burn_in: float = Field(default=0.1, ge=0, lt=1)
    batches: int = Field(default=1, ge=1)


class RunConfig(_Strict):
    system: SystemSection
    topology: TopologySection
    channels: ChannelsSection
    policies: dict[str, PolicySection]
    estimation: EstimationSection = EstimationSection()
    codesign: CodesignSection = CodesignSection()
    simulation: SimulationSection = SimulationSection()

    def reference_errors(self) -> list[str]:
        """Names used in edges, links and per-node sections that are not topology nodes."""
        ids = {nd.id for nd in self.topology.nodes}
        errs = []
        for i, (a, b) in enumerate(self.topology.edges):
            for x in (a, b):
                if x not in ids:
                    errs.append(f"topology.edges.{i}: unknown node {x!r}")
        edges = {tuple(e) for e in self.topology.edges}
        for i, ln in enumerate(self.channels.links):
            if tuple(ln.edge) not in edges:
                errs.append(f"channels.links.{i}.edge: {ln.edge} is not a topology edge")
        for name, sec in (("policies", self.policies), ("codesign.mu", self.codesign.mu),
                          ("codesign.families", self.codesign.families)):
            for a in sec:
                if a not in ids:
                    errs.append(f"{name}.{a}: unknown node")
        return errs

    # ---- builders -------------------------------------------------------

    def system_model(self) -> SystemModel:
        s = self.system
        return SystemModel(A=s.A, B=s.B, C=s.C, W=s.W, sigma2=s.sigma2)

    def topology_model(self) -> Topology:
        nodes = [Node(nd.id, nd.role, nd.output) for nd in self.topology.nodes]
        declared = {nd.id: nd.layer for nd in self.topology.nodes if nd.layer is not None}
        return compute_layers(nodes, [tuple(e) for e in self.topology.edges], declared or None)

    def channel_model(self) -> ChannelModel:
        bvs = []
        for b in self.channels.base_vars:
            if b.dist == "exponential":
                bvs.append(BaseVar(b.name, "exponential", b.mean))
            else:
                bvs.append(BaseVar(b.name, "point", b.value))
        gains = {tuple(ln.edge): LinkGain(dict(ln.gain), ln.const) for ln in self.channels.links}
        succ = {tuple(ln.edge): _success(ln.success or self.channels.success) for ln in self.channels.links}
        return ChannelModel(FadingModel(tuple(bvs), gains), succ)

    def policy_models(self, ch: ChannelModel) -> dict[str, PowerPolicy]:
        u_max = self.codesign.u_max
        out = {}
        for a, p in self.policies.items():
            ref = tuple(p.ref_edge) if p.ref_edge else None
            if p.family == "constant":
                out[a] = ConstantPolicy(u_max, u_max if p.u is None else p.u)
            elif p.family == "saturated_inverse":
                out[a] = SaturatedInverse(u_max, float("inf") if p.c is None else p.c,
                                          ref or ch.default_ref_edge(a))
            else:
                out[a] = QuantizedInverse(u_max, float("inf") if p.c is None else p.c,
                                          tuple(p.levels or ()), ref or ch.default_ref_edge(a))
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _success(sec):
    if sec.family == "bpsk":
        return BpskPacket(sec.bits)
    if sec.family == "logistic":
        return Logistic(sec.slope, sec.midpoint)
    return TableSuccess(tuple(sec.xs), tuple(sec.ps))


def _format(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        out.append(f"{loc}: {msg}" if loc else msg)
    return out


def parse_config(text: str) -> RunConfig:
    """Validate ``text`` and check that the model objects can be built."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"invalid JSON: {exc}"]) from None
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    errs = cfg.reference_errors()
    for where, build in (("system", cfg.system_model), ("topology", cfg.topology_model),
                         ("channels", cfg.channel_model)):
        try:
            build()
        except (ValueError, KeyError) as exc:
            errs.append(f"{where}: {exc}")
    if not errs:  # consistency checks need every model object
        top, sys_ = cfg.topology_model(), cfg.system_model()
        outputs = sorted(nd.output for nd in top.sensors)
        if outputs != list(range(sys_.n_y)):
            errs.append(f"topology.nodes: sensor outputs {outputs} do not cover the {sys_.n_y} rows of C")
        linked = {tuple(ln.edge) for ln in cfg.channels.links}
        for e in top.edges:
            if e not in linked:
                errs.append(f"channels.links: no gain model for edge {e[0]}->{e[1]}")
        for a in top.transmitters:
            if a not in cfg.policies:
                errs.append(f"policies: missing policy for transmitting node {a!r}")
        try:
            cfg.policy_models(cfg.channel_model())
        except ValueError as exc:
            errs.append(f"policies: {exc}")
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path: str) -> RunConfig:
    """Read a config file; bare names of bundled configs are resolved too."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        if path in BUNDLED:
            return bundled_config(path)
        raise
    return parse_config(text)


def bundled_config(name: str) -> RunConfig:
    text = resources.files("jumpnet").joinpath("configs", name).read_text(encoding="utf-8")
    return parse_config(text)
