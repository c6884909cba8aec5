"""Fading links, packet-success functions and local power-control policies.

Link gains are nonnegative affine combinations of independent base random
variables (exponential, i.e. Rayleigh power gains, or point masses). A node's
policy maps its outgoing gains to a transmit power in ``[0, u_max]``.
Averages over the fading are computed by tensor Gauss-Legendre quadrature
after mapping every exponential variable through its inverse CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

__all__ = [
    "BaseVar",
    "LinkGain",
    "FadingModel",
    "SuccessFunction",
    "BpskPacket",
    "Logistic",
    "TableSuccess",
    "ChannelModel",
    "PowerPolicy",
    "ConstantPolicy",
    "SaturatedInverse",
    "PiecewiseConstant",
    "QuantizedInverse",
    "success_prob",
    "average_link_prob",
    "expected_power",
    "power_budget",
    "link_prob_table",
    "monte_carlo_link_prob",
    "monte_carlo_power",
    "QuadratureError",
]

Edge = tuple[str, str]


class QuadratureError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# fading

@dataclass(frozen=True)
class BaseVar:
    name: str
    kind: str  # "exponential" or "point"
    value: float  # mean for exponential, location for point

    def __post_init__(self):
        if self.kind not in ("exponential", "point"):
            raise ValueError(f"base variable {self.name!r}: unknown distribution {self.kind!r}")
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"base variable {self.name!r}: parameter must be finite and >= 0")
        if self.kind == "exponential" and self.value == 0:
            raise ValueError(f"base variable {self.name!r}: exponential mean must be positive")

    @property
    def random(self) -> bool:
        return self.kind == "exponential"

    @property
    def mean(self) -> float:
        return self.value

    def ppf(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "point":
            return np.full_like(np.asarray(t, dtype=float), self.value)
        with np.errstate(divide="ignore"):  # t = 1 maps to +inf
            return -self.value * np.log1p(-np.asarray(t))

    def cdf(self, x: float) -> float:
        if self.kind == "point":
            return float(x >= self.value)
        return 0.0 if x <= 0 else -math.expm1(-x / self.value)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, self.value)
        return rng.exponential(self.value, size)


@dataclass(frozen=True)
class LinkGain:
    coeffs: Mapping[str, float]
    const: float = 0.0

    def __post_init__(self):
        if self.const < 0 or any(c < 0 for c in self.coeffs.values()):
            raise ValueError("gain coefficients must be nonnegative")

    def evaluate(self, samples: Mapping[str, np.ndarray]) -> np.ndarray:
        out = self.const
        for name, c in self.coeffs.items():
            out = out + c * samples[name]
        return np.asarray(out, dtype=float)


@dataclass(frozen=True)
class FadingModel:
    base_vars: tuple[BaseVar, ...]
    link_gain: Mapping[Edge, LinkGain]

    def __post_init__(self):
        names = [b.name for b in self.base_vars]
        if len(set(names)) != len(names):
            raise ValueError("duplicate base variable names")
        for edge, g in self.link_gain.items():
            for name in g.coeffs:
                if name not in names:
                    raise ValueError(f"gain of {edge} references unknown base variable {name!r}")

    def var(self, name: str) -> BaseVar:
        return next(b for b in self.base_vars if b.name == name)

    def mean_gain(self, edge: Edge) -> float:
        g = self.link_gain[edge]
        return g.const + sum(c * self.var(n).mean for n, c in g.coeffs.items())

    def vars_of(self, edges: Sequence[Edge]) -> list[str]:
        """Base variables (in declaration order) that the gains of ``edges`` depend on."""
        used = {n for e in edges for n, c in self.link_gain[e].coeffs.items() if c > 0}
        return [b.name for b in self.base_vars if b.name in used]

    def sample(self, rng: np.random.Generator, size) -> dict[str, np.ndarray]:
        return {b.name: b.sample(rng, size) for b in self.base_vars}

    def gains(self, samples: Mapping[str, np.ndarray], edges: Sequence[Edge]) -> dict[Edge, np.ndarray]:
        return {e: self.link_gain[e].evaluate(samples) for e in edges}


# --------------------------------------------------------------------------
# success functions

class SuccessFunction:
    """Packet acceptance probability as a function of ``x = h * u >= 0``."""

    def __call__(self, x):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class BpskPacket(SuccessFunction):
    """``(1 - Q(sqrt(2 x)))**bits``: every bit of a BPSK packet must be decoded."""

    bits: int = 4

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return ndtr(np.sqrt(2.0 * np.maximum(x, 0.0))) ** self.bits

    def to_dict(self):
        return {"family": "bpsk", "bits": self.bits}


@dataclass(frozen=True)
class Logistic(SuccessFunction):
    slope: float
    midpoint: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 / (1.0 + np.exp(-self.slope * (x - self.midpoint)))

    def to_dict(self):
        return {"family": "logistic", "slope": self.slope, "midpoint": self.midpoint}


@dataclass(frozen=True)
class TableSuccess(SuccessFunction):
    """Linear interpolation of a nondecreasing table, flat outside its range."""

    xs: tuple[float, ...]
    ps: tuple[float, ...]

    def __post_init__(self):
        xs, ps = np.asarray(self.xs), np.asarray(self.ps)
        if xs.shape != ps.shape or xs.size < 2:
            raise ValueError("table needs matching xs and ps with at least two points")
        if np.any(np.diff(xs) <= 0) or np.any(np.diff(ps) < 0):
            raise ValueError("table must have increasing xs and nondecreasing ps")
        if ps.min() < 0 or ps.max() > 1:
            raise ValueError("table probabilities must lie in [0, 1]")

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.ps)

    def to_dict(self):
        return {"family": "table", "xs": list(self.xs), "ps": list(self.ps)}


def success_prob(f: SuccessFunction, h, u) -> np.ndarray | float:
    h = np.asarray(h, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(h < 0) or np.any(u < 0):
        raise ValueError("gain and power must be nonnegative")
    out = f(h * u)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# power policies

@dataclass(frozen=True)
class PowerPolicy:
    """Base class; ``ref_edge`` names the outgoing gain used by adaptive families."""

    u_max: float

    family = "abstract"
    param_name = ""

    def __call__(self, gains: Mapping[Edge, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self) -> list[float]:
        """Values of the reference gain where the policy is not smooth."""
        return []

    @property
    def param(self) -> float:
        return getattr(self, self.param_name)

    def with_param(self, value: float) -> "PowerPolicy":
        return replace(self, **{self.param_name: value})

    def to_dict(self) -> dict:
        d = {"family": self.family, "u_max": self.u_max}
        for k in self.__dataclass_fields__:
            if k != "u_max":
                v = getattr(self, k)
                d[k] = list(v) if isinstance(v, tuple) else v
        return d


@dataclass(frozen=True)
class ConstantPolicy(PowerPolicy):
    u: float = 0.0

    family = "constant"
    param_name = "u"

    def __post_init__(self):
        if not 0 <= self.u <= self.u_max:
            raise ValueError(f"constant power {self.u} outside [0, {self.u_max}]")

    def __call__(self, gains):
        shape = np.shape(next(iter(gains.values()))) if gains else ()
        return np.full(shape, float(self.u))


@dataclass(frozen=True)
class SaturatedInverse(PowerPolicy):
    """``u = min(u_max, c / h_ref)``; ``c = inf`` means constant ``u_max``."""

    c: float = 0.0
    ref_edge: Edge | None = None

    family = "saturated_inverse"
    param_name = "c"

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("saturated-inverse level must be >= 0")

    def __call__(self, gains):
        h = np.asarray(gains[self.ref_edge], dtype=float)
        if math.isinf(self.c):
            return np.full(h.shape, float(self.u_max))
        with np.errstate(divide="ignore"):
            u = np.where(h > 0, self.c / np.where(h > 0, h, 1.0), np.inf)
        return np.minimum(self.u_max, u)

    def breakpoints(self):
        if math.isinf(self.c) or self.c == 0:
            return []
        return [self.c / self.u_max]


@dataclass(frozen=True)
class PiecewiseConstant(PowerPolicy):
    """``levels[i]`` is used while ``thresholds[i-1] <= h_ref < thresholds[i]``."""

    thresholds: tuple[float, ...] = ()
    levels: tuple[float, ...] = (0.0,)
    ref_edge: Edge | None = None

    family = "piecewise_constant"

    def __post_init__(self):
        if len(self.levels) != len(self.thresholds) + 1:
            raise ValueError("piecewise-constant policy needs one more level than thresholds")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must increase")
        if min(self.levels) < 0 or max(self.levels) > self.u_max:
            raise ValueError(f"levels must lie in [0, {self.u_max}]")

    def __call__(self, gains):
        h = np.asarray(gains[self.ref_edge], dtype=float)
        idx = np.searchsorted(np.asarray(self.thresholds), h, side="right")
        return np.asarray(self.levels, dtype=float)[idx]

    def breakpoints(self):
        return list(self.thresholds)


@dataclass(frozen=True)
class QuantizedInverse(PowerPolicy):
    """Lowest discrete level meeting ``h_ref * u >= c``, else the highest level.

    A piecewise-constant policy whose thresholds ``c / level`` move with the
    single parameter ``c``.
    """

    c: float = 0.0
    levels: tuple[float, ...] = ()
    ref_edge: Edge | None = None

    family = "quantized_inverse"
    param_name = "c"

    def __post_init__(self):
        lv = np.asarray(self.levels)
        if lv.size == 0 or np.any(np.diff(lv) <= 0) or lv.min() <= 0 or lv.max() > self.u_max:
            raise ValueError(f"levels must be positive, increasing and <= {self.u_max}")
        if self.c < 0:
            raise ValueError("quantized-inverse level must be >= 0")

    def as_piecewise(self) -> PiecewiseConstant:
        lv = tuple(float(x) for x in self.levels)
        if math.isinf(self.c):
            return PiecewiseConstant(self.u_max, (), (lv[-1],), self.ref_edge)
        # h >= c/l_i selects l_i; thresholds ascend as levels descend
        th = tuple(self.c / l for l in reversed(lv[:-1]))
        if self.c == 0:
            return PiecewiseConstant(self.u_max, (), (lv[0],), self.ref_edge)
        return PiecewiseConstant(self.u_max, th, (lv[-1],) + tuple(reversed(lv[:-1])), self.ref_edge)

    def __call__(self, gains):
        return self.as_piecewise()(gains)

    def breakpoints(self):
        return self.as_piecewise().breakpoints()


# --------------------------------------------------------------------------
# averages over the fading

@dataclass(frozen=True)
class ChannelModel:
    """Fading statistics plus the success function of every link."""

    fading: FadingModel
    success: Mapping[Edge, SuccessFunction]

    def f(self, edge: Edge) -> SuccessFunction:
        return self.success[edge]

    def out_edges(self, node: str) -> list[Edge]:
        return [e for e in self.fading.link_gain if e[0] == node]

    def default_ref_edge(self, node: str) -> Edge:
        edges = self.out_edges(node)
        return max(edges, key=self.fading.mean_gain)


def _gl_rule(n: int, cuts: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1] split at ``cuts``."""
    x, w = np.polynomial.legendre.leggauss(n)
    edges = [0.0] + sorted(c for c in set(cuts) if 0.0 < c < 1.0) + [1.0]
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _node_setup(ch: ChannelModel, policy: PowerPolicy, node: str):
    edges = ch.out_edges(node)
    if not edges:
        raise ValueError(f"node {node} has no outgoing links")
    ref = getattr(policy, "ref_edge", None)
    if ref is not None and ref not in edges:
        raise ValueError(f"policy reference link {ref} does not leave node {node}")
    return edges, ch.fading.vars_of(edges)


def _cuts_for(ch: ChannelModel, policy: PowerPolicy, var: str) -> list[float]:
    """Break the quadrature at the policy's kinks when the reference gain is ``c*var + const``."""
    ref = getattr(policy, "ref_edge", None)
    if ref is None:
        return []
    g = ch.fading.link_gain[ref]
    active = {n: c for n, c in g.coeffs.items() if c > 0}
    if list(active) != [var]:
        return []
    bv = ch.fading.var(var)
    cuts = []
    for b in policy.breakpoints():
        x = (b - g.const) / active[var]
        if x > 0:
            cuts.append(bv.cdf(x))
    return cuts


def _integrate(ch: ChannelModel, policy: PowerPolicy, node: str,
               integrand: Callable[[dict[Edge, np.ndarray]], np.ndarray],
               n_nodes: int = 64, mc_samples: int = 1_000_000, seed: int = 0,
               check: bool = True) -> float:
    edges, names = _node_setup(ch, policy, node)
    random_vars = [n for n in names if ch.fading.var(n).random]
    fixed = {b.name: np.array(b.value) for b in ch.fading.base_vars if not b.random}

    def evaluate(n: int) -> float:
        rules = [_gl_rule(n, _cuts_for(ch, policy, v)) for v in random_vars]
        grids = np.meshgrid(*[r[0] for r in rules], indexing="ij") if rules else []
        wgrid = np.ones(())
        for r in rules:
            wgrid = np.multiply.outer(wgrid, r[1])
        samples = dict(fixed)
        for v, g in zip(random_vars, grids):
            samples[v] = ch.fading.var(v).ppf(g)
        gains = ch.fading.gains(samples, edges)
        vals = np.broadcast_to(integrand(gains), np.shape(wgrid))
        return float(np.sum(vals * wgrid))

    if len(random_vars) > 3:
        rng = np.random.default_rng(seed)
        samples = ch.fading.sample(rng, mc_samples)
        return float(np.mean(integrand(ch.fading.gains(samples, edges))))
    value = evaluate(n_nodes)
    if check and random_vars:
        coarse = evaluate(n_nodes // 2)
        if not abs(value - coarse) <= 1e-4 * max(1.0, abs(value)):
            raise QuadratureError(
                f"quadrature did not converge for node {node} "
                f"({coarse:.6g} with {n_nodes // 2} nodes vs {value:.6g} with {n_nodes})")
    return value


def average_link_prob(ch: ChannelModel, policy: PowerPolicy, edge: Edge, **kw) -> float:
    """Mean success probability of ``edge`` when its sender follows ``policy``."""
    f = ch.f(edge)

    def integrand(gains):
        return f(gains[edge] * policy(gains))

    return min(1.0, max(0.0, _integrate(ch, policy, edge[0], integrand, **kw)))


def expected_power(ch: ChannelModel, policy: PowerPolicy, node: str, **kw) -> float:
    if isinstance(policy, ConstantPolicy):
        return float(policy.u)
    val = _integrate(ch, policy, node, lambda gains: policy(gains), **kw)
    return min(policy.u_max, max(0.0, val))


def power_budget(ch: ChannelModel, policies: Mapping[str, PowerPolicy],
                 mu: Mapping[str, float], nodes: Sequence[str] | None = None) -> float:
    """Weighted sum of expected powers over the transmitting ``nodes``."""
    nodes = list(mu) if nodes is None else list(nodes)
    total = 0.0
    for a in nodes:
        if a not in policies:
            raise ValueError(f"no power policy for node {a}")
        if a not in mu:
            raise ValueError(f"no weight for node {a}")
        total += mu[a] * expected_power(ch, policies[a], a)
    return total


def link_prob_table(ch: ChannelModel, policies: Mapping[str, PowerPolicy],
                    edges: Sequence[Edge]) -> dict[Edge, float]:
    out = {}
    for e in edges:
        if e[0] not in policies:
            raise ValueError(f"no power policy for node {e[0]}")
        out[e] = average_link_prob(ch, policies[e[0]], e)
    return out


def _oracle_samples(ch: ChannelModel, edges, n: int, seed: int, method: str):
    if method == "random":
        rng = np.random.default_rng(seed)
        samples = ch.fading.sample(rng, n)
    elif method == "sobol":
        names = [b.name for b in ch.fading.base_vars if b.random]
        m = max(1, math.ceil(math.log2(n)))
        u = qmc.Sobol(len(names), scramble=True, seed=seed).random_base2(m)
        samples = {b.name: np.full(u.shape[0], b.value) for b in ch.fading.base_vars}
        for i, name in enumerate(names):
            samples[name] = ch.fading.var(name).ppf(u[:, i])
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return ch.fading.gains(samples, edges)


def _mc(vals: np.ndarray) -> tuple[float, float]:
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


def monte_carlo_link_prob(ch: ChannelModel, policy: PowerPolicy, edge: Edge,
                          n: int = 1_000_000, seed: int = 0,
                          method: str = "sobol") -> tuple[float, float]:
    """Sampling estimate of the mean link success.

    ``method="sobol"`` uses a scrambled Sobol sequence (``2**ceil(log2 n)``
    points); ``"random"`` is plain Monte Carlo. The second value is the
    i.i.d. standard error, which overstates the Sobol error.
    """
    gains = _oracle_samples(ch, ch.out_edges(edge[0]), n, seed, method)
    return _mc(ch.f(edge)(gains[edge] * policy(gains)))


def monte_carlo_power(ch: ChannelModel, policy: PowerPolicy, node: str,
                      n: int = 1_000_000, seed: int = 0,
                      method: str = "sobol") -> tuple[float, float]:
    gains = _oracle_samples(ch, ch.out_edges(node), n, seed, method)
    size = next(iter(gains.values())).shape
    return _mc(np.broadcast_to(policy(gains), size))
