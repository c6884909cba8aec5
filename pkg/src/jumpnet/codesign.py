"""Greedy reduction of the network power budget under an estimation ceiling.

Every node starts at full power. At each iteration the budget drops by
``xi`` and each node in turn tries to absorb the whole decrement alone (the
others keep their policies); the candidate whose filter redesign gives the
lowest index is kept while it stays under the ceiling.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .channel import (
    ChannelModel,
    ConstantPolicy,
    PowerPolicy,
    QuantizedInverse,
    SaturatedInverse,
    average_link_prob,
    expected_power,
)
from .markov import ChainBuilder, NonErgodicChainError, require_ergodic
from .model import SystemModel, augment
from .synthesis import Design, reduce_complexity, solve_design
from .topology import Topology

__all__ = [
    "FAMILIES",
    "CodesignConfig",
    "CodesignIterate",
    "CodesignResult",
    "CodesignInfeasible",
    "make_policy",
    "max_success_under_budget",
    "greedy_codesign",
]

log = logging.getLogger(__name__)

FAMILIES = ("constant", "saturated_inverse", "quantized_inverse")


class CodesignInfeasible(RuntimeError):
    """The full-power configuration already violates the ceiling."""


@dataclass(frozen=True)
class CodesignConfig:
    gamma_P: float
    mu: Mapping[str, float]
    u_max: float
    families: Mapping[str, str]
    xi: float | None = None  # default: one hundredth of the initial budget
    levels: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    target_gain_count: int | None = None  # None: one gain per state
    max_iter: int = 10_000
    budget_tol: float = 1e-9

    def __post_init__(self):
        if not self.gamma_P > 0:
            raise ValueError("gamma_P must be positive")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")
        if self.xi is not None and not self.xi > 0:
            raise ValueError("xi must be positive")
        for a, fam in self.families.items():
            if fam not in FAMILIES:
                raise ValueError(f"node {a}: unknown policy family {fam!r}")
            if fam == "quantized_inverse" and a not in self.levels:
                raise ValueError(f"node {a}: quantized_inverse needs power levels")
        for a, m in self.mu.items():
            if not m > 0:
                raise ValueError(f"node {a}: weight must be positive")


def make_policy(ch: ChannelModel, node: str, family: str, u_max: float, param: float,
                levels: tuple[float, ...] = ()) -> PowerPolicy:
    """Policy of ``family`` at parameter value ``param`` (``inf`` = full power)."""
    if family == "constant":
        return ConstantPolicy(u_max, min(u_max, param))
    ref = ch.default_ref_edge(node)
    if family == "saturated_inverse":
        return SaturatedInverse(u_max, param, ref)
    if family == "quantized_inverse":
        return QuantizedInverse(u_max, param, tuple(levels), ref)
    raise ValueError(f"unknown policy family {family!r}")


def max_success_under_budget(ch: ChannelModel, node: str, residual_budget: float, mu_a: float,
                             u_max: float, family: str, levels: tuple[float, ...] = (),
                             tol: float = 1e-9) -> PowerPolicy | None:
    """Policy of a single-parameter family spending exactly ``residual_budget``.

    Within each shipped family the outgoing success rates all grow with the
    parameter, as does the expected power, so the budget equality alone
    pins down the maximiser. Returns ``None`` when the budget cannot be met.
    """
    if residual_budget < 0 or not math.isfinite(residual_budget):
        return None
    target = residual_budget / mu_a
    if family == "constant":
        if target > u_max * (1 + 1e-12):
            return None
        return ConstantPolicy(u_max, min(target, u_max))

    def make(c):
        return make_policy(ch, node, family, u_max, c, levels)

    lo_pol, hi_pol = make(0.0), make(math.inf)
    e_lo, e_hi = expected_power(ch, lo_pol, node), expected_power(ch, hi_pol, node)
    if target < e_lo - tol or target > e_hi + tol:
        return None
    if abs(target - e_hi) <= tol:
        return hi_pol
    if abs(target - e_lo) <= tol:
        return lo_pol

    def g(c):
        return expected_power(ch, make(c), node) - target

    hi = u_max * ch.fading.mean_gain(ch.default_ref_edge(node))
    while g(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            return hi_pol if abs(target - e_hi) <= 1e-6 else None
    c = brentq(g, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    pol = make(c)
    if abs(g(c)) > tol:
        log.warning("node %s: budget met only to %.3g", node, abs(g(c)))
    return pol


@dataclass
class CodesignIterate:
    iteration: int
    J: float
    budget: float  # realised sum of mu_a E{u_a}
    chosen: str | None
    gamma: float
    policies: dict[str, PowerPolicy]
    powers: dict[str, float]
    beta: dict[tuple[str, str], float]
    candidates: dict[str, float]
    gain_count: int
    design: Design | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "J": self.J,
            "budget": self.budget,
            "chosen": self.chosen,
            "gamma": self.gamma,
            "gain_count": self.gain_count,
            "policies": {a: p.to_dict() for a, p in self.policies.items()},
            "powers": self.powers,
            "beta": {f"{a}->{b}": v for (a, b), v in self.beta.items()},
            "candidates": {a: (None if math.isinf(g) else g) for a, g in self.candidates.items()},
        }


@dataclass
class CodesignResult:
    trajectory: list[CodesignIterate]
    stop_reason: str
    xi: float

    @property
    def best(self) -> CodesignIterate:
        return self.trajectory[-1]

    @property
    def initial(self) -> CodesignIterate:
        return self.trajectory[0]

    def to_csv(self) -> str:
        nodes = list(self.trajectory[0].powers)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "J", "budget", "chosen", "gamma"] + [f"Eu_{a}" for a in nodes])
        for it in self.trajectory:
            w.writerow([it.iteration, repr(it.J), repr(it.budget), it.chosen or "", repr(it.gamma)]
                       + [repr(it.powers[a]) for a in nodes])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"xi": self.xi, "stop_reason": self.stop_reason,
                "trajectory": [it.to_dict() for it in self.trajectory]}


class _Evaluator:
    """Link rates, chain and filter design for a set of node policies."""

    def __init__(self, cfg: CodesignConfig, sys: SystemModel, top: Topology, ch: ChannelModel):
        self.cfg, self.top, self.ch = cfg, top, ch
        self.aug = augment(sys, top.dbar)
        self.builder = ChainBuilder(top)
        self._beta_cache: dict = {}

    def beta_of(self, node: str, pol: PowerPolicy) -> dict:
        key = (node, pol)
        if key not in self._beta_cache:
            self._beta_cache[key] = {e: average_link_prob(self.ch, pol, e) for e in self.top.out_edges(node)}
        return self._beta_cache[key]

    def __call__(self, policies: Mapping[str, PowerPolicy]):
        beta = {}
        for a in self.top.transmitters:
            beta.update(self.beta_of(a, policies[a]))
        try:
            chain = require_ergodic(self.builder.build(beta))
        except NonErgodicChainError as exc:
            log.info("candidate rejected: %s", exc)
            return beta, math.inf, None
        design = solve_design(self.aug, chain)
        if not design.report.feasible:
            return beta, math.inf, None
        if self.cfg.target_gain_count is not None:
            try:
                traj = reduce_complexity(self.aug, chain, target_gain_count=self.cfg.target_gain_count)
            except ValueError:
                return beta, math.inf, None
            design = traj[-1].design
        return beta, design.gamma, design


def greedy_codesign(cfg: CodesignConfig, sys: SystemModel, top: Topology,
                    ch: ChannelModel) -> CodesignResult:
    nodes = list(top.transmitters)
    for a in nodes:
        if a not in cfg.families or a not in cfg.mu:
            raise ValueError(f"node {a}: missing policy family or weight")
    evaluate = _Evaluator(cfg, sys, top, ch)

    def powers_of(pols):
        return {a: expected_power(ch, pols[a], a) for a in nodes}

    # Step 1: every node at full power
    pols = {a: make_policy(ch, a, cfg.families[a], cfg.u_max, math.inf, cfg.levels.get(a, ()))
            for a in nodes}
    powers = powers_of(pols)
    J0 = sum(cfg.mu[a] * powers[a] for a in nodes)
    beta, gamma, design = evaluate(pols)
    if not gamma <= cfg.gamma_P:
        raise CodesignInfeasible(
            f"full-power design gives gamma={gamma:.6g}, above the ceiling {cfg.gamma_P:.6g}")
    xi = J0 / 100 if cfg.xi is None else cfg.xi
    traj = [CodesignIterate(0, J0, J0, None, gamma, dict(pols), powers, beta, {},
                            design.schedule.gain_count, design)]
    reason = "max_iter"
    for i in range(1, cfg.max_iter + 1):
        J = J0 - i * xi
        if J < 0:
            reason = "budget exhausted"
            break
        best = None
        cands = {}
        for a in nodes:
            others = sum(cfg.mu[b] * powers[b] for b in nodes if b != a)
            pol = max_success_under_budget(ch, a, J - others, cfg.mu[a], cfg.u_max, cfg.families[a],
                                           cfg.levels.get(a, ()), cfg.budget_tol)
            if pol is None:
                cands[a] = math.inf
                continue
            trial = dict(pols)
            trial[a] = pol
            b_a, g_a, d_a = evaluate(trial)
            cands[a] = g_a
            if best is None or g_a < best[1]:
                best = (a, g_a, trial, b_a, d_a)
        if best is None or not best[1] <= cfg.gamma_P:
            reason = "ceiling reached"
            break
        a, gamma, pols, beta, design = best
        powers = powers_of(pols)
        budget = sum(cfg.mu[b] * powers[b] for b in nodes)
        traj.append(CodesignIterate(i, J, budget, a, gamma, dict(pols), powers, beta, cands,
                                    design.schedule.gain_count, design))
        log.info("iteration %d: J=%.6g node=%s gamma=%.6g", i, J, a, gamma)
    return CodesignResult(traj, reason, xi)
