"""Finite Markov chain of measurement-delivery histories.

A state records, for every sensor ``s`` and look-back depth ``d`` in
``0..taubar``, the sub-vector ``[a_{s,0}[k-d], a_{s,1}[k-d+1], ..., a_{s,d}[k]]``
where ``a_{s,delta}[t] = 1`` iff the sample ``y_s[t-delta]`` is accepted at
``t``. Sub-vectors hold at most one 1 (duplicates are discarded) and no 1 at
a delay beyond ``dbar``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .model import stacked_index
from .topology import (
    Formula,
    Lit,
    Topology,
    acceptance_event,
    assignment_weights,
    collect_literals,
    conj,
    not_yet_event,
    shift,
    truth_table,
)

__all__ = [
    "ThetaLayout",
    "ThetaState",
    "enumerate_states",
    "state_count",
    "MarkovChain",
    "ErgodicityReport",
    "ChainBuilder",
    "transition_matrix",
    "stationary_distribution",
    "reduce_and_check",
    "availability",
    "NonErgodicChainError",
    "require_ergodic",
]


class NonErgodicChainError(ValueError):
    def __init__(self, report: "ErgodicityReport"):
        super().__init__(f"chain is not ergodic: {report}")
        self.report = report


@dataclass(frozen=True)
class ThetaLayout:
    """Bit positions of a state vector (sensor-major, then depth, then delay)."""

    n_y: int
    dbar: int
    taubar: int

    def __post_init__(self):
        if self.n_y < 1 or self.dbar < 0 or self.taubar < 0:
            raise ValueError("need n_y >= 1, dbar >= 0, taubar >= 0")

    @property
    def per_sensor(self) -> int:
        return (self.taubar + 1) * (self.taubar + 2) // 2

    @property
    def n_theta(self) -> int:
        return self.per_sensor * self.n_y

    def bit(self, s: int, d: int, delta: int) -> int:
        """Index of ``a_{s,delta}[k-d+delta]`` within the state vector."""
        if not (0 <= delta <= d <= self.taubar):
            raise IndexError((s, d, delta))
        return s * self.per_sensor + d * (d + 1) // 2 + delta

    def subvector(self, bits: np.ndarray, s: int, d: int) -> np.ndarray:
        start = self.bit(s, d, 0)
        return bits[start:start + d + 1]


@dataclass(frozen=True)
class ThetaState:
    bits: tuple[int, ...]
    layout: ThetaLayout

    def sub(self, s: int, d: int) -> tuple[int, ...]:
        return tuple(self.layout.subvector(np.array(self.bits), s, d))

    def __str__(self):
        return "".join(map(str, self.bits))


def state_count(n_y: int, dbar: int, taubar: int) -> int:
    """Closed-form number of states.

    Equals ``((dbar+2)! (dbar+2)^(taubar-dbar))^n_y`` for ``taubar >= dbar``
    and ``((taubar+2)!)^n_y`` otherwise.
    """
    m = min(dbar, taubar)
    per = math.factorial(m + 2) * (dbar + 2) ** max(taubar - dbar, 0)
    return per ** n_y


def _subvector_options(d: int, dbar: int) -> list[tuple[int, ...]]:
    opts = [tuple(int(i == pos) for i in range(d + 1)) for pos in range(min(d, dbar) + 1)]
    opts.append((0,) * (d + 1))
    return sorted(opts)


def enumerate_states(n_y: int, dbar: int, taubar: int, max_states: int = 100_000) -> np.ndarray:
    """All admissible state bit-vectors, lexicographically ordered.

    Returns a ``uint8`` array of shape ``(count, n_theta)``.
    """
    layout = ThetaLayout(n_y, dbar, taubar)
    count = state_count(n_y, dbar, taubar)
    if count > max_states:
        raise ValueError(f"{count} states exceed the cap of {max_states}")
    blocks = [_subvector_options(d, dbar) for _ in range(n_y) for d in range(taubar + 1)]
    states = np.array([sum(combo, ()) for combo in itertools.product(*blocks)], dtype=np.uint8)
    assert states.shape == (count, layout.n_theta)
    return states


def availability(state: np.ndarray, layout: ThetaLayout) -> np.ndarray:
    """Diagonal of the availability matrix as a boolean vector.

    Entry ``(s, d)`` (stacked, sensor-major) is the last bit of sub-vector
    ``(s, d)``. Delays beyond ``taubar`` are not tracked and read as 0.
    """
    state = np.asarray(state)
    out = np.zeros(layout.n_y * (layout.dbar + 1), dtype=bool)
    for s in range(layout.n_y):
        for d in range(min(layout.dbar, layout.taubar) + 1):
            out[stacked_index(s, d, layout.dbar)] = bool(state[layout.bit(s, d, d)])
    return out


@dataclass(frozen=True)
class ErgodicityReport:
    irreducible: bool
    aperiodic: bool
    period: int
    n_closed_classes: int
    removed: tuple[int, ...]

    @property
    def ergodic(self) -> bool:
        return self.irreducible and self.aperiodic

    def to_dict(self) -> dict:
        return {
            "irreducible": self.irreducible,
            "aperiodic": self.aperiodic,
            "period": self.period,
            "n_closed_classes": self.n_closed_classes,
            "removed": list(self.removed),
            "ergodic": self.ergodic,
        }


@dataclass
class MarkovChain:
    """Transition structure over the states in ``states``.

    ``origin[i]`` is the index of state ``i`` in the full enumeration, so a
    reduced chain can be mapped back.
    """

    layout: ThetaLayout
    states: np.ndarray
    Lambda: np.ndarray
    reachable: np.ndarray
    origin: np.ndarray
    marginal: np.ndarray | None = None
    report: ErgodicityReport | None = None
    _pi: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @cached_property
    def psi(self) -> np.ndarray:
        """Availability diagonals, shape ``(size, n_y*(dbar+1))``."""
        return np.array([availability(st, self.layout) for st in self.states])

    @property
    def zero_gain(self) -> np.ndarray:
        return ~self.psi.any(axis=1)

    @property
    def pi(self) -> np.ndarray:
        if self.report is not None and not self.report.ergodic:
            raise NonErgodicChainError(self.report)
        if self._pi is None:
            self._pi = stationary_distribution(self.Lambda, self.reachable)
        return self._pi

    def index_of(self, bits: Sequence[int]) -> int:
        bits = np.asarray(bits, dtype=np.uint8)
        hits = np.flatnonzero((self.states == bits).all(axis=1))
        if hits.size != 1:
            raise KeyError(f"state {bits} not in chain")
        return int(hits[0])

    def to_dict(self) -> dict:
        S = self.size
        try:
            pi = self.pi.tolist()
        except ValueError:  # not ergodic, or not reduced to a closed class
            pi = None
        return {
            "layout": {"n_y": self.layout.n_y, "dbar": self.layout.dbar, "taubar": self.layout.taubar},
            "states": self.states.astype(int).tolist(),
            "origin": self.origin.astype(int).tolist(),
            "Lambda": {"shape": [S, S], "data": self.Lambda.ravel().tolist()},
            "pi": pi,
            "reachable": self.reachable.astype(bool).tolist(),
            "ergodicity": None if self.report is None else self.report.to_dict(),
        }


def _state_formula(layout: ThetaLayout, top: Topology, bits: np.ndarray) -> Formula:
    """Event that the history ending at the reference slot 0 equals ``bits``."""
    parts = []
    for s in range(layout.n_y):
        for d in range(layout.taubar + 1):
            sub = layout.subvector(bits, s, d)
            ones = np.flatnonzero(sub)
            if ones.size:
                parts.append(acceptance_event(top, s, int(ones[0]), send_time=-d).formula)
            else:
                parts.append(not_yet_event(top, s, d, send_time=-d).formula)
    return conj(parts)


class ChainBuilder:
    """Caches the per-state events and their truth tables for one topology.

    Only the per-literal success probabilities change between calls, so
    rebuilding the transition matrix is a single weighted matrix product.
    """

    def __init__(self, top: Topology, taubar: int | None = None, max_literals: int = 24,
                 max_states: int = 100_000, chunk: int = 1 << 16):
        n_y = len(top.sensors)
        taubar = top.dbar if taubar is None else taubar
        self.top = top
        self.layout = ThetaLayout(n_y, top.dbar, taubar)
        self.states = enumerate_states(n_y, top.dbar, taubar, max_states)
        now = [_state_formula(self.layout, top, st) for st in self.states]
        memo: dict = {}
        prev = [shift(f, -1, memo) for f in now]
        self.formulas_now = now
        self.formulas_prev = prev
        self.literals: list[Lit] = collect_literals(now + prev)
        m = len(self.literals)
        if m > max_literals:
            raise ValueError(f"{m} timed literals in the chain window exceed the cap of {max_literals}")
        self.chunk = chunk
        self._tables = None
        if (1 << m) <= chunk:
            self._tables = (truth_table(now, self.literals), truth_table(prev, self.literals))

    def _blocks(self):
        size = 1 << len(self.literals)
        if self._tables is not None:
            yield 0, size, self._tables
            return
        for start in range(0, size, self.chunk):
            stop = min(size, start + self.chunk)
            yield start, stop, (truth_table(self.formulas_now, self.literals, start, stop),
                                truth_table(self.formulas_prev, self.literals, start, stop))

    def joint(self, link_probs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(joint, prev_marginal, now_marginal)`` with ``joint[i, j] = Pr{prev=i, now=j}``."""
        S = len(self.states)
        joint = np.zeros((S, S))
        m_prev = np.zeros(S)
        m_now = np.zeros(S)
        for start, stop, (t_now, t_prev) in self._blocks():
            w = assignment_weights(self.literals, link_probs, start, stop)
            wp = t_prev * w
            joint += wp @ t_now.T
            m_prev += wp.sum(axis=1)
            m_now += t_now @ w
        return joint, m_prev, m_now

    def build(self, link_probs) -> MarkovChain:
        joint, m_prev, m_now = self.joint(link_probs)
        reachable = m_prev > 0
        Lam = np.zeros_like(joint)
        Lam[reachable] = joint[reachable] / m_prev[reachable, None]
        return MarkovChain(
            layout=self.layout, states=self.states.copy(), Lambda=Lam,
            reachable=reachable, origin=np.arange(len(self.states)), marginal=m_now,
        )


def transition_matrix(top: Topology, link_probs, taubar: int | None = None) -> MarkovChain:
    """Build the chain for ``top`` with per-link success probabilities ``link_probs``."""
    return ChainBuilder(top, taubar).build(link_probs)


def stationary_distribution(Lambda: np.ndarray, reachable: np.ndarray | None = None,
                            power_steps: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Stationary row vector of ``Lambda`` restricted to ``reachable`` states."""
    Lambda = np.asarray(Lambda, dtype=float)
    S = Lambda.shape[0]
    keep = np.ones(S, dtype=bool) if reachable is None else np.asarray(reachable, dtype=bool)
    sub = Lambda[np.ix_(keep, keep)]
    n = sub.shape[0]
    if n == 0:
        raise ValueError("no reachable states")
    # the reachable set must be closed for the restriction to be stochastic
    if np.abs(sub.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("reachable states do not form a closed set; reduce the chain first")
    lhs = np.vstack([sub.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    p = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    for _ in range(power_steps):
        p = p @ sub
    p = np.clip(p, 0.0, None)
    p /= p.sum()
    resid = np.abs(p @ sub - p).max()
    if resid > tol:
        raise ValueError(f"stationary residual {resid:.3g} above {tol:g}; chain may not be ergodic")
    out = np.zeros(S)
    out[keep] = p
    return out


def _period(adj: np.ndarray) -> int:
    """Period of an irreducible chain from BFS levels."""
    g = csr_matrix(adj)
    order, pred = breadth_first_order(g, 0, directed=True, return_predecessors=True)
    level = np.full(adj.shape[0], -1)
    level[0] = 0
    for v in order[1:]:
        level[v] = level[pred[v]] + 1
    rows, cols = np.nonzero(adj)
    g_ = 0
    for u, v in zip(rows, cols):
        g_ = math.gcd(g_, int(level[u] + 1 - level[v]))
    return abs(g_) if g_ else 0


def reduce_and_check(chain: MarkovChain, atol: float = 0.0) -> tuple[MarkovChain, ErgodicityReport]:
    """Keep the unique closed communicating class and check aperiodicity.

    States with zero probability, or transient ones, are removed. If more
    than one closed class exists the chain is reported as reducible and all
    states with positive probability are kept.
    """
    live = np.flatnonzero(chain.reachable)
    adj = chain.Lambda[np.ix_(live, live)] > atol
    n_comp, labels = connected_components(csr_matrix(adj), directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = labels == c
        if not adj[np.ix_(members, ~members)].any():
            closed.append(c)
    if len(closed) == 1:
        keep_local = labels == closed[0]
        irreducible = True
    else:
        keep_local = np.ones(live.size, dtype=bool)
        irreducible = False
    kept = live[keep_local]
    sub_adj = adj[np.ix_(keep_local, keep_local)]
    if irreducible and np.any(np.diag(sub_adj)):
        period = 1
    elif irreducible:
        period = _period(sub_adj)
    else:
        period = 0
    removed = tuple(int(i) for i in np.setdiff1d(np.arange(chain.size), kept))
    report = ErgodicityReport(
        irreducible=irreducible, aperiodic=period == 1, period=period,
        n_closed_classes=len(closed), removed=tuple(int(chain.origin[i]) for i in removed),
    )
    Lam = chain.Lambda[np.ix_(kept, kept)]
    reduced = MarkovChain(
        layout=chain.layout,
        states=chain.states[kept],
        Lambda=Lam,
        reachable=np.ones(kept.size, dtype=bool),
        origin=chain.origin[kept],
        marginal=None if chain.marginal is None else chain.marginal[kept],
        report=report,
    )
    return reduced, report


def require_ergodic(chain: MarkovChain) -> MarkovChain:
    """Reduced chain, or ``NonErgodicChainError`` carrying the report."""
    reduced, report = reduce_and_check(chain)
    if not report.ergodic:
        raise NonErgodicChainError(report)
    return reduced
