"""Layered multi-hop topology and Boolean acceptance events over link outcomes.

A measurement sampled by sensor ``s`` at time ``k`` is broadcast by the
sensor at ``k``. A relay broadcasts at ``t`` everything it acquired at
``t - 1`` (one aggregated packet), so each relay hop adds one unit of delay.
The estimator accepts the first copy and discards later duplicates.

Link outcomes are literals ``g[a->l](t)``: the packet broadcast by ``a`` at
absolute slot ``t`` reached ``l``. The same literal shared between events is
a single random variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "Topology",
    "compute_layers",
    "Formula",
    "Const",
    "Lit",
    "Not",
    "And",
    "Or",
    "TRUE",
    "FALSE",
    "conj",
    "disj",
    "neg",
    "PathEvent",
    "acceptance_event",
    "not_yet_event",
    "collect_literals",
    "shift",
    "truth_table",
    "assignment_weights",
    "event_probability",
    "TooManyLiteralsError",
]

ROLES = ("sensor", "relay", "estimator")


@dataclass(frozen=True)
class Node:
    id: str
    role: str
    output: int | None = None  # row of C measured by a sensor

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"node {self.id!r}: unknown role {self.role!r}")
        if self.role == "sensor" and self.output is None:
            raise ValueError(f"sensor {self.id!r} needs an output index")


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[str, str], ...]
    layer: Mapping[str, int]
    unreachable: frozenset[str] = frozenset()

    @property
    def dbar(self) -> int:
        return max(self.layer.values()) - 1

    @property
    def estimator(self) -> str:
        return next(nd.id for nd in self.nodes if nd.role == "estimator")

    @property
    def sensors(self) -> list[Node]:
        """Sensor nodes ordered by output index."""
        return sorted((nd for nd in self.nodes if nd.role == "sensor"), key=lambda nd: nd.output)

    @property
    def transmitters(self) -> list[str]:
        """Nodes with at least one outgoing link, in declaration order."""
        senders = {a for a, _ in self.edges}
        return [nd.id for nd in self.nodes if nd.id in senders]

    def node(self, node_id: str) -> Node:
        for nd in self.nodes:
            if nd.id == node_id:
                return nd
        raise KeyError(node_id)

    def predecessors(self, node_id: str) -> list[str]:
        return [a for a, l in self.edges if l == node_id]

    def out_edges(self, node_id: str) -> list[tuple[str, str]]:
        return [e for e in self.edges if e[0] == node_id]

    def edge_index(self, edge: tuple[str, str]) -> int:
        return self.edges.index(tuple(edge))


def compute_layers(nodes: Sequence[Node], edges: Iterable[tuple[str, str]],
                   declared: Mapping[str, int] | None = None) -> Topology:
    """Assign each node its longest-hop distance to the estimator.

    Raises ``ValueError`` on cycles, unknown nodes, a missing or duplicated
    estimator, sensors with incoming links, relays without a route, or
    links that do not descend strictly in layer. ``declared`` optionally
    carries user-supplied layers, which are checked against the links and
    the computed longest paths.
    """
    nodes = tuple(nodes)
    edges = tuple((str(a), str(l)) for a, l in edges)
    ids = [nd.id for nd in nodes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate node ids")
    estimators = [nd.id for nd in nodes if nd.role == "estimator"]
    if len(estimators) != 1:
        raise ValueError(f"topology needs exactly one estimator node, found {len(estimators)}")
    est = estimators[0]
    roles = {nd.id: nd.role for nd in nodes}
    outputs = [nd.output for nd in nodes if nd.role == "sensor"]
    if sorted(outputs) != list(range(len(outputs))):
        raise ValueError(f"sensor output indices must be 0..{len(outputs) - 1}, got {outputs}")
    if len(set(edges)) != len(edges):
        raise ValueError("duplicate edges")
    for a, l in edges:
        if a not in roles or l not in roles:
            raise ValueError(f"edge ({a}, {l}) references an unknown node")
        if a == l:
            raise ValueError(f"self-loop on {a}")
        if roles[l] == "sensor":
            raise ValueError(f"edge ({a}, {l}) enters sensor {l}; sensors only send their own samples")
        if roles[a] == "estimator":
            raise ValueError(f"edge ({a}, {l}) leaves the estimator")

    succ: dict[str, list[str]] = {i: [] for i in ids}
    for a, l in edges:
        succ[a].append(l)

    # longest path to the estimator; DFS with colouring detects cycles
    layer: dict[str, int] = {}
    state: dict[str, int] = {}

    def visit(v: str) -> int | None:
        if state.get(v) == 1:
            raise ValueError(f"cycle detected through node {v}")
        if v in layer:
            return layer[v]
        if state.get(v) == 2:
            return None
        state[v] = 1
        if v == est:
            best: int | None = 0
        else:
            best = None
            for w in succ[v]:
                lw = visit(w)
                if lw is not None:
                    best = lw + 1 if best is None else max(best, lw + 1)
        state[v] = 2
        if best is not None:
            layer[v] = best
        return best

    for v in ids:
        visit(v)

    unreachable = frozenset(v for v in ids if v not in layer)
    if len(layer) == 1:
        raise ValueError("no node reaches the estimator")
    for v in unreachable:
        if roles[v] == "relay":
            raise ValueError(f"relay {v} has no path to the estimator")
    if declared is not None:
        for a, l in edges:
            if declared[a] <= declared[l]:
                raise ValueError(f"edge ({a}, {l}) does not descend in layer "
                                 f"({declared[a]} -> {declared[l]})")
        for v, lv in layer.items():
            if declared.get(v) != lv:
                raise ValueError(f"node {v}: declared layer {declared.get(v)} but longest path gives {lv}")
    return Topology(nodes=nodes, edges=edges, layer=dict(layer), unreachable=unreachable)


# --------------------------------------------------------------------------
# Boolean formulas

class Formula:
    __slots__ = ()

    def __and__(self, other: "Formula") -> "Formula":
        return conj([self, other])

    def __or__(self, other: "Formula") -> "Formula":
        return disj([self, other])

    def __invert__(self) -> "Formula":
        return neg(self)


@dataclass(frozen=True, eq=True)
class Const(Formula):
    value: bool

    def __str__(self):
        return "1" if self.value else "0"


@dataclass(frozen=True, eq=True)
class Lit(Formula):
    """Outcome of the broadcast on ``edge`` at absolute slot ``t``."""

    edge: tuple[str, str]
    t: int

    def __str__(self):
        return f"g[{self.edge[0]}->{self.edge[1]}](k{self.t:+d})"


@dataclass(frozen=True, eq=True)
class Not(Formula):
    arg: Formula

    def __str__(self):
        return f"~{self.arg}"


@dataclass(frozen=True, eq=True)
class And(Formula):
    args: tuple[Formula, ...]

    def __str__(self):
        return "(" + " & ".join(map(str, self.args)) + ")"


@dataclass(frozen=True, eq=True)
class Or(Formula):
    args: tuple[Formula, ...]

    def __str__(self):
        return "(" + " | ".join(map(str, self.args)) + ")"


TRUE = Const(True)
FALSE = Const(False)


def neg(f: Formula) -> Formula:
    if isinstance(f, Const):
        return FALSE if f.value else TRUE
    if isinstance(f, Not):
        return f.arg
    return Not(f)


def conj(fs: Iterable[Formula]) -> Formula:
    out: list[Formula] = []
    for f in fs:
        if isinstance(f, Const):
            if not f.value:
                return FALSE
            continue
        out.extend(f.args if isinstance(f, And) else (f,))
    if not out:
        return TRUE
    return out[0] if len(out) == 1 else And(tuple(out))


def disj(fs: Iterable[Formula]) -> Formula:
    out: list[Formula] = []
    for f in fs:
        if isinstance(f, Const):
            if f.value:
                return TRUE
            continue
        out.extend(f.args if isinstance(f, Or) else (f,))
    if not out:
        return FALSE
    return out[0] if len(out) == 1 else Or(tuple(out))


def shift(f: Formula, dt: int, _memo: dict | None = None) -> Formula:
    """Move every literal of ``f`` by ``dt`` slots."""
    memo = {} if _memo is None else _memo
    key = id(f)
    if key in memo:
        return memo[key]
    if isinstance(f, Const):
        out = f
    elif isinstance(f, Lit):
        out = Lit(f.edge, f.t + dt)
    elif isinstance(f, Not):
        out = Not(shift(f.arg, dt, memo))
    else:
        out = type(f)(tuple(shift(a, dt, memo) for a in f.args))
    memo[key] = out
    return out


def collect_literals(fs: Iterable[Formula]) -> list[Lit]:
    seen: set[Lit] = set()
    visited: set[int] = set()
    stack = list(fs)
    while stack:
        f = stack.pop()
        if id(f) in visited:
            continue
        visited.add(id(f))
        if isinstance(f, Lit):
            seen.add(f)
        elif isinstance(f, Not):
            stack.append(f.arg)
        elif isinstance(f, (And, Or)):
            stack.extend(f.args)
    return sorted(seen, key=lambda lit: (lit.t, lit.edge))


@dataclass(frozen=True)
class PathEvent:
    """Acceptance of sensor ``sensor``'s sample sent at ``send_time``.

    ``kind == "accept"``: first accepted with delay exactly ``delay``.
    ``kind == "not_yet"``: not accepted with any delay ``<= delay``.
    """

    formula: Formula
    kind: str
    sensor: int
    delay: int
    send_time: int = 0

    def __str__(self):
        tag = "G" if self.kind == "accept" else "notG"
        return f"{tag}[s={self.sensor},d={self.delay}]@{self.send_time:+d}: {self.formula}"


def _reception_builder(top: Topology, sensor_node: str, k: int) -> Callable[[str, int], Formula]:
    memo: dict[tuple[str, int], Formula] = {}

    def transmits(a: str, t: int) -> Formula:
        if a == sensor_node:
            return TRUE if t == k else FALSE
        if top.node(a).role == "sensor":
            return FALSE  # other sensors never carry this measurement
        return received(a, t - 1)

    def received(l: str, t: int) -> Formula:
        key = (l, t)
        if key not in memo:
            if t < k:
                memo[key] = FALSE
            else:
                memo[key] = disj(
                    conj([transmits(a, t), Lit((a, l), t)]) for a in top.predecessors(l)
                )
        return memo[key]

    return received


def _sensor_node(top: Topology, s: int) -> str:
    sensors = top.sensors
    if not 0 <= s < len(sensors):
        raise ValueError(f"sensor index {s} out of range 0..{len(sensors) - 1}")
    return sensors[s].id


def _accept_formulas(top: Topology, s: int, send_time: int) -> list[Formula]:
    node = _sensor_node(top, s)
    if node in top.unreachable:
        return [FALSE] * (top.dbar + 1)
    received = _reception_builder(top, node, send_time)
    est = top.estimator
    arrivals = [received(est, send_time + d) for d in range(top.dbar + 1)]
    return [conj([arrivals[d]] + [neg(arrivals[e]) for e in range(d)])
            for d in range(top.dbar + 1)]


def acceptance_event(top: Topology, s: int, delta: int, send_time: int = 0) -> PathEvent:
    """Event that sensor ``s``'s sample sent at ``send_time`` is accepted with delay ``delta``."""
    if not 0 <= delta <= top.dbar:
        raise ValueError(f"delay {delta} outside 0..{top.dbar}")
    formula = _accept_formulas(top, s, send_time)[delta]
    return PathEvent(formula, "accept", s, delta, send_time)


def not_yet_event(top: Topology, s: int, d: int, send_time: int = 0) -> PathEvent:
    """Event that the sample is not accepted with any delay ``<= d``.

    Depths beyond ``dbar`` are clamped to ``dbar`` (nothing arrives later).
    """
    if d < 0:
        raise ValueError("depth must be nonnegative")
    d_eff = min(d, top.dbar)
    accepts = _accept_formulas(top, s, send_time)[:d_eff + 1]
    return PathEvent(neg(disj(accepts)), "not_yet", s, d, send_time)


# --------------------------------------------------------------------------
# exact probability by enumeration

class TooManyLiteralsError(ValueError):
    pass


def _eval(f: Formula, cols: dict[Lit, np.ndarray], n: int, memo: dict[int, np.ndarray]) -> np.ndarray:
    key = id(f)
    if key in memo:
        return memo[key]
    if isinstance(f, Const):
        out = np.full(n, f.value)
    elif isinstance(f, Lit):
        out = cols[f]
    elif isinstance(f, Not):
        out = ~_eval(f.arg, cols, n, memo)
    elif isinstance(f, And):
        out = reduce(np.logical_and, (_eval(a, cols, n, memo) for a in f.args))
    else:
        out = reduce(np.logical_or, (_eval(a, cols, n, memo) for a in f.args))
    memo[key] = out
    return out


def truth_table(formulas: Sequence[Formula], literals: Sequence[Lit],
                start: int = 0, stop: int | None = None) -> np.ndarray:
    """Evaluate ``formulas`` on assignments ``start..stop-1``.

    Assignment ``a`` sets literal ``v`` to bit ``v`` of ``a``. Returns a
    boolean array of shape ``(len(formulas), stop - start)``.
    """
    m = len(literals)
    stop = (1 << m) if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    cols = {lit: ((idx >> v) & 1).astype(bool) for v, lit in enumerate(literals)}
    memo: dict[int, np.ndarray] = {}
    n = stop - start
    out = np.empty((len(formulas), n), dtype=bool)
    for i, f in enumerate(formulas):
        out[i] = _eval(f, cols, n, memo)
    return out


def _literal_prob(lit: Lit, link_probs) -> float:
    if callable(link_probs):
        p = link_probs(lit.edge, lit.t)
    elif (lit.edge, lit.t) in link_probs:
        p = link_probs[(lit.edge, lit.t)]
    else:
        p = link_probs[lit.edge]
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} for {lit} outside [0, 1]")
    return p


def assignment_weights(literals: Sequence[Lit], link_probs, start: int = 0,
                       stop: int | None = None) -> np.ndarray:
    """Probability of each joint assignment under independent Bernoulli literals."""
    m = len(literals)
    stop = (1 << m) if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    w = np.ones(stop - start)
    for v, lit in enumerate(literals):
        p = _literal_prob(lit, link_probs)
        w *= np.where((idx >> v) & 1, p, 1.0 - p)
    return w


def event_probability(events, link_probs, max_literals: int = 24,
                      chunk: int = 1 << 16) -> float:
    """Exact probability of the conjunction of ``events``.

    ``link_probs`` maps an edge (or an ``(edge, t)`` pair) to its success
    probability, or is a callable ``(edge, t) -> p``. Distinct literals are
    independent; the sum runs over all ``2**m`` joint assignments.
    """
    if isinstance(events, (Formula, PathEvent)):
        events = [events]
    formula = conj(e.formula if isinstance(e, PathEvent) else e for e in events)
    if isinstance(formula, Const):
        return float(formula.value)
    lits = collect_literals([formula])
    m = len(lits)
    if m > max_literals:
        raise TooManyLiteralsError(
            f"{m} distinct timed literals exceed the cap of {max_literals}; "
            "shrink the look-back window or the topology")
    total = 0.0
    size = 1 << m
    for start in range(0, size, chunk):
        stop = min(size, start + chunk)
        tt = truth_table([formula], lits, start, stop)[0]
        total += assignment_weights(lits, link_probs, start, stop)[tt].sum()
    return float(min(1.0, max(0.0, total)))
