import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpnet.topology import (
    FALSE,
    And,
    Const,
    Lit,
    Node,
    Not,
    Or,
    TooManyLiteralsError,
    acceptance_event,
    collect_literals,
    compute_layers,
    conj,
    event_probability,
    neg,
    not_yet_event,
    truth_table,
)

FIG1_NODES = [Node("N1", "sensor", 0), Node("N2", "sensor", 1), Node("N3", "relay"), Node("N4", "estimator")]
FIG1_EDGES = [("N1", "N4"), ("N1", "N3"), ("N2", "N3"), ("N2", "N4"), ("N3", "N4")]


def fig1_top():
    return compute_layers(FIG1_NODES, FIG1_EDGES)


# ---- independent oracles ---------------------------------------------------

def evaluate(f, assign):
    if isinstance(f, Const):
        return f.value
    if isinstance(f, Lit):
        return assign[f]
    if isinstance(f, Not):
        return not evaluate(f.arg, assign)
    if isinstance(f, And):
        return all(evaluate(a, assign) for a in f.args)
    if isinstance(f, Or):
        return any(evaluate(a, assign) for a in f.args)
    raise TypeError(f)


def brute_probability(f, probs):
    lits = collect_literals([f])
    total = 0.0
    for bits in itertools.product([False, True], repeat=len(lits)):
        assign = dict(zip(lits, bits))
        if evaluate(f, assign):
            total += np.prod([probs[l.edge] if b else 1 - probs[l.edge] for l, b in assign.items()])
    return total


def forward(top, sensor, ok, horizon):
    """Slots at which the estimator holds the sample, by explicit forwarding.

    ``ok(edge, t)`` gives the link outcome; relays resend at t+1 whatever
    they got at t.
    """
    est = top.estimator
    holding = {sensor: {0}}
    arrivals = set()
    for t in range(horizon):
        senders = [a for a, ts in holding.items() if t in ts]
        for a in senders:
            for e in top.out_edges(a):
                if ok(e, t):
                    if e[1] == est:
                        arrivals.add(t)
                    else:
                        holding.setdefault(e[1], set()).add(t + 1)
    return arrivals


# ---- layers ----------------------------------------------------------------

def test_fig1_layers():
    top = fig1_top()
    assert dict(top.layer) == {"N1": 2, "N2": 2, "N3": 1, "N4": 0}
    assert top.dbar == 1


def test_single_edge():
    top = compute_layers([Node("S", "sensor", 0), Node("E", "estimator")], [("S", "E")])
    assert dict(top.layer) == {"S": 1, "E": 0} and top.dbar == 0


def longest_path(edges, src, dst):
    best = -1
    stack = [(src, 0)]
    while stack:
        v, d = stack.pop()
        if v == dst:
            best = max(best, d)
        for a, b in edges:
            if a == v:
                stack.append((b, d + 1))
    return best


def test_diamond_against_path_enumeration():
    nodes = [Node("S", "sensor", 0), Node("R1", "relay"), Node("R2", "relay"), Node("E", "estimator")]
    edges = [("S", "R1"), ("S", "R2"), ("R1", "E"), ("R2", "E")]
    top = compute_layers(nodes, edges)
    for nd in nodes:
        assert top.layer[nd.id] == longest_path(edges, nd.id, "E")
    assert top.layer["R1"] == top.layer["R2"] == 1 and top.dbar == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**20))
def test_random_dag_layers_are_longest_paths(seed):
    rng = np.random.default_rng(seed)
    n_rel = int(rng.integers(0, 4))
    order = ["E"] + [f"R{i}" for i in range(n_rel)] + ["S0", "S1"]
    edges = set()
    for i, v in enumerate(order[1:], start=1):
        targets = [u for u in order[:i] if not u.startswith("S")]
        edges.add((v, targets[int(rng.integers(0, len(targets)))]))  # guarantees a route
        for j in range(i):
            if order[j].startswith("S"):
                continue
            if rng.random() < 0.4:
                edges.add((v, order[j]))
    edges = sorted(e for e in edges if not e[1].startswith("S"))
    nodes = [Node("E", "estimator")] + [Node(f"R{i}", "relay") for i in range(n_rel)] + \
        [Node("S0", "sensor", 0), Node("S1", "sensor", 1)]
    top = compute_layers(nodes, edges)
    for a, l in edges:
        assert top.layer[a] > top.layer[l]
    for nd in nodes:
        assert top.layer[nd.id] == longest_path(edges, nd.id, "E")


def test_layer_errors():
    S, R, E = Node("S", "sensor", 0), Node("R", "relay"), Node("E", "estimator")
    with pytest.raises(ValueError, match="cycle"):
        compute_layers([S, Node("R1", "relay"), Node("R2", "relay"), E],
                       [("S", "R1"), ("R1", "R2"), ("R2", "R1"), ("R2", "E")])
    with pytest.raises(ValueError, match="estimator"):
        compute_layers([S], [])
    with pytest.raises(ValueError, match="enters sensor"):
        compute_layers([S, Node("T", "sensor", 1), E], [("S", "T"), ("T", "E")])
    with pytest.raises(ValueError, match="no path"):
        compute_layers([S, R, E], [("S", "E")])
    # a declared layer assignment whose edge does not descend
    with pytest.raises(ValueError, match="descend"):
        compute_layers([S, R, E], [("S", "R"), ("R", "E")], declared={"S": 1, "R": 1, "E": 0})
    with pytest.raises(ValueError, match="declared layer"):
        compute_layers([S, R, E], [("S", "R"), ("R", "E"), ("S", "E")], declared={"S": 3, "R": 1, "E": 0})


# ---- events ----------------------------------------------------------------

def equivalent(f, g):
    lits = collect_literals([f, g])
    if not lits:
        return evaluate(f, {}) == evaluate(g, {})
    tt = truth_table([f, g], lits)
    return bool(np.array_equal(tt[0], tt[1]))


def test_table1_formulas():
    top = fig1_top()
    g = lambda a, b, t: Lit((a, b), t)
    assert equivalent(acceptance_event(top, 0, 0).formula, g("N1", "N4", 0))
    expected = conj([neg(g("N1", "N4", 0)), g("N1", "N3", 0), g("N3", "N4", 1)])
    assert equivalent(acceptance_event(top, 0, 1).formula, expected)
    # second sensor mirrors the first
    expected = conj([neg(g("N2", "N4", 0)), g("N2", "N3", 0), g("N3", "N4", 1)])
    assert equivalent(acceptance_event(top, 1, 1).formula, expected)


def test_unreachable_and_no_long_path():
    nodes = [Node("S", "sensor", 0), Node("T", "sensor", 1), Node("R", "relay"), Node("E", "estimator")]
    top = compute_layers(nodes, [("S", "R"), ("R", "E")])
    assert "T" in top.unreachable
    assert acceptance_event(top, 1, 0).formula == FALSE
    # S only has a two-hop route: nothing can arrive without delay
    assert acceptance_event(top, 0, 0).formula == FALSE
    with pytest.raises(ValueError):
        acceptance_event(top, 0, 2)


def test_events_match_explicit_forwarding():
    top = fig1_top()
    for s, node in enumerate(["N1", "N2"]):
        events = [acceptance_event(top, s, d).formula for d in range(2)]
        lits = collect_literals(events)
        for bits in itertools.product([False, True], repeat=len(lits)):
            assign = dict(zip(lits, bits))
            ok = lambda e, t: assign.get(Lit(e, t), False)
            arr = forward(top, node, ok, 3)
            first = min(arr) if arr else None
            for d in range(2):
                assert evaluate(events[d], assign) == (first == d)


def test_probability_examples():
    top = fig1_top()
    b = {e: p for e, p in zip(FIG1_EDGES, (0.17, 0.87, 0.67, 0.41, 0.77))}
    assert event_probability(acceptance_event(top, 0, 0), b) == pytest.approx(0.17, abs=1e-15)
    p11 = event_probability(acceptance_event(top, 0, 1), b)
    assert p11 == pytest.approx((1 - 0.17) * 0.87 * 0.77, abs=1e-14)
    ev = acceptance_event(top, 0, 1).formula
    assert event_probability([ev, neg(ev)], b) == 0.0


def test_gamma11_monte_carlo():
    top = fig1_top()
    b = {e: p for e, p in zip(FIG1_EDGES, (0.17, 0.87, 0.67, 0.41, 0.77))}
    p = event_probability(acceptance_event(top, 0, 1), b)
    rng = np.random.default_rng(2024)
    n = 10**6
    # draw the three literals involved in sensor 1's delay-one route
    l14 = rng.random(n) < b[("N1", "N4")]
    l13 = rng.random(n) < b[("N1", "N3")]
    l34 = rng.random(n) < b[("N3", "N4")]
    hits = ~l14 & l13 & l34
    se = np.sqrt(p * (1 - p) / n)
    assert abs(hits.mean() - p) <= 3 * se


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_delays_partition_outcomes(ps):
    top = fig1_top()
    b = dict(zip(FIG1_EDGES, ps))
    for s in range(2):
        acc = [acceptance_event(top, s, d) for d in range(2)]
        total = sum(event_probability(e, b) for e in acc)
        total += event_probability(not_yet_event(top, s, 1), b)
        assert total == pytest.approx(1.0, abs=1e-12)
        assert event_probability(acc, b) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.integers(0, 3))
def test_probability_matches_truth_table_oracle(ps, which):
    top = fig1_top()
    b = dict(zip(FIG1_EDGES, ps))
    # conjunctions mixing both sensors and two send times (≤ 12 literals)
    parts = [
        [acceptance_event(top, 0, 1, send_time=-1), acceptance_event(top, 1, 0)],
        [not_yet_event(top, 0, 1), acceptance_event(top, 1, 1, send_time=-1)],
        [acceptance_event(top, 0, 0), not_yet_event(top, 1, 0), not_yet_event(top, 1, 1, send_time=-1)],
        [not_yet_event(top, 0, 3), acceptance_event(top, 1, 1)],
    ][which]
    f = conj(e.formula for e in parts)
    assert len(collect_literals([f])) <= 12
    assert event_probability(parts, b) == pytest.approx(brute_probability(f, b), abs=1e-14)


def test_literal_cap():
    top = fig1_top()
    events = [acceptance_event(top, 0, 1, send_time=-t) for t in range(10)]
    with pytest.raises(TooManyLiteralsError):
        event_probability(events, dict.fromkeys(FIG1_EDGES, 0.5), max_literals=8)


def test_not_yet_clamps_depth():
    top = fig1_top()
    assert equivalent(not_yet_event(top, 0, 5).formula, not_yet_event(top, 0, 1).formula)
