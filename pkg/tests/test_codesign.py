import math

import numpy as np
import pytest

from jumpnet.channel import BpskPacket, average_link_prob, expected_power
from jumpnet.codesign import (
    CodesignConfig,
    CodesignInfeasible,
    greedy_codesign,
    max_success_under_budget,
)


def config(fig1, fam="constant", **kw):
    nodes = fig1.top.transmitters
    base = dict(gamma_P=math.inf, mu={a: 1.0 for a in nodes}, u_max=10.0,
                families={a: fam for a in nodes})
    if fam == "quantized_inverse":
        base["levels"] = {a: (2.5, 5.0, 10.0) for a in nodes}
    base.update(kw)
    return CodesignConfig(**base)


@pytest.fixture(scope="module")
def gamma0(fig1):
    return greedy_codesign(config(fig1, max_iter=0), fig1.sys, fig1.top, fig1.ch).best.gamma


@pytest.fixture(scope="module")
def run(fig1, gamma0):
    cfg = config(fig1, gamma_P=1.1 * gamma0, xi=1.5)
    return greedy_codesign(cfg, fig1.sys, fig1.top, fig1.ch)


def test_constant_family_budget(fig1):
    pol = max_success_under_budget(fig1.ch, "N1", 6.0, 2.0, 10.0, "constant")
    assert pol.u == 3.0
    assert max_success_under_budget(fig1.ch, "N1", 25.0, 2.0, 10.0, "constant") is None
    assert max_success_under_budget(fig1.ch, "N1", -1.0, 1.0, 10.0, "constant") is None


@pytest.mark.parametrize("fam", ["saturated_inverse", "quantized_inverse"])
def test_budget_extremes(fig1, fam):
    levels = (2.5, 5.0, 10.0)
    for a in fig1.top.transmitters:
        zero = max_success_under_budget(fig1.ch, a, 0.0, 1.0, 10.0, fam, levels)
        full = max_success_under_budget(fig1.ch, a, 10.0, 1.0, 10.0, fam, levels)
        if fam == "saturated_inverse":
            assert expected_power(fig1.ch, zero, a) == pytest.approx(0.0, abs=1e-12)
            for e in fig1.top.out_edges(a):
                assert average_link_prob(fig1.ch, zero, e) == pytest.approx(BpskPacket(4)(0.0))
        assert expected_power(fig1.ch, full, a) == pytest.approx(10.0, abs=1e-9)


@pytest.mark.parametrize("fam", ["saturated_inverse", "quantized_inverse"])
def test_budget_met_exactly(fig1, fam):
    for a in fig1.top.transmitters:
        for target in (3.7, 6.0, 8.8):
            pol = max_success_under_budget(fig1.ch, a, 2 * target, 2.0, 10.0, fam, (2.5, 5.0, 10.0))
            assert pol is not None
            assert abs(expected_power(fig1.ch, pol, a) - target) <= 1e-9


def test_trajectory_invariants(run, gamma0):
    tr = run.trajectory
    J0 = tr[0].J
    assert tr[0].gamma == pytest.approx(gamma0)
    assert len(tr) > 2 and run.stop_reason == "ceiling reached"
    for i, it in enumerate(tr):
        assert it.J == pytest.approx(J0 - i * run.xi, abs=1e-12)
        assert abs(it.budget - it.J) <= 1e-6
        assert it.gamma <= 1.1 * gamma0
        assert sum(it.powers.values()) == pytest.approx(it.budget)
    g = np.array([it.gamma for it in tr])
    assert np.all(np.diff(g) >= -1e-12)
    for it in tr[1:]:
        assert it.chosen in it.candidates
        assert it.gamma == min(it.candidates.values())


def test_deterministic(fig1, gamma0, run):
    again = greedy_codesign(config(fig1, gamma_P=1.1 * gamma0, xi=1.5), fig1.sys, fig1.top, fig1.ch)
    assert again.to_csv() == run.to_csv()


def test_csv_layout(run):
    lines = run.to_csv().splitlines()
    assert lines[0] == "iteration,J,budget,chosen,gamma,Eu_N1,Eu_N2,Eu_N3"
    assert len(lines) == len(run.trajectory) + 1
    assert run.to_dict()["stop_reason"] == run.stop_reason


def test_tight_ceiling_stops_early(fig1, gamma0):
    r = greedy_codesign(config(fig1, gamma_P=gamma0 * (1 + 1e-9), xi=1.5), fig1.sys, fig1.top, fig1.ch)
    assert r.stop_reason == "ceiling reached" and len(r.trajectory) == 1


def test_infeasible_ceiling(fig1, gamma0):
    with pytest.raises(CodesignInfeasible):
        greedy_codesign(config(fig1, gamma_P=0.9 * gamma0), fig1.sys, fig1.top, fig1.ch)


def test_default_step_is_one_percent(fig1):
    r = greedy_codesign(config(fig1, max_iter=1), fig1.sys, fig1.top, fig1.ch)
    assert r.xi == pytest.approx(0.3)
    assert r.trajectory[1].J == pytest.approx(29.7)


def test_quantized_family_runs(fig1):
    r = greedy_codesign(config(fig1, "quantized_inverse", xi=3.0, max_iter=2), fig1.sys, fig1.top, fig1.ch)
    assert len(r.trajectory) == 3 and r.stop_reason == "max_iter"


def test_reduced_gain_count(fig1):
    r = greedy_codesign(config(fig1, xi=3.0, max_iter=1, target_gain_count=10), fig1.sys, fig1.top, fig1.ch)
    assert all(it.gain_count <= 10 for it in r.trajectory)


def test_config_checks():
    with pytest.raises(ValueError, match="unknown policy family"):
        CodesignConfig(gamma_P=1.0, mu={"a": 1.0}, u_max=1.0, families={"a": "bogus"})
    with pytest.raises(ValueError, match="levels"):
        CodesignConfig(gamma_P=1.0, mu={"a": 1.0}, u_max=1.0, families={"a": "quantized_inverse"})
    with pytest.raises(ValueError):
        CodesignConfig(gamma_P=-1.0, mu={}, u_max=1.0, families={})
