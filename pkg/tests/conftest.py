import numpy as np
import pytest

from jumpnet.channel import ConstantPolicy, link_prob_table
from jumpnet.config import bundled_config
from jumpnet.markov import ChainBuilder, reduce_and_check
from jumpnet.model import SystemModel, augment
from jumpnet.synthesis import solve_design
from jumpnet.topology import Node, compute_layers


class Scenario:
    """A bundled config with its model objects built once."""

    def __init__(self, name):
        self.cfg = bundled_config(name)
        self.sys = self.cfg.system_model()
        self.top = self.cfg.topology_model()
        self.ch = self.cfg.channel_model()
        self.aug = augment(self.sys, self.top.dbar)
        self.builder = ChainBuilder(self.top)

    def policies(self, u=5.0):
        return {a: ConstantPolicy(10.0, u) for a in self.top.transmitters}

    def beta(self, u=5.0):
        return link_prob_table(self.ch, self.policies(u), self.top.edges)

    def chain(self, u=5.0):
        return reduce_and_check(self.builder.build(self.beta(u)))[0]

    def design(self, u=5.0, partition=None):
        return solve_design(self.aug, self.chain(u), partition)


@pytest.fixture(scope="session")
def fig1():
    return Scenario("fig1.json")


@pytest.fixture(scope="session")
def direct():
    return Scenario("fig1_direct.json")


@pytest.fixture(scope="session")
def fig1_design(fig1):
    return fig1.design()


# single sensor with one relay: d̄ = τ̄ = 1 gives six modes
SIX_EDGES = [("S", "E"), ("S", "R"), ("R", "E")]


@pytest.fixture(scope="session")
def six():
    sysm = SystemModel(A=[[1.05, -0.1], [0.74, 1.05]], B=[[0.01, 0.13], [0.01, 0.08]],
                       C=[[0.53, 0.39]], W=[[0.26, -0.003], [-0.003, 0.25]], sigma2=[0.0086])
    top = compute_layers([Node("S", "sensor", 0), Node("R", "relay"), Node("E", "estimator")], SIX_EDGES)
    beta = dict(zip(SIX_EDGES, (0.3, 0.8, 0.7)))
    chain, _ = reduce_and_check(ChainBuilder(top).build(beta))
    aug = augment(sysm, 1)
    return {"sys": sysm, "top": top, "beta": beta, "chain": chain, "aug": aug,
            "design": solve_design(aug, chain)}


def scalar_setup(a, beta, c=1.0, w=1.0, s2=0.1):
    """One sensor wired straight to the estimator through an i.i.d. link."""
    sysm = SystemModel(A=[[a]], B=[[1.0]], C=[[c]], W=[[w]], sigma2=[s2])
    top = compute_layers([Node("S", "sensor", 0), Node("E", "estimator")], [("S", "E")])
    chain = ChainBuilder(top).build({("S", "E"): beta})
    return sysm, top, chain


def random_psd(rng, n, scale=1.0):
    M = rng.standard_normal((n, n))
    return scale * M @ M.T


# ---- acceptance verdict lines ---------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, checks, tag)`` records one line for criterion ``n`` and asserts every check.

    ``checks`` is a list of ``(label, ok)`` pairs.
    """
    store = request.config.stash[_VERDICTS]

    def record(n, checks, tag=""):
        failed = [label for label, ok in checks if not ok]
        status = "PASS" if not failed else "FAIL"
        detail = "; ".join(label for label, _ in checks) if not failed else "failed: " + "; ".join(failed)
        line = f"criterion {n:2d}{' [' + tag + ']' if tag else ''}: {status}  {detail}"
        store[(n, tag)] = line
        assert not failed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
