import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from jumpnet.channel import expected_power
from jumpnet.markov import ChainBuilder, reduce_and_check
from jumpnet.model import SystemModel, augment
from jumpnet.simulate import KalmanBaseline, SimConfig, kalman_baseline, riccati_trace, simulate
from jumpnet.synthesis import solve_design
from jumpnet.topology import Node, compute_layers

DIRECT = compute_layers([Node("S", "sensor", 0), Node("E", "estimator")], [("S", "E")])


def direct_setup(A, beta, C=((1.0,),), W=((1.0,),), s2=(0.2,)):
    sysm = SystemModel(A=A, B=np.eye(len(A)), C=C, W=W, sigma2=s2)
    aug = augment(sysm, 0)
    chain, _ = reduce_and_check(ChainBuilder(DIRECT).build({("S", "E"): beta}))
    return aug, chain, solve_design(aug, chain, tol=1e-12)


def test_perfect_links_reach_riccati():
    aug, chain, d = direct_setup([[1.1]], 1.0)
    ric, _ = riccati_trace(aug)
    assert d.gamma == pytest.approx(ric, rel=1e-10)
    st = simulate(aug, DIRECT, None, None, d, SimConfig(steps=4000, replications=50),
                  link_probs={("S", "E"): 1.0})
    assert abs(st.empirical_gamma - ric) <= 4 * st.gamma_se
    assert abs(st.empirical_gamma - ric) <= 0.03 * ric
    # with every packet delivered both filters coincide
    assert st.kalman_gamma == pytest.approx(st.empirical_gamma, rel=1e-9)


def test_no_links_follow_lyapunov():
    A = [[0.8, 0.2], [0.0, 0.5]]
    aug, chain, d = direct_setup(A, 0.0, C=((1.0, 0.0),), W=np.eye(2))
    assert chain.size == 1 and chain.zero_gain.all()
    X = solve_discrete_lyapunov(np.array(A), np.eye(2))
    assert d.gamma == pytest.approx(np.trace(X), rel=1e-8)
    st = simulate(aug, DIRECT, None, None, d, SimConfig(steps=2000, replications=50),
                  link_probs={("S", "E"): 0.0})
    assert abs(st.empirical_gamma - np.trace(X)) <= 4 * st.gamma_se


def test_kalman_baseline_without_measurements_is_lyapunov():
    aug, _, _ = direct_setup([[0.8, 0.2], [0.0, 0.5]], 0.0, C=((1.0, 0.0),), W=np.eye(2))
    kf = KalmanBaseline(aug, 3)
    P = np.zeros((aug.N, aug.N))
    for _ in range(25):
        K = kf.gain(np.zeros((3, aug.n_m), dtype=bool))
        P = aug.Abar @ P @ aug.Abar.T + aug.Q
        assert not K.any()
    assert np.allclose(kf.P, P, atol=1e-12)


def test_kalman_baseline_full_mask_converges_to_riccati():
    aug, _, _ = direct_setup([[1.1]], 1.0)
    kf = KalmanBaseline(aug, 1)
    for _ in range(500):
        kf.gain(np.ones((1, 1), dtype=bool))
    assert np.allclose(kf.P[0], riccati_trace(aug)[1], atol=1e-10)


def test_offline_kalman_on_trace():
    aug, _, _ = direct_setup([[0.9]], 1.0)
    rng = np.random.default_rng(1)
    T = 20000
    x = np.zeros(T)
    xt = 0.0
    for t in range(T):
        xt = 0.9 * xt + rng.standard_normal()
        x[t] = xt
    y = x + np.sqrt(0.2) * rng.standard_normal(T)
    g = kalman_baseline(aug, np.ones((T, 1), dtype=bool), y[:, None], x[:, None], burn_in=100)
    assert g == pytest.approx(riccati_trace(aug)[0], rel=0.05)


@pytest.fixture(scope="module")
def fig1_run(fig1, fig1_design):
    cfg = SimConfig(steps=2000, replications=8, master_seed=7, batches=2)
    return simulate(fig1.aug, fig1.top, fig1.ch, fig1.policies(), fig1_design, cfg)


def test_run_bookkeeping(fig1_run, fig1_design):
    st = fig1_run
    assert st.duplicate_violations == 0
    assert st.outside_reduced == 0
    assert st.theta_occupancy.sum() == pytest.approx(1.0)
    assert st.samples == 8 * 1800
    assert all(0 <= p <= 10 for p in st.mean_power.values())
    # constant policies spend exactly their level
    assert all(p == pytest.approx(5.0) for p in st.mean_power.values())
    assert st.states.shape[0] == fig1_design.chain.reachable.size
    assert np.isfinite(st.to_dict()["empirical_gamma"])


def test_occupancy_matches_pi(fig1_run, fig1_design):
    st = fig1_run
    pi_full = np.zeros(st.states.shape[0])
    pi_full[fig1_design.chain.origin] = fig1_design.chain.pi
    z = np.abs(st.theta_occupancy - pi_full) / np.maximum(st.occupancy_se, 1e-4)
    assert z.max() < 5


def test_kalman_not_worse(fig1_run):
    st = fig1_run
    assert st.kalman_gamma <= st.empirical_gamma + 3 * st.gap_se


def test_reproducible(fig1, fig1_design):
    cfg = SimConfig(steps=300, replications=3, master_seed=11)
    a = simulate(fig1.aug, fig1.top, fig1.ch, fig1.policies(), fig1_design, cfg)
    b = simulate(fig1.aug, fig1.top, fig1.ch, fig1.policies(), fig1_design, cfg)
    assert np.array_equal(a.per_replication_gamma, b.per_replication_gamma)
    assert np.array_equal(a.transition_counts, b.transition_counts)
    # a replication's path does not depend on how many run beside it
    c = simulate(fig1.aug, fig1.top, fig1.ch, fig1.policies(), fig1_design,
                 SimConfig(steps=300, replications=5, master_seed=11))
    assert np.array_equal(a.per_replication_gamma, c.per_replication_gamma[:3])


def test_correlated_fading_mode(fig1):
    from jumpnet.channel import SaturatedInverse
    pols = {a: SaturatedInverse(10.0, 1.0, fig1.ch.default_ref_edge(a)) for a in fig1.top.transmitters}
    from jumpnet.channel import link_prob_table
    chain, _ = reduce_and_check(fig1.builder.build(link_prob_table(fig1.ch, pols, fig1.top.edges)))
    d = solve_design(fig1.aug, chain)
    st = simulate(fig1.aug, fig1.top, fig1.ch, pols, d,
                  SimConfig(steps=1500, replications=8, correlated_fading=True, record_trace=True))
    assert st.duplicate_violations == 0
    for a in fig1.top.transmitters:
        assert abs(st.mean_power[a] - expected_power(fig1.ch, pols[a], a)) <= 5 * st.power_se[a] + 1e-3
    assert len(st.trace["k"]) == 1500


def test_rates_required_without_channel(fig1, fig1_design):
    with pytest.raises(ValueError):
        simulate(fig1.aug, fig1.top, None, None, fig1_design, SimConfig(steps=10, replications=1))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(steps=0)
    with pytest.raises(ValueError):
        SimConfig(burn_in=1.0)
