"""Monte Carlo validation of the chain, the jump filter and the power policies.

Replications run in lockstep as a batch. Every replication owns a random
stream spawned from the master seed, and its draws are taken in fixed-size
blocks, so each replication's realisation does not depend on how many others
run beside it.

Per slot ``t``: sensors sample, every node draws its fading and power, each
link succeeds independently (at its mean rate, or from the drawn fading when
``correlated_fading``), relays forward what they acquired at ``t-1``, and
the estimator keeps only first copies. The jump filter and a time-varying
Kalman filter are run on the same realisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .channel import ChannelModel, PowerPolicy, link_prob_table
from .markov import ThetaLayout, availability, enumerate_states
from .model import AugmentedModel
from .synthesis import Design
from .topology import Topology

__all__ = ["SimConfig", "SimStats", "simulate", "KalmanBaseline", "kalman_baseline", "riccati_trace"]


@dataclass(frozen=True)
class SimConfig:
    steps: int = 10_000
    replications: int = 10
    master_seed: int = 0
    correlated_fading: bool = False
    burn_in: float = 0.1
    block: int = 1024
    batches: int = 1  # time batches per replication for the frequency standard errors
    record_trace: bool = False

    def __post_init__(self):
        if self.steps < 1 or self.replications < 1:
            raise ValueError("steps and replications must be >= 1")
        if self.batches < 1:
            raise ValueError("batches must be >= 1")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn_in must be a fraction in [0, 1)")


@dataclass
class SimStats:
    """Statistics pooled over replications.

    Standard errors come from the spread of per-replication estimates.
    State indices refer to the full (unreduced) enumeration.
    """

    empirical_error_cov: np.ndarray
    empirical_gamma: float
    gamma_se: float
    stacked_error_cov: np.ndarray
    empirical_Lambda: np.ndarray
    Lambda_se: np.ndarray
    transition_counts: np.ndarray
    visits: np.ndarray
    theta_occupancy: np.ndarray
    occupancy_se: np.ndarray
    mean_power: dict[str, float]
    power_se: dict[str, float]
    kalman_gamma: float
    kalman_se: float
    gap_se: float
    samples: int
    duplicate_violations: int
    outside_reduced: int
    states: np.ndarray = field(repr=False)
    trace: dict | None = field(default=None, repr=False)
    per_replication_gamma: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        S = self.theta_occupancy.size
        n = self.empirical_error_cov.shape[0]
        return {
            "empirical_error_cov": {"shape": [n, n], "data": self.empirical_error_cov.ravel().tolist()},
            "empirical_gamma": self.empirical_gamma,
            "gamma_se": self.gamma_se,
            "empirical_Lambda": {"shape": [S, S], "data": self.empirical_Lambda.ravel().tolist()},
            "theta_occupancy": self.theta_occupancy.tolist(),
            "mean_power": self.mean_power,
            "kalman_gamma": self.kalman_gamma,
            "kalman_se": self.kalman_se,
            "gap_se": self.gap_se,
            "samples": self.samples,
            "duplicate_violations": self.duplicate_violations,
            "outside_reduced": self.outside_reduced,
        }


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(M)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class KalmanBaseline:
    """Batched time-varying Kalman filter with per-step availability masks.

    Only the covariance recursion lives here; callers apply the gain to
    estimates or to errors.
    """

    def __init__(self, aug: AugmentedModel, batch: int):
        self.aug = aug
        self.P = np.zeros((batch, aug.N, aug.N))

    def gain(self, mask: np.ndarray) -> np.ndarray:
        """Advance one slot and return the masked gain, shape (batch, N, n_m)."""
        aug = self.aug
        A, C, V = aug.Abar, aug.Cbar, aug.V
        n_m = C.shape[0]
        P_ = A @ self.P @ A.T + aug.Q
        mf = mask.astype(float)
        Sm = (C @ P_ @ C.T + V) * mf[:, :, None] * mf[:, None, :] + np.eye(n_m) * (1.0 - mf)[:, None, :]
        PCt = (P_ @ C.T) * mf[:, None, :]
        K = np.swapaxes(np.linalg.solve(Sm, np.swapaxes(PCt, 1, 2)), 1, 2)
        F = np.eye(aug.N) - np.einsum("rij,rj,jk->rik", K, mf, C)
        KV = K * mf[:, None, :]
        P = F @ P_ @ np.swapaxes(F, 1, 2) + KV @ V @ np.swapaxes(KV, 1, 2)
        self.P = 0.5 * (P + np.swapaxes(P, 1, 2))
        return K


def kalman_baseline(aug: AugmentedModel, masks: np.ndarray, mbars: np.ndarray,
                    xbars: np.ndarray, burn_in: int = 0) -> float:
    """Empirical index of the time-varying Kalman filter on a recorded trace.

    ``masks`` (T, n_m) availability, ``mbars`` (T, n_m) received values,
    ``xbars`` (T, N) true stacked states.
    """
    kf = KalmanBaseline(aug, 1)
    acc = np.zeros((aug.n, aug.n))
    count = 0
    xh = np.zeros(aug.N)
    for t in range(masks.shape[0]):
        K = kf.gain(masks[t][None])[0]
        xp = aug.Abar @ xh
        xh = xp + K @ (masks[t] * (mbars[t] - aug.Cbar @ xp))
        if t >= burn_in:
            e = xbars[t, :aug.n] - xh[:aug.n]
            acc += np.outer(e, e)
            count += 1
    return float(np.trace(acc / count))


def riccati_trace(aug: AugmentedModel, steps: int = 10_000) -> tuple[float, np.ndarray]:
    """Filtered steady-state covariance with every measurement available, by iteration."""
    A, C, V, Q = aug.Abar, aug.Cbar, aug.V, aug.Q
    P = np.zeros_like(A)
    for _ in range(steps):
        Z = A @ P @ A.T + Q
        K = Z @ C.T @ np.linalg.inv(C @ Z @ C.T + V)
        P = (np.eye(A.shape[0]) - K @ C) @ Z
        P = 0.5 * (P + P.T)
    return float(np.trace(aug.Cx @ P @ aug.Cx.T)), P


class _Streams:
    """Block-wise draws for one replication."""

    def __init__(self, seed_seq: np.random.SeedSequence, cfg: SimConfig, n_w, n_y, ch, n_edges):
        self.rng = np.random.default_rng(seed_seq)
        self.cfg = cfg
        self.dims = (n_w, n_y, n_edges)
        self.ch = ch
        self.pos = cfg.block

    def refill(self):
        n_w, n_y, n_e = self.dims
        B = self.cfg.block
        rng = self.rng
        self.w = rng.standard_normal((B, n_w))
        self.v = rng.standard_normal((B, n_y))
        self.fade = self.ch.fading.sample(rng, B) if self.ch is not None else {}
        self.unif = rng.random((B, n_e))
        self.pos = 0

    def take(self):
        if self.pos >= self.cfg.block:
            self.refill()
        p = self.pos
        self.pos += 1
        return self.w[p], self.v[p], {k: v[p] for k, v in self.fade.items()}, self.unif[p]


def simulate(aug: AugmentedModel, top: Topology, ch: ChannelModel | None,
             policies: Mapping[str, PowerPolicy] | None, design: Design, cfg: SimConfig,
             link_probs: Mapping | None = None) -> SimStats:
    """Run the network, the jump filter of ``design`` and the Kalman baseline.

    ``link_probs`` overrides the per-link rates used in independent mode
    (default: the averages implied by ``ch`` and ``policies``). With
    ``ch=None`` no fading or power is simulated and ``link_probs`` is required.
    """
    if ch is None and (link_probs is None or cfg.correlated_fading):
        raise ValueError("link rates are needed when no channel model is given")
    edges = list(top.edges)
    if link_probs is None:
        link_probs = link_prob_table(ch, policies, edges)
    beta = np.array([link_probs[e] for e in edges])
    layout = design.chain.layout
    if layout.dbar != aug.dbar or layout.dbar != top.dbar:
        raise ValueError("design, augmented model and topology disagree on the maximum delay")
    n, N, ny, dbar, taubar = aug.n, aug.N, aug.n_y, aug.dbar, layout.taubar
    sig = np.sqrt(np.diag(aug.V)[[s * (dbar + 1) for s in range(ny)]])
    Wh = _sqrtm_psd(aug.W)

    # state lookup over the full enumeration
    states = enumerate_states(ny, dbar, taubar)
    S_full = states.shape[0]
    n_theta = layout.n_theta
    weights = (1 << np.arange(n_theta, dtype=np.int64))
    codes = states.astype(np.int64) @ weights
    lookup = {int(c): i for i, c in enumerate(codes)}
    psi_full = np.array([availability(st, layout) for st in states])
    gains_full = np.zeros((S_full, N, aug.n_m))
    gains_full[design.chain.origin] = design.schedule.per_state()
    in_reduced = np.zeros(S_full, dtype=bool)
    in_reduced[design.chain.origin] = True
    # bit -> (depth back in alpha history, sensor, delay); delays beyond dbar are always 0
    bit_src = []
    for s in range(ny):
        for d in range(taubar + 1):
            for delta in range(d + 1):
                bit_src.append((d - delta, s, delta))

    R, T = cfg.replications, cfg.steps
    burn = int(math.floor(cfg.burn_in * T))
    seeds = np.random.SeedSequence(cfg.master_seed).spawn(R)
    streams = [_Streams(sq, cfg, aug.W.shape[0], ny, ch, len(edges)) for sq in seeds]

    node_ids = [nd.id for nd in top.nodes]
    sensor_of = {nd.id: nd.output for nd in top.sensors}
    relays = [nd.id for nd in top.nodes if nd.role == "relay"]
    est = top.estimator
    senders = top.transmitters
    pol_edges = {a: [e for e in edges if e[0] == a] for a in senders}

    # errors of the jump filter and of the Kalman filter, stacked coordinates
    err = np.zeros((R, N))
    kerr = np.zeros((R, N))
    vhist = np.zeros((R, ny, dbar + 1))
    kf = KalmanBaseline(aug, R)
    recv_prev = {a: np.zeros((R, ny, dbar + 1), dtype=bool) for a in relays}
    accepted = np.zeros((R, ny, dbar + 1), dtype=bool)
    hist_len = max(taubar, dbar) + 1
    alpha_hist = np.zeros((R, hist_len, ny, dbar + 1), dtype=bool)
    prev_idx = np.full(R, -1)

    err_acc = np.zeros((R, n, n))
    stack_acc = np.zeros((R, N, N))
    kf_acc = np.zeros((R, n, n))
    nb = cfg.batches
    occ = np.zeros((R * nb, S_full))
    trans = np.zeros((R * nb, S_full, S_full))
    power_acc = {a: np.zeros(R) for a in senders}
    dup = 0
    outside = 0
    rows = np.arange(R)
    trace = {"k": [], "theta": [], "err2": [], "kf_err2": [], "power": []} if cfg.record_trace else None

    for t in range(T):
        draws = [st.take() for st in streams]
        w = np.stack([d[0] for d in draws]) @ Wh.T
        v = np.stack([d[1] for d in draws]) * sig
        unif = np.stack([d[3] for d in draws])
        vhist = np.roll(vhist, 1, axis=2)
        vhist[:, :, 0] = v

        # fading and power
        powers = {}
        link_gain = {}
        if ch is not None:
            fade = {k: np.array([d[2][k] for d in draws]) for k in draws[0][2]}
            link_gain = ch.fading.gains(fade, edges)
            for a in senders:
                gains_a = {e: link_gain[e] for e in pol_edges[a]}
                powers[a] = np.broadcast_to(policies[a](gains_a), (R,)).astype(float)
                power_acc[a] += powers[a] if t >= burn else 0.0
        if cfg.correlated_fading:
            p_succ = np.stack([ch.f(e)(link_gain[e] * powers[e[0]]) for e in edges], axis=1)
        else:
            p_succ = beta[None, :]
        ok = unif < p_succ

        # packet forwarding
        tx = {}
        for a in senders:
            if a in sensor_of:
                content = np.zeros((R, ny, dbar + 1), dtype=bool)
                content[:, sensor_of[a], 0] = True
            else:
                content = np.zeros((R, ny, dbar + 1), dtype=bool)
                content[:, :, 1:] = recv_prev[a][:, :, :-1]
            tx[a] = content
        recv = {l: np.zeros((R, ny, dbar + 1), dtype=bool) for l in relays + [est]}
        for ei, (a, l) in enumerate(edges):
            recv[l] |= tx[a] & ok[:, ei, None, None]
        for a in relays:
            recv_prev[a] = recv[a]
        accepted = np.roll(accepted, 1, axis=2)
        accepted[:, :, 0] = False
        alpha = recv[est] & ~accepted
        accepted |= alpha
        alpha_hist = np.roll(alpha_hist, 1, axis=1)
        alpha_hist[:, 0] = alpha
        if t >= dbar:
            # sample sent at t-dbar: its acceptances across delays
            tot = sum(alpha_hist[:, dbar - dl, :, dl].astype(int) for dl in range(dbar + 1))
            dup += int((tot > 1).sum())

        # state index
        code = np.zeros(R, dtype=np.int64)
        for b, (back, s, delta) in enumerate(bit_src):
            if delta <= dbar:
                code |= alpha_hist[:, back, s, delta].astype(np.int64) << b
        idx = np.array([lookup.get(int(c), -1) for c in code])
        if np.any(idx < 0):
            raise RuntimeError(f"observed history code {code[idx < 0][0]} is not an enumerated state")
        mask = psi_full[idx]
        vs = vhist.reshape(R, -1)

        # both filters are linear, so their errors obey the same recursion as
        # the estimates without carrying the (possibly unstable) plant state
        wb = w @ aug.Bbar.T
        ep = err @ aug.Abar.T + wb
        err = ep - np.einsum("rij,rj->ri", gains_full[idx], mask * (ep @ aug.Cbar.T + vs))
        kp = kerr @ aug.Abar.T + wb
        K = kf.gain(mask)
        kerr = kp - np.einsum("rij,rj->ri", K, mask * (kp @ aug.Cbar.T + vs))

        if t >= burn:
            outside += int((~in_reduced[idx]).sum())
            e = err[:, :n]
            err_acc += e[:, :, None] * e[:, None, :]
            stack_acc += err[:, :, None] * err[:, None, :]
            ek = kerr[:, :n]
            kf_acc += ek[:, :, None] * ek[:, None, :]
            bidx = rows * nb + (t - burn) * nb // (T - burn)
            occ[bidx, idx] += 1
            if t > burn:
                trans[bidx, prev_idx, idx] += 1
        if trace is not None:
            trace["k"].append(t)
            trace["theta"].append(int(idx[0]))
            trace["err2"].append(float(np.sum(err[0, :n] ** 2)))
            trace["kf_err2"].append(float(np.sum(kerr[0, :n] ** 2)))
            trace["power"].append({a: float(powers[a][0]) for a in powers})
        prev_idx = idx

    M = T - burn
    cov_r = err_acc / M
    gam_r = np.trace(cov_r, axis1=1, axis2=2)
    kgam_r = np.trace(kf_acc / M, axis1=1, axis2=2)

    def se(vals):
        return float(vals.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")

    # batch means over replications x time batches; frequencies are ratio estimators
    Bn = R * nb
    occ_b = occ / occ.sum(axis=1, keepdims=True)
    tot_from = trans.sum(axis=2)  # (Bn, S)
    pooled_from = tot_from.sum(axis=0)
    pooled = trans.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam_hat = np.where(pooled_from[:, None] > 0, pooled / pooled_from[:, None], 0.0)
        if Bn > 1:
            resid = trans - lam_hat[None] * tot_from[:, :, None]
            mean_from = pooled_from / Bn
            var = (resid ** 2).sum(axis=0) / (Bn - 1)
            lam_se = np.where(mean_from[:, None] > 0,
                              np.sqrt(var / Bn) / np.where(mean_from > 0, mean_from, 1.0)[:, None], 0.0)
        else:
            lam_se = np.full_like(lam_hat, np.nan)

    return SimStats(
        empirical_error_cov=cov_r.mean(axis=0),
        empirical_gamma=float(gam_r.mean()),
        gamma_se=se(gam_r),
        stacked_error_cov=(stack_acc / M).mean(axis=0),
        empirical_Lambda=lam_hat,
        Lambda_se=lam_se,
        transition_counts=pooled,
        visits=pooled_from,
        theta_occupancy=occ_b.mean(axis=0),
        occupancy_se=occ_b.std(axis=0, ddof=1) / math.sqrt(Bn) if Bn > 1 else np.full(S_full, np.nan),
        mean_power={a: float(power_acc[a].mean() / M) for a in senders} if ch is not None else {},
        power_se={a: se(power_acc[a] / M) for a in senders} if ch is not None else {},
        kalman_gamma=float(kgam_r.mean()),
        kalman_se=se(kgam_r),
        gap_se=se(gam_r - kgam_r),
        samples=R * M,
        duplicate_violations=dup,
        outside_reduced=outside,
        states=states,
        trace=trace,
        per_replication_gamma=gam_r,
    )
