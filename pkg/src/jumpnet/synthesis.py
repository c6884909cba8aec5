"""Steady-state jump filter design over a delivery-history Markov chain.

The filter is ``xhat = Abar xhat_ + L(theta) (m - psi(theta) Cbar Abar xhat_)``
with ``L = 0`` whenever nothing is available. For fixed gains the modal error
covariances ``P_j`` follow a linear recursion whose fixed point is unique;
the design alternates that recursion with the closed-form minimiser of
``sum_j pi_j tr P_j`` over each gain group (block coordinate descent).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .markov import MarkovChain
from .model import AugmentedModel, check_detectability

__all__ = [
    "GainSchedule",
    "DesignReport",
    "Design",
    "NecessaryReport",
    "full_partition",
    "modal_step",
    "optimal_group_gains",
    "solve_design",
    "check_necessary",
    "performance_index",
    "gain_pair_sensitivity",
    "pair_sensitivities",
    "reduce_complexity",
    "TrajectoryPoint",
]

log = logging.getLogger(__name__)

Partition = list[tuple[int, ...]]


def full_partition(chain: MarkovChain) -> Partition:
    """One group per state that has at least one measurement available."""
    return [(int(i),) for i in np.flatnonzero(~chain.zero_gain)]


def _canonical(partition: Sequence[Sequence[int]]) -> Partition:
    groups = [tuple(sorted(int(i) for i in g)) for g in partition if len(g)]
    return sorted(groups)


@dataclass
class GainSchedule:
    """Gains shared by groups of chain states; other states use the zero gain."""

    partition: Partition
    gains: np.ndarray  # (n_groups, N, n_m)
    n_states: int

    @property
    def lookup(self) -> np.ndarray:
        """Group index of every state, -1 for the implicit zero-gain group."""
        out = np.full(self.n_states, -1)
        for g, members in enumerate(self.partition):
            out[list(members)] = g
        return out

    def gain(self, state: int) -> np.ndarray:
        g = self.lookup[state]
        if g < 0:
            return np.zeros(self.gains.shape[1:])
        return self.gains[g]

    def per_state(self) -> np.ndarray:
        out = np.zeros((self.n_states,) + self.gains.shape[1:])
        for g, members in enumerate(self.partition):
            out[list(members)] = self.gains[g]
        return out

    @property
    def gain_count(self) -> int:
        """Distinct stored gains, counting the zero gain when some state uses it."""
        covered = sum(len(g) for g in self.partition)
        return len(self.partition) + int(covered < self.n_states)


@dataclass(frozen=True)
class NecessaryReport:
    entries: tuple[dict, ...]
    passed: bool

    def to_dict(self) -> dict:
        return {"passed": self.passed, "entries": list(self.entries)}


@dataclass
class DesignReport:
    gamma: float
    iterations: int
    residual: float
    feasible: bool
    necessary_conditions: NecessaryReport | None = None
    message: str = ""
    psd_repairs: int = 0
    singular_groups: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "iterations": self.iterations,
            "residual": self.residual,
            "feasible": self.feasible,
            "message": self.message,
            "psd_repairs": self.psd_repairs,
            "singular_groups": list(self.singular_groups),
            "necessary_conditions": None if self.necessary_conditions is None
            else self.necessary_conditions.to_dict(),
        }


@dataclass
class Design:
    schedule: GainSchedule
    P: np.ndarray  # (S, N, N)
    report: DesignReport
    chain: MarkovChain = field(repr=False)
    aug: AugmentedModel = field(repr=False)

    @property
    def gamma(self) -> float:
        return self.report.gamma

    @property
    def expected_covariance(self) -> np.ndarray:
        return np.einsum("j,jkl->kl", self.chain.pi, self.P)


# --------------------------------------------------------------------------
# core operators

def _check_chain(chain: MarkovChain) -> tuple[np.ndarray, np.ndarray]:
    pi = chain.pi
    if np.any(pi <= 0):
        raise ValueError("every state needs positive stationary probability; reduce the chain first")
    return chain.Lambda, pi


def _predicted(P: np.ndarray, aug: AugmentedModel) -> np.ndarray:
    """``Z_i = Abar P_i Abar^T + Bbar W Bbar^T`` for every mode."""
    A = aug.Abar
    return np.einsum("ab,ibc,dc->iad", A, P, A) + aug.Q


def _incoming(Z: np.ndarray, Lam: np.ndarray, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``S_j = sum_i p_ij pi_i Z_i`` and ``w_j = sum_i p_ij pi_i``."""
    weights = Lam * pi[:, None]
    return np.einsum("ij,ikl->jkl", weights, Z), weights.sum(axis=0)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _repair_psd(P: np.ndarray, floor: float = -1e-9) -> tuple[np.ndarray, int]:
    vals, vecs = np.linalg.eigh(P)
    bad = vals.min(axis=-1) < floor
    if not bad.any():
        return P, 0
    vals = np.where(bad[:, None], np.clip(vals, 0.0, None), vals)
    fixed = np.einsum("iab,ib,icb->iac", vecs, vals, vecs)
    return np.where(bad[:, None, None], fixed, P), int(bad.sum())


def modal_step(P: np.ndarray, gains: GainSchedule | np.ndarray, chain: MarkovChain,
               aug: AugmentedModel) -> np.ndarray:
    """One application of the modal covariance recursion for fixed gains.

    ``gains`` is a schedule or a per-state array of shape ``(S, N, n_m)``.
    """
    Lam, pi = _check_chain(chain)
    Ls = gains.per_state() if isinstance(gains, GainSchedule) else np.asarray(gains)
    Z = _predicted(np.asarray(P), aug)
    S, w = _incoming(Z, Lam, pi)
    Zbar = S / pi[:, None, None]
    X = Ls * chain.psi[:, None, :]  # L_j psi_j
    F = np.eye(aug.N) - X @ aug.Cbar
    out = F @ Zbar @ np.swapaxes(F, 1, 2)
    out += (w / pi)[:, None, None] * (X @ aug.V @ np.swapaxes(X, 1, 2))
    return _symmetrize(out)


def _state_terms(P, chain, aug):
    """Per-state numerator ``S_j Cbar^T psi_j`` and denominator of the gain equation."""
    Lam, pi = _check_chain(chain)
    Z = _predicted(P, aug)
    S, w = _incoming(Z, Lam, pi)
    psi = chain.psi.astype(float)
    C = aug.Cbar
    num = (S @ C.T) * psi[:, None, :]
    inner = C @ S @ C.T + w[:, None, None] * aug.V
    den = inner * psi[:, :, None] * psi[:, None, :]
    return num, den


def _solve_groups(num_g, den_g, active):
    """``num @ den^+`` restricted to active coordinates, batched over groups."""
    n_m = den_g.shape[-1]
    padded = den_g + np.eye(n_m) * (~active)[:, None, :]
    singular = []
    gains = np.empty(num_g.shape)
    cond = np.linalg.cond(padded)
    for g in range(num_g.shape[0]):
        if np.isfinite(cond[g]) and cond[g] < 1e12:
            gains[g] = np.linalg.solve(padded[g].T, num_g[g].T).T
        else:
            singular.append(g)
            gains[g] = num_g[g] @ np.linalg.pinv(padded[g], rcond=1e-12, hermitian=True)
    gains *= active[:, None, :]
    return gains, tuple(singular)


def _group_matrix(partition: Partition, n_states: int) -> np.ndarray:
    G = np.zeros((len(partition), n_states))
    for g, members in enumerate(partition):
        G[g, list(members)] = 1.0
    return G


def optimal_group_gains(P: np.ndarray, chain: MarkovChain, aug: AugmentedModel,
                        partition: Partition | None = None, _report: list | None = None) -> GainSchedule:
    """Shared gain per group minimising ``sum_j pi_j tr P'_j`` for the given ``P``."""
    partition = full_partition(chain) if partition is None else _canonical(partition)
    if any(chain.zero_gain[i] for g in partition for i in g):
        raise ValueError("states without measurements cannot join a gain group")
    num, den = _state_terms(np.asarray(P), chain, aug)
    G = _group_matrix(partition, chain.size)
    num_g = np.einsum("gj,jab->gab", G, num)
    den_g = np.einsum("gj,jab->gab", G, den)
    active = (G @ chain.psi.astype(float)) > 0
    gains, singular = _solve_groups(num_g, den_g, active)
    if singular:
        warnings.warn(f"singular gain equation in groups {singular}; using minimum-norm gains")
        if _report is not None:
            _report.extend(singular)
    return GainSchedule(partition=partition, gains=gains, n_states=chain.size)


def performance_index(P: np.ndarray, pi: np.ndarray, Cx: np.ndarray) -> float:
    """``tr(sum_j pi_j Cx P_j Cx^T)``."""
    P = np.asarray(P)
    return float(np.einsum("j,ab,jbc,ac->", np.asarray(pi), Cx, P, Cx))


def check_necessary(aug: AugmentedModel, chain: MarkovChain) -> NecessaryReport:
    """Conditions on self-transition probabilities for a bounded design to exist."""
    Lam = chain.Lambda
    rho = float(np.max(np.abs(np.linalg.eigvals(aug.Abar))))
    cache: dict[bytes, tuple[bool, float]] = {}
    entries = []
    passed = True
    for j in range(chain.size):
        pjj = float(Lam[j, j])
        eta = chain.psi[j]
        if not eta.any():
            margin = 1.0 - pjj * rho ** 2
            ok = margin >= -1e-12
            entries.append({"state": int(chain.origin[j]), "kind": "no_measurement",
                            "margin": margin, "ok": ok})
            passed &= ok
            continue
        key = eta.tobytes()
        if key not in cache:
            rep = check_detectability(aug.Abar, aug.Cbar[eta])
            cache[key] = (rep.detectable, rep.unobservable_radius)
        detectable, rad = cache[key]
        if not detectable:
            margin = 1.0 - pjj * rad ** 2
            ok = margin > 0
            entries.append({"state": int(chain.origin[j]), "kind": "undetectable",
                            "margin": margin, "ok": ok})
            passed &= ok
    return NecessaryReport(tuple(entries), bool(passed))


def _fixed_point(P, sched, chain, aug, tol, max_iter, bound):
    """Iterate the recursion with frozen gains; returns (P, iterations, diff)."""
    diff = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Pn = modal_step(P, sched, chain, aug)
        diff = float(np.max(np.abs(Pn - P)))
        P = Pn
        if diff <= tol or not np.isfinite(diff) or np.trace(P, axis1=1, axis2=2).max() > bound:
            break
    return P, it, diff


def solve_design(aug: AugmentedModel, chain: MarkovChain, partition: Partition | None = None,
                 tol: float = 1e-9, max_iter: int = 10_000, P0: np.ndarray | None = None,
                 trace_bound: float = 1e12) -> Design:
    """Alternate optimal group gains and the modal recursion until stationary.

    The returned ``P`` is the fixed point of the recursion for the returned
    gains (polished with the gains frozen).
    """
    partition = full_partition(chain) if partition is None else _canonical(partition)
    nec = check_necessary(aug, chain)
    S, N = chain.size, aug.N
    P = np.zeros((S, N, N)) if P0 is None else np.array(P0, dtype=float)
    empty = GainSchedule(partition, np.zeros((len(partition), N, aug.n_m)), S)
    if not nec.passed:
        rep = DesignReport(np.inf, 0, np.inf, False, nec, "necessary conditions violated")
        return Design(empty, P, rep, chain, aug)

    singular: list[int] = []
    repairs = 0
    diff = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        sched = optimal_group_gains(P, chain, aug, partition, singular)
        Pn = modal_step(P, sched, chain, aug)
        Pn, fixed = _repair_psd(Pn)
        repairs += fixed
        diff = float(np.max(np.abs(Pn - P)))
        P = Pn
        if not np.isfinite(diff) or np.trace(P, axis1=1, axis2=2).max() > trace_bound:
            rep = DesignReport(np.inf, it, diff, False, nec, "covariance diverged",
                               repairs, tuple(sorted(set(singular))))
            return Design(sched, P, rep, chain, aug)
        if diff <= tol:
            break
    sched = optimal_group_gains(P, chain, aug, partition, singular)
    P, extra, _ = _fixed_point(P, sched, chain, aug, tol * 1e-2, max_iter, trace_bound)
    residual = float(np.max(np.abs(modal_step(P, sched, chain, aug) - P)))
    gamma = performance_index(P, chain.pi, aug.Cx)
    feasible = bool(np.isfinite(gamma) and residual <= tol
                    and np.trace(P, axis1=1, axis2=2).max() <= trace_bound)
    msg = "converged" if feasible else (
        "iteration cap reached" if diff > tol else "fixed-gain polish did not converge")
    rep = DesignReport(gamma if feasible else np.inf, it + extra, residual, feasible, nec, msg,
                       repairs, tuple(sorted(set(singular))))
    if repairs:
        log.warning("PSD repair applied %d times", repairs)
    return Design(sched, P, rep, chain, aug)


# --------------------------------------------------------------------------
# complexity reduction

def _group_sums(design: Design):
    num, den = _state_terms(design.P, design.chain, design.aug)
    G = _group_matrix(design.schedule.partition, design.chain.size)
    num_g = np.einsum("gj,jab->gab", G, num)
    den_g = np.einsum("gj,jab->gab", G, den)
    active = (G @ design.chain.psi.astype(float)) > 0
    return num_g, den_g, active


def _lambda(num_g, den_g, active, gi, gj) -> np.ndarray:
    a = num_g[gi] + num_g[gj]
    b = den_g[gi] + den_g[gj]
    act = active[gi] | active[gj]
    K, _ = _solve_groups(a[None], b[None], act[None])
    # stationarity of the merged problem: group i's gradient at the shared gain
    return num_g[gi] - K[0] @ den_g[gi]


def gain_pair_sensitivity(design: Design, gi: int, gj: int) -> float:
    """Norm of the multiplier of the constraint ``L_gi = L_gj``.

    ``gi`` and ``gj`` index groups of ``design.schedule.partition``. The
    multiplier is evaluated at the design's own covariances, i.e. before
    the constraint is imposed.
    """
    if gi == gj:
        raise ValueError("need two different groups")
    num_g, den_g, active = _group_sums(design)
    return float(np.linalg.norm(_lambda(num_g, den_g, active, gi, gj)))


def pair_sensitivities(design: Design) -> dict[tuple[int, int], float]:
    num_g, den_g, active = _group_sums(design)
    n = len(design.schedule.partition)
    return {(i, j): float(np.linalg.norm(_lambda(num_g, den_g, active, i, j)))
            for i in range(n) for j in range(i + 1, n)}


@dataclass
class TrajectoryPoint:
    partition: Partition
    gamma: float
    gain_count: int
    merged: tuple[int, int] | None = None
    lam: float | None = None
    design: Design | None = field(default=None, repr=False)


def reduce_complexity(aug: AugmentedModel, chain: MarkovChain,
                      target_gain_count: int | None = None, max_gamma: float | None = None,
                      partition: Partition | None = None, **solve_kw) -> list[TrajectoryPoint]:
    """Greedy agglomeration of gain groups guided by the multiplier norms.

    Starts from ``partition`` (default: one group per state) and merges the
    pair with the smallest multiplier norm, re-solving the design after each
    merge. Stops when the gain count reaches ``target_gain_count``, a single
    group is left, or ``gamma`` exceeds ``max_gamma`` (that last merge is
    dropped from the trajectory).
    """
    partition = full_partition(chain) if partition is None else _canonical(partition)
    design = solve_design(aug, chain, partition, **solve_kw)
    if not design.report.feasible:
        raise ValueError(f"initial design infeasible: {design.report.message}")
    traj = [TrajectoryPoint(partition, design.gamma, design.schedule.gain_count, design=design)]
    while len(partition) > 1:
        if target_gain_count is not None and traj[-1].gain_count <= target_gain_count:
            break
        lams = pair_sensitivities(design)
        (gi, gj), lam = min(lams.items(), key=lambda kv: (kv[1], kv[0]))
        merged = partition[gi] + partition[gj]
        new_partition = _canonical([g for k, g in enumerate(partition) if k not in (gi, gj)] + [merged])
        new_design = solve_design(aug, chain, new_partition, **solve_kw)
        if not new_design.report.feasible:
            break
        if max_gamma is not None and new_design.gamma > max_gamma:
            break
        partition, design = new_partition, new_design
        traj.append(TrajectoryPoint(partition, design.gamma, design.schedule.gain_count,
                                    (gi, gj), lam, new_design))
    return traj
