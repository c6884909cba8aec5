"""Command-line entry point.

Exit status: 0 success, 1 infeasible problem (a report is still written),
2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass

from . import __version__
from .channel import ChannelModel, PowerPolicy, link_prob_table
from .codesign import CodesignConfig, CodesignInfeasible, greedy_codesign
from .config import ConfigError, RunConfig, load_config
from .io import design_from_dict, design_to_dict, read_json, write_json
from .markov import ChainBuilder, MarkovChain, NonErgodicChainError, require_ergodic
from .model import AugmentedModel, SystemModel, augment
from .simulate import SimConfig, simulate
from .synthesis import reduce_complexity, solve_design
from .topology import Topology

__all__ = ["main", "run_command"]

log = logging.getLogger("jumpnet")


class Infeasible(RuntimeError):
    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = payload or {}


@dataclass
class Setup:
    cfg: RunConfig
    sys: SystemModel
    top: Topology
    ch: ChannelModel
    policies: dict[str, PowerPolicy]
    aug: AugmentedModel
    beta: dict
    full: MarkovChain

    @property
    def hash(self) -> str:
        return self.cfg.config_hash()

    def chain(self) -> MarkovChain:
        try:
            chain = require_ergodic(self.full)
        except NonErgodicChainError as exc:
            raise Infeasible(f"delivery chain is not ergodic: {exc}") from None
        return chain


def _setup(args) -> Setup:
    cfg = load_config(args.config)
    args.config_hash = cfg.config_hash()
    sys_, top, ch = cfg.system_model(), cfg.topology_model(), cfg.channel_model()
    pols = cfg.policy_models(ch)
    beta = link_prob_table(ch, pols, top.edges)
    full = ChainBuilder(top, taubar=cfg.estimation.taubar).build(beta)
    return Setup(cfg, sys_, top, ch, pols, augment(sys_, top.dbar), beta, full)


def _beta_dict(beta: dict) -> dict:
    return {f"{a}->{b}": v for (a, b), v in beta.items()}


def _target(cfg: RunConfig) -> int | None:
    g = cfg.estimation.grouping
    return None if g == "full" else g.target_gain_count


def _design(st: Setup, args):
    chain = st.chain()
    kw = {"tol": args.tol, "max_iter": args.max_iter}
    design = solve_design(st.aug, chain, **kw)
    if not design.report.feasible:
        raise Infeasible(f"no stable filter design: {design.report.message}",
                         {"report": design.report.to_dict()})
    target = _target(st.cfg)
    if target is not None:
        design = reduce_complexity(st.aug, chain, target_gain_count=target, **kw)[-1].design
    return design


# ---- commands -------------------------------------------------------------

def cmd_chain(args) -> int:
    st = _setup(args)
    payload = {"beta": _beta_dict(st.beta), "chain": st.full.to_dict()}
    try:
        chain = st.chain()
        payload["reduced"] = {"size": chain.size, "origin": chain.origin.tolist(), "pi": chain.pi.tolist(),
                              "zero_gain_states": int(chain.zero_gain.sum()),
                              "max_gain_count": int(chain.size - chain.zero_gain.sum() + chain.zero_gain.any()),
                              "ergodicity": chain.report.to_dict()}
        status = 0
    except Infeasible as exc:
        payload["error"] = str(exc)
        status = 1
    write_json(args.out, payload, st.hash, "chain")
    if args.beta_csv:
        with open(args.beta_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["from", "to", "beta"])
            for (a, b), v in st.beta.items():
                w.writerow([a, b, repr(v)])
    return status


def cmd_design(args) -> int:
    st = _setup(args)
    design = _design(st, args)
    write_json(args.out, {"beta": _beta_dict(st.beta), "design": design_to_dict(design)}, st.hash, "design")
    print(f"gamma={design.gamma:.6g} gains={design.schedule.gain_count} "
          f"residual={design.report.residual:.3g}")
    return 0


def cmd_reduce(args) -> int:
    st = _setup(args)
    chain = st.chain()
    traj = reduce_complexity(st.aug, chain, target_gain_count=args.target, max_gamma=args.max_gamma,
                             tol=args.tol, max_iter=args.max_iter)
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "gain_count", "gamma", "merged_a", "merged_b", "lambda"])
        for k, p in enumerate(traj):
            a, b = p.merged if p.merged else ("", "")
            w.writerow([k, p.gain_count, repr(p.gamma), a, b, "" if p.lam is None else repr(p.lam)])
    write_json(args.out, {
        "trajectory": [{"gain_count": p.gain_count, "gamma": p.gamma, "merged": p.merged, "lambda": p.lam,
                        "partition": [list(g) for g in p.partition]} for p in traj],
        "design": design_to_dict(traj[-1].design),
    }, st.hash, "reduce")
    print(f"{traj[0].gain_count} -> {traj[-1].gain_count} gains, "
          f"gamma {traj[0].gamma:.6g} -> {traj[-1].gamma:.6g}")
    return 0


def _codesign(st: Setup, families: dict | None = None, xi=None, gamma_P=None):
    cs = st.cfg.codesign
    nodes = st.top.transmitters
    fam = dict(families) if families else {a: cs.families.get(a, "constant") for a in nodes}
    base = dict(mu={a: cs.mu.get(a, 1.0) for a in nodes}, u_max=cs.u_max, families=fam,
                xi=xi if xi is not None else cs.xi, levels={a: tuple(v) for a, v in cs.levels.items()},
                target_gain_count=_target(st.cfg))
    ceiling = gamma_P if gamma_P is not None else cs.gamma_P
    if ceiling is None:
        probe = greedy_codesign(CodesignConfig(gamma_P=math.inf, max_iter=0, **base), st.sys, st.top, st.ch)
        ceiling = cs.gamma_P_relative * probe.best.gamma
    try:
        return greedy_codesign(CodesignConfig(gamma_P=ceiling, **base), st.sys, st.top, st.ch), ceiling
    except CodesignInfeasible as exc:
        raise Infeasible(str(exc)) from None


def cmd_codesign(args) -> int:
    st = _setup(args)
    fams = {a: args.family for a in st.top.transmitters} if args.family else None
    res, ceiling = _codesign(st, fams, args.xi, args.gamma_p)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(res.to_csv())
    write_json(args.out, {"gamma_P": ceiling, **res.to_dict()}, st.hash, "codesign")
    b, i0 = res.best, res.initial
    print(f"J {i0.J:.6g} -> {b.J:.6g} ({100 * (1 - b.J / i0.J):.1f}% lower), "
          f"gamma {i0.gamma:.6g} -> {b.gamma:.6g}; stop: {res.stop_reason}")
    return 0


def cmd_simulate(args) -> int:
    st = _setup(args)
    chain = st.chain()
    if args.design:
        doc = read_json(args.design)
        design = design_from_dict(doc.get("design", doc), chain, st.aug)
    else:
        design = _design(st, args)
    sc = st.cfg.simulation
    cfg = SimConfig(steps=args.steps or sc.steps, replications=args.replications or sc.replications,
                    master_seed=sc.seed if args.seed is None else args.seed,
                    correlated_fading=args.correlated or sc.correlated_fading, burn_in=sc.burn_in,
                    batches=sc.batches, record_trace=bool(args.trace))
    stats = simulate(st.aug, st.top, st.ch, st.policies, design, cfg)
    if args.trace:
        tr = stats.trace
        senders = st.top.transmitters
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "theta", "error_norm2", "kalman_error_norm2"] + [f"u_{a}" for a in senders])
            for k in range(len(tr["k"])):
                w.writerow([tr["k"][k], tr["theta"][k], repr(tr["err2"][k]), repr(tr["kf_err2"][k])]
                           + [repr(tr["power"][k].get(a, math.nan)) for a in senders])
    payload = {"designed_gamma": design.gamma, "sim_config": cfg.__dict__, "stats": stats.to_dict()}
    write_json(args.out, payload, st.hash, "simulate")
    print(f"designed gamma={design.gamma:.6g} empirical={stats.empirical_gamma:.6g} "
          f"(se {stats.gamma_se:.2g}) kalman={stats.kalman_gamma:.6g}")
    return 0


def cmd_tradeoff(args) -> int:
    st = _setup(args)
    os.makedirs(args.out_dir, exist_ok=True)
    chain = st.chain()
    traj = reduce_complexity(st.aug, chain)
    with open(os.path.join(args.out_dir, "gamma_vs_gains.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gain_count", "gamma"])
        for p in traj:
            w.writerow([p.gain_count, repr(p.gamma)])
    for fam in args.families:
        res, _ = _codesign(st, {a: fam for a in st.top.transmitters})
        with open(os.path.join(args.out_dir, f"budget_vs_gamma_{fam}.csv"), "w", newline="") as fh:
            fh.write(res.to_csv())
    write_json(os.path.join(args.out_dir, "tradeoff.json"),
               {"families": list(args.families), "reduction_points": len(traj)}, st.hash, "tradeoff")
    return 0


# ---- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumpnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, help="run config (JSON) or bundled name")
        if out:
            sp.add_argument("--out", required=True)

    def solver(sp):
        sp.add_argument("--tol", type=float, default=1e-9)
        sp.add_argument("--max-iter", type=int, default=10_000)

    sp = sub.add_parser("chain", help="build the delivery-history chain")
    common(sp)
    sp.add_argument("--beta-csv", default=None, help="also write the link success table")
    sp.set_defaults(func=cmd_chain)

    sp = sub.add_parser("design", help="design the jump filter")
    common(sp)
    solver(sp)
    sp.set_defaults(func=cmd_design)

    sp = sub.add_parser("reduce", help="merge gains guided by multiplier norms")
    common(sp)
    solver(sp)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--target", type=int, default=None, help="stop at this gain count")
    sp.add_argument("--max-gamma", type=float, default=None)
    sp.set_defaults(func=cmd_reduce)

    sp = sub.add_parser("codesign", help="greedy power-budget reduction")
    common(sp)
    sp.add_argument("--csv", default=None)
    sp.add_argument("--family", choices=["constant", "saturated_inverse", "quantized_inverse"], default=None,
                    help="use this policy family at every node")
    sp.add_argument("--xi", type=float, default=None)
    sp.add_argument("--gamma-p", type=float, default=None)
    sp.set_defaults(func=cmd_codesign)

    sp = sub.add_parser("simulate", help="Monte Carlo validation")
    common(sp)
    solver(sp)
    sp.add_argument("--design", default=None, help="design JSON (default: design on the fly)")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--replications", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--correlated", action="store_true", help="draw link outcomes from the fading")
    sp.add_argument("--trace", default=None, help="per-step CSV for the first replication")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("tradeoff", help="CSV data for gain-count and power trade-off curves")
    common(sp, out=False)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--families", nargs="+", default=["constant", "saturated_inverse"])
    sp.set_defaults(func=cmd_tradeoff)
    return p


def run_command(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            write_json(out, {"infeasible": str(exc), **exc.payload}, getattr(args, "config_hash", ""),
                       args.command)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
