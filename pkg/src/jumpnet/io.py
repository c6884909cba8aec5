"""JSON artifacts: matrices as ``{shape, data}``, provenance header, design round trip."""

from __future__ import annotations

import json
import math
from typing import Any

import numpy as np

from . import __version__
from .markov import MarkovChain
from .model import AugmentedModel
from .synthesis import Design, DesignReport, GainSchedule

__all__ = ["matrix", "from_matrix", "write_json", "read_json", "design_to_dict", "design_from_dict"]


def matrix(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [_num(x) for x in a.ravel()]}


def from_matrix(d: dict) -> np.ndarray:
    return np.array([math.inf if x is None else x for x in d["data"]], dtype=float).reshape(d["shape"])


def _num(x: float):
    x = float(x)
    return x if math.isfinite(x) else None


def _clean(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return matrix(obj)
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: str, payload: dict, config_hash: str, command: str) -> None:
    doc = {"meta": {"config_hash": config_hash, "version": __version__, "command": command}}
    doc.update(_clean(payload))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def design_to_dict(design: Design) -> dict:
    sch = design.schedule
    return {
        "gamma": design.gamma,
        "gain_count": sch.gain_count,
        "partition": [list(g) for g in sch.partition],
        "states": design.chain.states.astype(int).tolist(),
        "origin": design.chain.origin.astype(int).tolist(),
        "pi": design.chain.pi.tolist(),
        "gains": matrix(sch.gains),
        "P": matrix(design.P),
        "expected_covariance": matrix(design.expected_covariance),
        "report": design.report.to_dict(),
    }


def design_from_dict(d: dict, chain: MarkovChain, aug: AugmentedModel) -> Design:
    """Attach stored gains to a freshly built chain, checking the state lists agree."""
    states = np.asarray(d["states"], dtype=np.uint8)
    if states.shape != chain.states.shape or not np.array_equal(states, chain.states):
        raise ValueError("design file was made for a different chain (state lists differ)")
    gains = from_matrix(d["gains"])
    if gains.ndim != 3 or gains.shape[1:] != (aug.N, aug.n_m):
        raise ValueError(f"stored gains have shape {gains.shape}, expected (*, {aug.N}, {aug.n_m})")
    partition = [tuple(int(i) for i in g) for g in d["partition"]]
    sched = GainSchedule(partition, gains, chain.size)
    rep = d.get("report", {})
    report = DesignReport(gamma=float(d["gamma"]), iterations=int(rep.get("iterations", 0)),
                          residual=float(rep.get("residual") or 0.0), feasible=bool(rep.get("feasible", True)),
                          message=rep.get("message", ""))
    return Design(sched, from_matrix(d["P"]), report, chain, aug)
