"""Measurement instruments: stable rank, over-smoothing, entropy, gate stats.

Conventions fixed here (they are not unique in the literature):

* MAD is the mean pairwise cosine distance over all unordered node pairs,
  not restricted to graph neighborhoods; rows with norm < 1e-12 are
  excluded from the pairing because cosine distance is undefined there.
* Attention entropy uses the natural logarithm and ``0 log 0 = 0``; the
  per-layer value is the arithmetic mean over heads.
* Gate statistics can be pooled over the full element distribution
  (layers x heads x entries) or reported per layer; fractions use strict
  thresholds ``< 0.1`` and ``> 0.9``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .gps import LayerTrace
from .numeric import top_singular_value

__all__ = [
    "GateStats",
    "DepthProfile",
    "RankBoundReport",
    "stable_rank",
    "mad",
    "attention_entropy",
    "gate_stats",
    "rank_bound_holds",
    "depth_profile",
    "trace_gate_values",
    "write_diagnostics_csv",
    "diagnostics_report",
    "write_diagnostics_json",
]

GATE_LOW = 0.1
GATE_HIGH = 0.9
_ZERO_ROW_TOL = 1e-12


@dataclass
class GateStats:
    mean: float
    std: float
    frac_below: float
    frac_above: float
    count: int


@dataclass
class DepthProfile:
    mad: list[float]
    entropy: list[float]


@dataclass
class RankBoundReport:
    srank_av: float
    srank_a: float
    srank_v: float
    holds: bool


def stable_rank(m) -> float:
    """||M||_F^2 / ||M||_2^2 — a continuous effective-rank surrogate."""
    m = np.asarray(m, dtype=np.float64)
    top = top_singular_value(m)  # rejects the zero matrix
    fro2 = float(np.sum(m * m))
    return fro2 / (top * top)


def mad(h) -> float:
    """Mean pairwise cosine distance between rows (all unordered pairs)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise ValueError(f"mad needs an n x d matrix with n >= 2, got shape {h.shape}")
    norms = np.linalg.norm(h, axis=1)
    keep = norms > _ZERO_ROW_TOL
    if keep.sum() < 2:
        raise ValueError("mad undefined: fewer than 2 nonzero rows")
    unit = h[keep] / norms[keep, None]
    sim = unit @ unit.T
    iu = np.triu_indices(unit.shape[0], k=1)
    return float(np.mean(1.0 - sim[iu]))


def attention_entropy(a) -> float:
    """Average per-row Shannon entropy (natural log) of a row-stochastic matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"attention matrix must be 2-D, got shape {a.shape}")
    sums = a.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(a < 0.0):
        raise ValueError("invalid attention matrix: rows must be non-negative and sum to 1")
    plogp = np.where(a > 0.0, a * np.log(np.where(a > 0.0, a, 1.0)), 0.0)
    return float(np.mean(-plogp.sum(axis=1)))


def _stats_of(values: np.ndarray) -> GateStats:
    flat = np.asarray(values, dtype=np.float64).ravel()
    return GateStats(
        mean=float(flat.mean()),
        std=float(flat.std()),
        frac_below=float(np.mean(flat < GATE_LOW)),
        frac_above=float(np.mean(flat > GATE_HIGH)),
        count=int(flat.size),
    )


def gate_stats(gates, pooling: str = "pooled"):
    """Gate-activation statistics.

    ``gates`` is a list with one array of gate values per layer (any
    shape; heads may be stacked). ``pooled`` flattens everything into one
    element distribution; ``per_layer`` returns one GateStats per entry.
    """
    if not gates:
        raise ValueError("gate_stats needs at least one layer of gate values")
    if pooling == "pooled":
        return _stats_of(np.concatenate([np.ravel(g) for g in gates]))
    if pooling == "per_layer":
        return [_stats_of(g) for g in gates]
    raise ValueError(f"pooling must be 'pooled' or 'per_layer', got {pooling!r}")


def rank_bound_holds(a, v, tol: float = 1e-9) -> RankBoundReport:
    """Check srank(AV) <= min(srank(A), srank(V)) + tol for row-stochastic A."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0.0) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("a must be row-stochastic (non-negative rows summing to 1)")
    sr_a = stable_rank(a)
    sr_v = stable_rank(v)
    sr_av = stable_rank(a @ np.asarray(v, dtype=np.float64))
    return RankBoundReport(
        srank_av=sr_av, srank_a=sr_a, srank_v=sr_v,
        holds=bool(sr_av <= min(sr_a, sr_v) + tol),
    )


def trace_gate_values(trace: LayerTrace) -> list[np.ndarray]:
    """Per-layer gate values stacked over heads; empty list if ungated."""
    out = []
    for heads in trace.head_traces:
        vals = [ht.gate for ht in heads if ht.gate is not None]
        if vals:
            out.append(np.concatenate([v.ravel() for v in vals]))
    return out


def depth_profile(trace: LayerTrace) -> DepthProfile:
    """Per-layer MAD of hidden states and head-averaged attention entropy."""
    mads = [mad(h) for h in trace.hidden]
    ents = [
        float(np.mean([attention_entropy(ht.attention) for ht in heads]))
        for heads in trace.head_traces
    ]
    return DepthProfile(mad=mads, entropy=ents)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_diagnostics_csv(path, profile: DepthProfile, per_layer, pooled) -> None:
    """CSV layout: one row per layer plus a 'pooled' summary row.

    Gate columns are 'nan' for ungated models. ``per_layer``/``pooled`` may
    be None in that case.
    """
    lines = ["layer,mad,entropy,gate_mean,gate_std,gate_below,gate_above"]
    for i, (m, e) in enumerate(zip(profile.mad, profile.entropy)):
        gs = per_layer[i] if per_layer else None
        cells = [str(i), _fmt(m), _fmt(e)]
        if gs is None:
            cells += ["nan"] * 4
        else:
            cells += [_fmt(gs.mean), _fmt(gs.std), _fmt(gs.frac_below), _fmt(gs.frac_above)]
        lines.append(",".join(cells))
    if pooled is not None:
        lines.append(",".join([
            "pooled", "nan", "nan",
            _fmt(pooled.mean), _fmt(pooled.std),
            _fmt(pooled.frac_below), _fmt(pooled.frac_above),
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def diagnostics_report(profile: DepthProfile, per_layer, pooled) -> dict:
    return {
        "layers": [
            {
                "layer": i,
                "mad": profile.mad[i],
                "entropy": profile.entropy[i],
                "gate": asdict(per_layer[i]) if per_layer else None,
            }
            for i in range(len(profile.mad))
        ],
        "pooled_gate": asdict(pooled) if pooled is not None else None,
    }


def write_diagnostics_json(path, profile: DepthProfile, per_layer, pooled) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(diagnostics_report(profile, per_layer, pooled), fh, indent=2, sort_keys=True)
        fh.write("\n")
