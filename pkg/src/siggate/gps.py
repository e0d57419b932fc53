"""GPS-style blocks: gated local message passing + global gated attention.

A layer computes ``s = h + MPNN(h) + MHSA(h)`` followed by the
Add -> LN -> FFN -> LN chain: ``h_next = ln2(ffn(ln1(s)) + ln1(s))``.
The local branch is a simplified edge-gated aggregator: each incoming
edge j->i contributes ``sigmoid(W_e [h_i || h_j || e_ij]) ⊙ (W_v h_j)``.

Also home to the graph text format used by the CLI:

    n d_in d_e
    <n rows of d_in node features>
    m
    <m rows: src dst [d_e edge features]>

Floats are written with 17 significant digits so round-trips are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import GateConfig, HeadTrace, MhsaParams, init_mhsa_params, siggate_mhsa
from .numeric import SeededRng, ShapeError, gaussian_matrix

__all__ = [
    "LN_EPS",
    "GraphInstance",
    "MpnnParams",
    "FfnParams",
    "LayerNormParams",
    "GpsLayerParams",
    "ModelParams",
    "LayerTrace",
    "LayerTraceEntry",
    "layer_norm",
    "mpnn_forward",
    "gps_layer_forward",
    "model_forward",
    "init_model",
    "write_graph",
    "read_graph",
]

LN_EPS = 1e-5
READOUTS = ("mean", "sum")


def _identity(x):
    return x


@dataclass
class GraphInstance:
    """One attributed graph: features, directed edges, optional extras."""

    n: int
    node_features: np.ndarray
    edges: list[tuple[int, int]]
    edge_features: np.ndarray | None = None
    attn_mask: np.ndarray | None = None

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.node_features.ndim != 2 or self.node_features.shape[0] != self.n:
            raise ShapeError(
                f"node_features must be ({self.n}, d_in), got {self.node_features.shape}"
            )
        for src, dst in self.edges:
            if not (0 <= src < self.n and 0 <= dst < self.n):
                raise ValueError(f"edge ({src}, {dst}) out of range for n={self.n}")
        if self.edge_features is not None:
            self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
            if self.edge_features.shape[0] != len(self.edges):
                raise ShapeError(
                    f"edge_features has {self.edge_features.shape[0]} rows "
                    f"for {len(self.edges)} edges"
                )
        if self.attn_mask is not None:
            self.attn_mask = np.asarray(self.attn_mask, dtype=bool)
            if self.attn_mask.shape != (self.n, self.n):
                raise ShapeError(f"attn_mask must be ({self.n}, {self.n})")
            if not np.all(np.diag(self.attn_mask)):
                raise ValueError("attn_mask diagonal must stay unmasked")

    @property
    def d_in(self) -> int:
        return self.node_features.shape[1]

    @property
    def d_e(self) -> int:
        return 0 if self.edge_features is None else self.edge_features.shape[1]


@dataclass
class MpnnParams:
    w_edge: np.ndarray  # (2d + d_e) x d
    w_val: np.ndarray  # d x d


@dataclass
class FfnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class LayerNormParams:
    scale: np.ndarray
    shift: np.ndarray


@dataclass
class GpsLayerParams:
    mpnn: MpnnParams
    attn: MhsaParams
    ffn: FfnParams
    ln1: LayerNormParams
    ln2: LayerNormParams


@dataclass
class ModelParams:
    w_in: np.ndarray
    b_in: np.ndarray
    layers: list[GpsLayerParams]
    w_head: np.ndarray
    b_head: np.ndarray
    readout: str = "mean"

    @property
    def d(self) -> int:
        return self.w_in.shape[1]


@dataclass
class LayerTraceEntry:
    hidden: np.ndarray
    head_traces: list[HeadTrace]


@dataclass
class LayerTrace:
    """Per-layer capture of a full forward pass (diagnostics input)."""

    hidden: list[np.ndarray] = field(default_factory=list)
    head_traces: list[list[HeadTrace]] = field(default_factory=list)

    def append(self, entry: LayerTraceEntry) -> None:
        self.hidden.append(entry.hidden)
        self.head_traces.append(entry.head_traces)

    def __len__(self) -> int:
        return len(self.hidden)


def layer_norm(h, scale, shift):
    """Row-wise normalization to mean 0 / variance 1 (eps 1e-5), then affine."""
    mu = ad.vmean(h, axis=1, keepdims=True)
    centered = ad.sub(h, mu)
    var = ad.vmean(ad.square(centered), axis=1, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, LN_EPS)))
    return ad.add(ad.mul(normed, scale), shift)


def mpnn_forward(g: GraphInstance, h, p: MpnnParams, *, lift=None):
    """Edge-gated local aggregation; isolated nodes receive zeros."""
    lf = lift or _identity
    d = ad.value(h).shape[1]
    want = 2 * d + g.d_e
    if p.w_edge.shape[0] != want:
        raise ShapeError(
            f"w_edge expects input width {p.w_edge.shape[0]}, "
            f"but [h_i || h_j || e_ij] has width {want}"
        )
    if p.w_val.shape[0] != d:
        raise ShapeError(f"w_val expects {p.w_val.shape[0]} features, hidden has {d}")
    if not g.edges:
        return np.zeros((g.n, p.w_val.shape[1]))
    src = np.fromiter((e[0] for e in g.edges), dtype=np.intp, count=len(g.edges))
    dst = np.fromiter((e[1] for e in g.edges), dtype=np.intp, count=len(g.edges))
    h_dst = ad.take_rows(h, dst)
    h_src = ad.take_rows(h, src)
    parts = [h_dst, h_src]
    if g.edge_features is not None:
        parts.append(g.edge_features)
    gate = ad.sigmoid(ad.matmul(ad.concat(parts, axis=1), lf(p.w_edge)))
    messages = ad.mul(gate, ad.matmul(h_src, lf(p.w_val)))
    return ad.scatter_rows(messages, dst, g.n)


def _ffn_forward(h, p: FfnParams, lift):
    lf = lift or _identity
    hidden = ad.gelu(ad.add(ad.matmul(h, lf(p.w1)), lf(p.b1)))
    return ad.add(ad.matmul(hidden, lf(p.w2)), lf(p.b2))


def gps_layer_forward(g: GraphInstance, h, p: GpsLayerParams, *,
                      lift=None, gate_override=None):
    """One block: residual sum of branches, then ln2(ffn(ln1(s)) + ln1(s))."""
    lf = lift or _identity
    local = mpnn_forward(g, h, p.mpnn, lift=lift)
    global_attn, head_traces = siggate_mhsa(
        h, p.attn, g.attn_mask, lift=lift, gate_override=gate_override
    )
    s = ad.add(ad.add(h, local), global_attn)
    t = layer_norm(s, lf(p.ln1.scale), lf(p.ln1.shift))
    h_next = layer_norm(
        ad.add(_ffn_forward(t, p.ffn, lift), t), lf(p.ln2.scale), lf(p.ln2.shift)
    )
    entry = LayerTraceEntry(hidden=np.asarray(ad.value(h_next)), head_traces=head_traces)
    return h_next, entry


def model_forward(g: GraphInstance, model: ModelParams, *, lift=None, gate_override=None):
    """Full stack: input projection, L layers, pooling, linear head.

    Returns ``(prediction, trace)``; the prediction is a length-``out_dim``
    vector (an autodiff node when ``lift`` is given).
    """
    if g.n == 0:
        raise ValueError("empty graph: model_forward requires n >= 1")
    if not model.layers:
        raise ValueError("model needs at least one layer")
    if model.readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}, got {model.readout!r}")
    lf = lift or _identity
    h = ad.add(ad.matmul(g.node_features, lf(model.w_in)), lf(model.b_in))
    trace = LayerTrace()
    for layer in model.layers:
        h, entry = gps_layer_forward(g, h, layer, lift=lift, gate_override=gate_override)
        trace.append(entry)
    if model.readout == "mean":
        pooled = ad.vmean(h, axis=0, keepdims=True)
    else:
        pooled = ad.vsum(h, axis=0, keepdims=True)
    pred = ad.add(ad.matmul(pooled, lf(model.w_head)), lf(model.b_head))
    return ad.reshape(pred, (-1,)), trace


def init_model(rng: SeededRng, *, d_in: int, d: int, n_heads: int, n_layers: int,
               gate: GateConfig, d_ff: int | None = None, d_e: int = 0,
               readout: str = "mean", out_dim: int = 1,
               gate_weight_std: float | None = None) -> ModelParams:
    """Seeded model init. ``gate_weight_std=0.0`` zeroes the gate projections
    so fresh gates sit exactly at ``act(bias_init)``."""
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    if readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}, got {readout!r}")
    d_ff = 2 * d if d_ff is None else d_ff
    w_in = gaussian_matrix(rng, d_in, d, 1.0 / np.sqrt(d_in))
    b_in = np.zeros(d)
    layers = []
    for _ in range(n_layers):
        attn = init_mhsa_params(rng, d, n_heads, gate, gate_weight_std=gate_weight_std)
        mpnn = MpnnParams(
            w_edge=gaussian_matrix(rng, 2 * d + d_e, d, 1.0 / np.sqrt(2 * d + d_e)),
            w_val=gaussian_matrix(rng, d, d, 1.0 / np.sqrt(d)),
        )
        ffn = FfnParams(
            w1=gaussian_matrix(rng, d, d_ff, 1.0 / np.sqrt(d)),
            b1=np.zeros(d_ff),
            w2=gaussian_matrix(rng, d_ff, d, 1.0 / np.sqrt(d_ff)),
            b2=np.zeros(d),
        )
        layers.append(
            GpsLayerParams(
                mpnn=mpnn,
                attn=attn,
                ffn=ffn,
                ln1=LayerNormParams(np.ones(d), np.zeros(d)),
                ln2=LayerNormParams(np.ones(d), np.zeros(d)),
            )
        )
    w_head = gaussian_matrix(rng, d, out_dim, 1.0 / np.sqrt(d))
    b_head = np.zeros(out_dim)
    return ModelParams(w_in=w_in, b_in=b_in, layers=layers,
                       w_head=w_head, b_head=b_head, readout=readout)


# ---------------------------------------------------------------------------
# Graph text format
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_graph(g: GraphInstance, path) -> None:
    lines = [f"{g.n} {g.d_in} {g.d_e}"]
    for row in g.node_features:
        lines.append(" ".join(_fmt(x) for x in row))
    lines.append(str(len(g.edges)))
    for i, (src, dst) in enumerate(g.edges):
        parts = [str(src), str(dst)]
        if g.edge_features is not None:
            parts.extend(_fmt(x) for x in g.edge_features[i])
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph(path) -> GraphInstance:
    with open(path, "r", encoding="utf-8") as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    try:
        pos = 0
        n, d_in, d_e = (int(t) for t in raw[pos].split())
        pos += 1
        feats = np.empty((n, d_in))
        for i in range(n):
            row = [float(t) for t in raw[pos].split()]
            if len(row) != d_in:
                raise ValueError(f"node row {i} has {len(row)} values, expected {d_in}")
            feats[i] = row
            pos += 1
        m = int(raw[pos])
        pos += 1
        edges = []
        edge_feats = np.empty((m, d_e)) if d_e else None
        for i in range(m):
            toks = raw[pos].split()
            if len(toks) != 2 + d_e:
                raise ValueError(f"edge row {i} has {len(toks)} tokens, expected {2 + d_e}")
            edges.append((int(toks[0]), int(toks[1])))
            if d_e:
                edge_feats[i] = [float(t) for t in toks[2:]]
            pos += 1
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed graph file {path}: {exc}") from exc
    return GraphInstance(n=n, node_features=feats, edges=edges, edge_features=edge_feats)
