"""Hierarchical cell-graph classifier.

Each stage runs an embedding branch (Adaptive GraphSage, or plain GraphSage
for the ablation) and an assignment branch on the same input.  The soft
assignment ``S`` pools node embeddings into cluster features ``S^T M`` and
the adjacency into ``S^T A S``, which is re-weighted before the next stage.
Every stage contributes a column-wise max readout of its cluster features;
the concatenated readouts feed a linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import autograd as ag
from .features import FEATURE_SETS


@dataclass
class ModelConfig:
    k_hops: int = 3
    hidden_dims: tuple = (32, 32)
    lstm_hidden: int = 16
    cluster_sizes: tuple = (16, 4)
    n_classes: int = 3
    dropout: float = 0.2
    conv: str = "ags"  # "ags" (adaptive) or "gs" (concatenation)
    feature_set: str = "both"
    p: float = 0.4

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.cluster_sizes = tuple(int(c) for c in self.cluster_sizes)
        if self.k_hops < 1:
            raise ValueError("k_hops must be >= 1")
        if not self.cluster_sizes:
            raise ValueError("at least one clustering stage is required")
        if len(self.hidden_dims) != len(self.cluster_sizes):
            raise ValueError("hidden_dims and cluster_sizes need one entry per stage")
        if any(c < 1 for c in self.cluster_sizes):
            raise ValueError("cluster sizes must be positive")
        if any(b >= a for a, b in zip(self.cluster_sizes, self.cluster_sizes[1:])):
            raise ValueError("cluster_sizes must be strictly decreasing")
        if self.conv not in ("ags", "gs"):
            raise ValueError(f"conv must be 'ags' or 'gs', got {self.conv!r}")
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {sorted(FEATURE_SETS)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")

    @property
    def n_stages(self):
        return len(self.cluster_sizes)

    @property
    def n_inputs(self):
        return len(FEATURE_SETS[self.feature_set])

    def embed_width(self, stage):
        h = self.hidden_dims[stage]
        return h if self.conv == "ags" else self.k_hops * h


@dataclass
class StageOutput:
    embedding: ag.Tensor
    assignment: ag.Tensor
    pooled: ag.Tensor
    pooled_adjacency: ag.Tensor
    readout: ag.Tensor
    depth_scores: ag.Tensor | None = None
    extras: dict = field(default_factory=dict)


def init_params(cfg: ModelConfig, rng) -> ag.ParamStore:
    store = ag.ParamStore()
    d_in = cfg.n_inputs
    for s in range(cfg.n_stages):
        hid = cfg.hidden_dims[s]
        for branch in ("embed", "assign"):
            width = d_in
            for l in range(cfg.k_hops):
                store.add(f"stage{s}.{branch}.conv{l}", ag.glorot_uniform(rng, width, hid))
                width = hid
        if cfg.conv == "ags":
            lh = cfg.lstm_hidden
            for direction in ("fwd", "bwd"):
                pre = f"stage{s}.embed.lstm_{direction}"
                store.add(f"{pre}.w_x", ag.glorot_uniform(rng, hid, 4 * lh))
                store.add(f"{pre}.w_h", ag.glorot_uniform(rng, lh, 4 * lh))
                bias = np.zeros((1, 4 * lh))
                bias[0, lh:2 * lh] = 1.0
                store.add(f"{pre}.b", bias)
            store.add(f"stage{s}.embed.attention", ag.glorot_uniform(rng, 2 * lh, 1))
        c = cfg.cluster_sizes[s]
        store.add(f"stage{s}.assign.linear.w", ag.glorot_uniform(rng, cfg.k_hops * hid, c))
        store.add(f"stage{s}.assign.linear.b", np.zeros((1, c)))
        d_in = cfg.embed_width(s)
    readout_width = sum(cfg.embed_width(s) for s in range(cfg.n_stages))
    store.add("classifier.w", ag.glorot_uniform(rng, readout_width, cfg.n_classes))
    store.add("classifier.b", np.zeros((1, cfg.n_classes)))
    return store


def count_params(store) -> int:
    return store.count()


def propagate(adj, h):
    """``A' H`` for a constant adjacency (array or sparse) or a stacked-block tensor."""
    if isinstance(adj, ag.Tensor):
        return ag.block_matmul(adj, h)
    return ag.const_matmul(adj, h)


def graph_conv(h, adj, w):
    """ReLU((A' H) W): mean aggregation over the self-inclusive neighbourhood."""
    return ag.relu(ag.matmul(propagate(adj, h), w))


def conv_stack(h, adj, weights):
    outs = []
    for w in weights:
        h = graph_conv(h, adj, w)
        outs.append(h)
    return outs


def bilstm_over_depth(seq, fwd, bwd):
    """Run a bidirectional LSTM across the depth sequence of every node.

    ``fwd`` and ``bwd`` are ``(w_x, w_h, b)`` triples.  Returns one
    ``[forward | backward]`` hidden matrix per depth.
    """
    n = seq[0].shape[0]
    lh = fwd[1].shape[0]
    k = len(seq)
    hc = ag.Tensor(np.zeros((n, 2 * lh)))
    forward = []
    for l in range(k):
        hc = ag.lstm_cell(seq[l], hc, *fwd)
        forward.append(ag.slice_cols(hc, 0, lh))
    hc = ag.Tensor(np.zeros((n, 2 * lh)))
    backward = [None] * k
    for l in reversed(range(k)):
        hc = ag.lstm_cell(seq[l], hc, *bwd)
        backward[l] = ag.slice_cols(hc, 0, lh)
    return [ag.concat_cols([f, b]) for f, b in zip(forward, backward)]


def depth_attention(hs, fused, att):
    """Softmax over depth of a linear score per node, then the weighted sum of ``hs``."""
    scores = ag.softmax_rows(ag.concat_cols([ag.matmul(fb, att) for fb in fused]))
    m = None
    for l, h in enumerate(hs):
        term = ag.scale_rows(ag.slice_cols(scores, l, l + 1), h)
        m = term if m is None else ag.add(m, term)
    return m, scores


def adaptive_graphsage(h, adj, store, prefix, k_hops):
    hs = conv_stack(h, adj, [store[f"{prefix}.conv{l}"] for l in range(k_hops)])
    lstm = [tuple(store[f"{prefix}.lstm_{d}.{n}"] for n in ("w_x", "w_h", "b")) for d in ("fwd", "bwd")]
    fused = bilstm_over_depth(hs, *lstm)
    return depth_attention(hs, fused, store[f"{prefix}.attention"])


def graphsage(h, adj, store, prefix, k_hops):
    hs = conv_stack(h, adj, [store[f"{prefix}.conv{l}"] for l in range(k_hops)])
    return hs[0] if k_hops == 1 else ag.concat_cols(hs)


def pool(s, m, adj, sizes=None):
    """Cluster features S^T M and cluster adjacency S^T A S, per graph segment.

    With several graphs stacked, ``sizes`` gives their node counts and both
    results stack one c-row block per graph.
    """
    return ag.segment_tmatmul(s, m, sizes), ag.segment_tmatmul(s, propagate(adj, s), sizes)


def cluster_stage(h, adj, store, cfg, stage, assignment=None, sizes=None):
    """One embed/assign/pool stage.

    ``adj`` is a constant matrix (first stage) or a tensor of stacked square
    blocks.  ``assignment`` overrides the learned ``S`` with a fixed matrix;
    the pooling algebra checks use it.
    """
    prefix = f"stage{stage}"
    scores = None
    if cfg.conv == "ags":
        m, scores = adaptive_graphsage(h, adj, store, f"{prefix}.embed", cfg.k_hops)
    else:
        m = graphsage(h, adj, store, f"{prefix}.embed", cfg.k_hops)
    if assignment is None:
        z = graphsage(h, adj, store, f"{prefix}.assign", cfg.k_hops)
        logits = ag.add_row(ag.matmul(z, store[f"{prefix}.assign.linear.w"]), store[f"{prefix}.assign.linear.b"])
        s = ag.softmax_rows(logits)
    else:
        s = ag.as_tensor(assignment)
    pooled, pooled_adj = pool(s, m, adj, sizes)
    return StageOutput(
        embedding=m,
        assignment=s,
        pooled=pooled,
        pooled_adjacency=pooled_adj,
        readout=ag.max_over_rows(pooled, s.shape[1]),
        depth_scores=scores,
    )


def input_features(features, cfg):
    return np.asarray(features, dtype=np.float64)[:, FEATURE_SETS[cfg.feature_set]]


def forward_batch(graphs, store, cfg, training=False, rng=None, return_stages=False):
    """Logits (B x n_classes) for B graphs with normalised features.

    The graphs are stacked into one block-diagonal graph, so the result
    equals B separate forward passes up to rounding; dropout masks for the
    whole batch come from one draw of ``rng``.
    """
    if not graphs:
        raise ValueError("forward_batch needs at least one graph")
    sizes = [g.n for g in graphs]
    if min(sizes) == 0:
        raise ag.EmptyGraphError("cannot classify a graph with no nodes")
    h = ag.Tensor(np.vstack([input_features(g.features, cfg) for g in graphs]))
    if len(graphs) == 1:
        adj = graphs[0].reweighted
    else:
        adj = sparse.block_diag([sparse.csr_matrix(g.reweighted) for g in graphs], format="csr")
    stages = []
    for s in range(cfg.n_stages):
        h = ag.dropout(h, cfg.dropout, training, rng)
        out = cluster_stage(h, adj, store, cfg, s, sizes=sizes)
        stages.append(out)
        h = out.pooled
        adj = ag.reweight_dense(out.pooled_adjacency, cfg.p)
        sizes = [cfg.cluster_sizes[s]] * len(graphs)
    readout = stages[0].readout if len(stages) == 1 else ag.concat_cols([o.readout for o in stages])
    logits = ag.add_row(ag.matmul(readout, store["classifier.w"]), store["classifier.b"])
    if return_stages:
        return logits, stages
    return logits


def forward(graph, store, cfg, training=False, rng=None, return_stages=False):
    """Logits (1 x n_classes) for one graph with normalised features.

    ``graph`` needs ``features`` (n x 18) and ``reweighted`` (n x n).
    """
    return forward_batch([graph], store, cfg, training, rng, return_stages)


def predict_proba(graph, store, cfg):
    logits = forward(graph, store, cfg).data[0]
    e = np.exp(logits - logits.max())
    return e / e.sum()
