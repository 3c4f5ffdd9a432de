"""Edge-contraction pooling: scoring, thresholded merging, regularizer.

Each pooling layer scores the surviving edges with a symmetrized sigmoid
function, normalizes surviving scores per node, contracts the connected
components of the surviving subgraph into supernodes, and aggregates
gated node features into supernode features. Stacking layers yields a
multiscale hierarchy whose final representation is aligned with the
propagated one through the prediction-correction loss.

Discrete survivor selection is constant under differentiation: gradients
flow through the surviving scores' values, never through the selection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .data import build_normalized_adjacency
from .errors import ShapeMismatch
from .sparse import SparseMatrix

GATE_FLOOR = 1e-6
SPREAD_CLAMP = 10.0


@dataclass
class PoolLayerParams:
    w: Value
    a: Value


@dataclass
class PoolingParams:
    """Independent per-layer transform and scoring vector."""

    layers: list

    def items(self):
        out = []
        for idx, layer in enumerate(self.layers):
            out.append((f"pool.{idx}.w", layer.w))
            out.append((f"pool.{idx}.a", layer.a))
        return out


def init_pooling_params(
    hidden: int, num_layers: int, rng: np.random.Generator
) -> PoolingParams:
    layers = []
    for _ in range(num_layers):
        lim_w = np.sqrt(6.0 / (2 * hidden))
        lim_a = np.sqrt(6.0 / (2 * hidden + 1))
        layers.append(
            PoolLayerParams(
                w=ad.parameter(rng.uniform(-lim_w, lim_w, size=(hidden, hidden))),
                a=ad.parameter(rng.uniform(-lim_a, lim_a, size=(2 * hidden, 1))),
            )
        )
    return PoolingParams(layers=layers)


@dataclass
class MergeMap:
    """Surjection from fine nodes onto contiguous supernode indices."""

    assignment: np.ndarray
    num_supernodes: int


@dataclass
class NormalizedScores:
    """Directed normalized scores for canonical edges (i, j) with i < j.

    at_i[e] is the score of edge e divided by the surviving-edge count of
    its lower endpoint; at_j[e] uses the higher endpoint's count. Edges
    below threshold are zero on both sides.
    """

    at_i: Value
    at_j: Value
    surviving: np.ndarray
    counts: np.ndarray


@dataclass
class LayerTrace:
    scores: Value
    norm: NormalizedScores
    merge: MergeMap
    coarse_edges: list
    coarse_adj: SparseMatrix
    coarse_z: Value


@dataclass
class PoolingTrace:
    layers: list
    composed_map: np.ndarray
    z_cor: Value

    @property
    def effective_depth(self) -> int:
        return len(self.layers)

    def summary(self) -> dict:
        """Per-layer counts and score histograms for inspection dumps."""
        rows = []
        for level, lt in enumerate(self.layers):
            hist, _ = np.histogram(lt.scores.data.ravel(), bins=10, range=(0.0, 1.0))
            rows.append(
                {
                    "layer": level + 1,
                    "nodes_in": int(len(lt.merge.assignment)),
                    "nodes_out": int(lt.merge.num_supernodes),
                    "edges_in": int(lt.scores.data.shape[0]),
                    "edges_surviving": int(lt.norm.surviving.sum()),
                    "score_histogram": hist.tolist(),
                }
            )
        return {"effective_depth": self.effective_depth, "layers": rows}


def score_edges(z: Value, edges, layer: PoolLayerParams) -> Value:
    """Symmetrized per-edge score in (0, 1).

    For edge (i, j) the two sigmoid terms are evaluated with the lower
    endpoint first and summed in that fixed order, so the score does not
    depend on how the edge was written down.
    """
    if z.data.shape[1] != layer.w.data.shape[0]:
        raise ShapeMismatch("score_edges", z.data.shape, layer.w.data.shape)
    idx_i = [e[0] for e in edges]
    idx_j = [e[1] for e in edges]
    p = ad.matmul(z, layer.w)
    pi = ad.gather_rows(p, idx_i)
    pj = ad.gather_rows(p, idx_j)
    s_ij = ad.sigmoid(ad.matmul(ad.concat_cols(pi, pj), layer.a))
    s_ji = ad.sigmoid(ad.matmul(ad.concat_cols(pj, pi), layer.a))
    return ad.scale(ad.add(s_ij, s_ji), 0.5)


def normalize_scores(
    scores: Value, edges, num_nodes: int, s_thre: float
) -> NormalizedScores:
    """Zero out sub-threshold scores, divide the rest by per-node counts.

    The count of a node is its number of surviving incident edges; nodes
    with no surviving edge contribute all-zero entries, never a division
    by zero. The threshold indicator is constant under differentiation.
    """
    if not (0.0 < s_thre < 1.0):
        raise ValueError(f"s_thre must lie in (0, 1), got {s_thre}")
    raw = scores.data.ravel()
    surviving = raw >= s_thre
    counts = np.zeros(num_nodes, dtype=np.int64)
    for e, (i, j) in enumerate(edges):
        if surviving[e]:
            counts[i] += 1
            counts[j] += 1

    coeff_i = np.zeros((len(edges), 1))
    coeff_j = np.zeros((len(edges), 1))
    for e, (i, j) in enumerate(edges):
        if surviving[e]:
            coeff_i[e, 0] = 1.0 / counts[i]
            coeff_j[e, 0] = 1.0 / counts[j]

    return NormalizedScores(
        at_i=ad.hadamard(scores, ad.constant(coeff_i)),
        at_j=ad.hadamard(scores, ad.constant(coeff_j)),
        surviving=surviving,
        counts=counts,
    )


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _components_of_survivors(num_nodes: int, edges, surviving) -> MergeMap:
    uf = _UnionFind(num_nodes)
    for e, (i, j) in enumerate(edges):
        if surviving[e]:
            uf.union(i, j)
    assignment = np.empty(num_nodes, dtype=np.int64)
    next_id = 0
    root_to_id = {}
    for node in range(num_nodes):
        root = uf.find(node)
        if root not in root_to_id:
            root_to_id[root] = next_id
            next_id += 1
        assignment[node] = root_to_id[root]
    return MergeMap(assignment=assignment, num_supernodes=next_id)


def contract_graph(
    num_nodes: int,
    edges,
    norm: NormalizedScores,
    z: Value,
):
    """Merge connected components of the surviving subgraph.

    Supernode features are gated sums: gate_i is the sum of node i's
    directed normalized scores, floored at GATE_FLOOR for nodes with no
    surviving edge so singleton supernodes keep a live feature path.
    Coarse edges are the deduplicated images of fine edges between
    distinct supernodes.
    """
    merge = _components_of_survivors(num_nodes, edges, norm.surviving)

    idx_i = [e[0] for e in edges]
    idx_j = [e[1] for e in edges]
    gate = ad.add(
        ad.scatter_add_rows(norm.at_i, idx_i, num_nodes),
        ad.scatter_add_rows(norm.at_j, idx_j, num_nodes),
    )
    floor = np.where(norm.counts == 0, GATE_FLOOR, 0.0).reshape(-1, 1)
    gate = ad.add(gate, ad.constant(floor))
    coarse_z = ad.scatter_add_rows(
        ad.scale_rows(z, gate), merge.assignment, merge.num_supernodes
    )

    coarse_edges = sorted(
        {
            (
                min(merge.assignment[i], merge.assignment[j]),
                max(merge.assignment[i], merge.assignment[j]),
            )
            for i, j in edges
            if merge.assignment[i] != merge.assignment[j]
        }
    )
    coarse_edges = [(int(i), int(j)) for i, j in coarse_edges]
    return coarse_z, coarse_edges, merge


def hierarchical_pool(
    graph, z_input: Value, params: PoolingParams, s_thre: float, num_layers: int
) -> PoolingTrace:
    """Apply score / normalize / contract up to num_layers times.

    Stops early once at most 2 nodes remain or no edge survives the
    threshold; a layer that would not contract is not applied, so a
    trace of depth 0 returns z_input untouched.
    """
    n_cur = graph.num_nodes
    edges_cur = list(graph.edges)
    z_cur = z_input
    layers = []
    composed = np.arange(graph.num_nodes, dtype=np.int64)

    for level in range(num_layers):
        if n_cur <= 2 or not edges_cur:
            break
        scores = score_edges(z_cur, edges_cur, params.layers[level])
        norm = normalize_scores(scores, edges_cur, n_cur, s_thre)
        if not norm.surviving.any():
            break
        coarse_z, coarse_edges, merge = contract_graph(n_cur, edges_cur, norm, z_cur)
        coarse_adj = build_normalized_adjacency(merge.num_supernodes, coarse_edges)
        layers.append(
            LayerTrace(
                scores=scores,
                norm=norm,
                merge=merge,
                coarse_edges=coarse_edges,
                coarse_adj=coarse_adj,
                coarse_z=coarse_z,
            )
        )
        composed = merge.assignment[composed]
        n_cur = merge.num_supernodes
        edges_cur = coarse_edges
        z_cur = coarse_z

    return PoolingTrace(layers=layers, composed_map=composed, z_cor=z_cur)


def prediction_correction_loss(
    z_cor: Value,
    z_pre: Value,
    composed_map: np.ndarray,
    coarse_edges,
    spread_clamp: float = SPREAD_CLAMP,
) -> Value:
    """Alignment minus spread.

    The first sum runs over all fine nodes and pulls each node's
    propagated representation toward its supernode's pooled one. The
    second sum runs over deduplicated coarse edges, counted once per
    unordered pair, and pushes adjacent supernodes apart; each squared
    distance is clamped at spread_clamp before negation so the loss
    stays bounded below.
    """
    if z_cor.data.shape[1] != z_pre.data.shape[1]:
        raise ShapeMismatch("prediction_correction_loss", z_cor.data.shape, z_pre.data.shape)
    aligned = ad.gather_rows(z_cor, composed_map)
    align_term = ad.sum_all(ad.sum_sq_rows(ad.sub(aligned, z_pre)))
    if not coarse_edges:
        return align_term
    us = [e[0] for e in coarse_edges]
    vs = [e[1] for e in coarse_edges]
    d = ad.sum_sq_rows(ad.sub(ad.gather_rows(z_cor, us), ad.gather_rows(z_cor, vs)))
    cap = ad.constant(np.full((len(coarse_edges), 1), spread_clamp))
    clamped = ad.sub(cap, ad.relu(ad.sub(cap, d)))
    return ad.sub(align_term, ad.sum_all(clamped))


def total_loss(l_exp: Value, l_precor: Value, gamma: float) -> Value:
    """Classification loss plus gamma times the regularizer."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    return ad.add(l_exp, ad.scale(l_precor, gamma))
