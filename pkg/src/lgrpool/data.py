"""TU-format graph-classification datasets: parsing, adjacency, splits, batches.

Expected directory layout for a dataset called NAME:

    NAME_A.txt                comma-separated 1-indexed edge endpoints,
                              one directed edge per line
    NAME_graph_indicator.txt  graph id (1-indexed) per node, one per line
    NAME_graph_labels.txt     one label per graph
    NAME_node_labels.txt      optional, integer node label per node
    NAME_node_attributes.txt  optional, comma-separated floats per node

Node features are one-hot node labels, concatenated with the continuous
attributes when both files exist, and a single constant-1 column when
neither exists.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptySplit, ParseError
from .sparse import SparseMatrix


def build_normalized_adjacency(num_nodes: int, edges) -> SparseMatrix:
    """Symmetric normalized adjacency with self-loops.

    Entry (i, j) is 1/sqrt(d_i * d_j) where d counts the self-loop, so
    every row sum is positive and the spectral radius is at most 1.
    Isolated nodes get a single diagonal entry of 1.
    """
    deg = np.ones(num_nodes, dtype=np.float64)
    for i, j in edges:
        deg[i] += 1.0
        deg[j] += 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    rows = list(range(num_nodes))
    cols = list(range(num_nodes))
    vals = [inv_sqrt[i] * inv_sqrt[i] for i in range(num_nodes)]
    for i, j in edges:
        w = inv_sqrt[i] * inv_sqrt[j]
        rows.extend((i, j))
        cols.extend((j, i))
        vals.extend((w, w))
    return SparseMatrix.from_coo(rows, cols, vals, (num_nodes, num_nodes))


@dataclass
class Graph:
    """One undirected graph with features, label, and normalized adjacency.

    Edges are stored deduplicated with i < j and no self-loops; self-loops
    exist only inside adj_norm.
    """

    num_nodes: int
    edges: list
    features: np.ndarray
    label: int
    adj_norm: SparseMatrix
    node_labels: list | None = None
    node_attributes: np.ndarray | None = None

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass
class GraphDataset:
    graphs: list
    num_classes: int
    feature_dim: int
    name: str

    def __len__(self) -> int:
        return len(self.graphs)

    def summary(self) -> dict:
        n = len(self.graphs)
        return {
            "name": self.name,
            "graphs": n,
            "classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "avg_nodes": sum(g.num_nodes for g in self.graphs) / n,
            "avg_edges": sum(g.num_edges for g in self.graphs) / n,
        }

    def subset(self, indices, name_suffix: str = "") -> "GraphDataset":
        return GraphDataset(
            graphs=[self.graphs[i] for i in indices],
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            name=self.name + name_suffix,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/val/test partition request."""

    seed: int
    fractions: tuple = (0.8, 0.1, 0.1)


def _read_lines(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise ParseError(f"missing mandatory file: {path}") from exc


def _read_optional(path: str):
    if not os.path.isfile(path):
        return None
    return _read_lines(path)


def parse_tu_dataset(dir_path: str, name: str) -> GraphDataset:
    """Parse a TU-format directory into a 0-indexed, deduplicated dataset."""
    prefix = os.path.join(dir_path, name + "_")
    indicator = _read_lines(prefix + "graph_indicator.txt")
    edge_lines = _read_lines(prefix + "A.txt")
    label_lines = _read_lines(prefix + "graph_labels.txt")
    node_label_lines = _read_optional(prefix + "node_labels.txt")
    node_attr_lines = _read_optional(prefix + "node_attributes.txt")

    num_nodes_total = len(indicator)
    num_graphs = len(label_lines)
    if num_graphs == 0:
        raise ParseError(f"{prefix}graph_labels.txt: no graphs")

    graph_of_node = np.empty(num_nodes_total, dtype=np.int64)
    for ln_no, raw in enumerate(indicator):
        gid = int(raw)
        if gid < 1 or gid > num_graphs:
            raise ParseError(
                f"{prefix}graph_indicator.txt line {ln_no + 1}: "
                f"graph id {gid} out of range"
            )
        graph_of_node[ln_no] = gid - 1

    nodes_per_graph = np.bincount(graph_of_node, minlength=num_graphs)
    for gid in range(num_graphs):
        if nodes_per_graph[gid] == 0:
            raise ParseError(f"graph {gid + 1} has zero nodes")
    first_node = np.zeros(num_graphs, dtype=np.int64)
    first_node[1:] = np.cumsum(nodes_per_graph)[:-1]

    edges_per_graph = [set() for _ in range(num_graphs)]
    for ln_no, raw in enumerate(edge_lines):
        parts = raw.split(",")
        if len(parts) != 2:
            raise ParseError(f"{prefix}A.txt line {ln_no + 1}: expected 'i, j'")
        u, v = int(parts[0]), int(parts[1])
        if u < 1 or u > num_nodes_total or v < 1 or v > num_nodes_total:
            raise ParseError(
                f"{prefix}A.txt line {ln_no + 1}: node id out of range"
            )
        u -= 1
        v -= 1
        if u == v:
            continue
        gu, gv = graph_of_node[u], graph_of_node[v]
        if gu != gv:
            raise ParseError(
                f"{prefix}A.txt line {ln_no + 1}: edge crosses graphs "
                f"{gu + 1} and {gv + 1}"
            )
        lo = int(min(u, v) - first_node[gu])
        hi = int(max(u, v) - first_node[gu])
        edges_per_graph[gu].add((lo, hi))

    raw_labels = [int(ln) for ln in label_lines]
    label_map = {lab: idx for idx, lab in enumerate(sorted(set(raw_labels)))}
    labels = [label_map[lab] for lab in raw_labels]

    node_labels_all = None
    label_vocab = None
    if node_label_lines is not None:
        if len(node_label_lines) != num_nodes_total:
            raise ParseError(
                f"{prefix}node_labels.txt: {len(node_label_lines)} lines for "
                f"{num_nodes_total} nodes"
            )
        node_labels_all = [int(ln) for ln in node_label_lines]
        label_vocab = {
            lab: idx for idx, lab in enumerate(sorted(set(node_labels_all)))
        }

    node_attrs_all = None
    if node_attr_lines is not None:
        if len(node_attr_lines) != num_nodes_total:
            raise ParseError(
                f"{prefix}node_attributes.txt: {len(node_attr_lines)} lines "
                f"for {num_nodes_total} nodes"
            )
        node_attrs_all = np.array(
            [[float(tok) for tok in ln.split(",")] for ln in node_attr_lines],
            dtype=np.float64,
        )

    graphs = []
    for gid in range(num_graphs):
        n = int(nodes_per_graph[gid])
        base = int(first_node[gid])
        edges = sorted(edges_per_graph[gid])

        blocks = []
        g_node_labels = None
        g_node_attrs = None
        if node_labels_all is not None:
            g_node_labels = node_labels_all[base : base + n]
            onehot = np.zeros((n, len(label_vocab)), dtype=np.float64)
            for row, lab in enumerate(g_node_labels):
                onehot[row, label_vocab[lab]] = 1.0
            blocks.append(onehot)
        if node_attrs_all is not None:
            g_node_attrs = node_attrs_all[base : base + n]
            blocks.append(g_node_attrs)
        if not blocks:
            blocks.append(np.ones((n, 1), dtype=np.float64))
        features = np.concatenate(blocks, axis=1)
        if not np.all(np.isfinite(features)):
            raise ParseError(f"graph {gid + 1}: non-finite feature entries")

        graphs.append(
            Graph(
                num_nodes=n,
                edges=edges,
                features=features,
                label=labels[gid],
                adj_norm=build_normalized_adjacency(n, edges),
                node_labels=g_node_labels,
                node_attributes=g_node_attrs,
            )
        )

    return GraphDataset(
        graphs=graphs,
        num_classes=len(label_map),
        feature_dim=graphs[0].features.shape[1],
        name=name,
    )


def emit_tu_dataset(ds: GraphDataset, dir_path: str) -> None:
    """Write a dataset back out in TU format (round-trip counterpart)."""
    os.makedirs(dir_path, exist_ok=True)
    prefix = os.path.join(dir_path, ds.name + "_")
    a_lines, ind_lines, lab_lines = [], [], []
    nl_lines, na_lines = [], []
    has_labels = all(g.node_labels is not None for g in ds.graphs)
    has_attrs = all(g.node_attributes is not None for g in ds.graphs)
    offset = 0
    for gid, g in enumerate(ds.graphs):
        lab_lines.append(str(g.label))
        for _ in range(g.num_nodes):
            ind_lines.append(str(gid + 1))
        for i, j in g.edges:
            a_lines.append(f"{offset + i + 1}, {offset + j + 1}")
            a_lines.append(f"{offset + j + 1}, {offset + i + 1}")
        if has_labels:
            nl_lines.extend(str(lab) for lab in g.node_labels)
        if has_attrs:
            na_lines.extend(
                ", ".join(repr(float(x)) for x in row)
                for row in g.node_attributes
            )
        offset += g.num_nodes

    def _write(suffix, lines):
        with open(prefix + suffix, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    _write("A.txt", a_lines)
    _write("graph_indicator.txt", ind_lines)
    _write("graph_labels.txt", lab_lines)
    if has_labels:
        _write("node_labels.txt", nl_lines)
    if has_attrs:
        _write("node_attributes.txt", na_lines)


def split_dataset(ds: GraphDataset, spec: SplitSpec):
    """Deterministic shuffled partition into (train, val, test).

    Part sizes come from flooring the cumulative fraction boundaries, so
    the remainder lands in the trailing part. Every class must appear in
    the train part; on violation the shuffle is retried with an
    incremented seed, at most 100 times.
    """
    fr = spec.fractions
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
        raise EmptySplit(f"fractions must sum to 1, got {fr}")
    n = len(ds.graphs)
    b1 = int(np.floor(n * fr[0]))
    b2 = int(np.floor(n * (fr[0] + fr[1])))
    sizes = (b1, b2 - b1, n - b2)
    if min(sizes) == 0:
        raise EmptySplit(f"split sizes {sizes} contain an empty part")

    all_classes = set(range(ds.num_classes))
    for retry in range(101):
        rng = np.random.default_rng(spec.seed + retry)
        order = rng.permutation(n)
        train_idx = order[:b1]
        if {ds.graphs[i].label for i in train_idx} == all_classes:
            break
    else:
        raise EmptySplit(
            "could not produce a train part containing every class "
            f"after 100 retries (seed {spec.seed})"
        )
    return (
        ds.subset(sorted(train_idx.tolist()), "/train"),
        ds.subset(sorted(order[b1:b2].tolist()), "/val"),
        ds.subset(sorted(order[b2:].tolist()), "/test"),
    )


def iterate_batches(ds: GraphDataset, batch_size: int, seed: int, epoch: int):
    """Epoch-dependent deterministic shuffle into mini-batches.

    Every graph appears exactly once per epoch; the last batch may be
    smaller than batch_size.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds.graphs))
    for start in range(0, len(order), batch_size):
        yield [ds.graphs[i] for i in order[start : start + batch_size]]
