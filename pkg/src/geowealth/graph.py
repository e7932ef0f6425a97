"""Spatial graph construction over clusters, settlements, and phantoms.

Four structures are built here, matching the four graph-shaped training
variants:

- a per-survey cluster graph (edges only between clusters of the same
  survey, closer than a distance threshold),
- a full graph adding settlement nodes with k-nearest-neighbor edges,
- per-cluster ego graphs (a star from each cluster to the candidate
  settlements inside its displacement radius, weighted by displacement
  likelihood), and
- a fuzzy graph over settlements and phantom nodes only, with label mass
  spread over candidates via :class:`FuzzyAssignment`.

All builders are deterministic: neighbor ties break by ascending node id,
and adjacency is stored as a symmetric CSR with strictly positive weights
and no self-edges.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .dataset import EmbeddingTable, Settlement, SurveyCluster
from .displacement import DisplacementModel, likelihood
from .geo import GeoPoint, SpatialIndex

# Inverse-distance edge weight, clamped so coincident coordinates stay finite.
MIN_EDGE_DISTANCE_KM = 0.1


def inverse_distance_weight(d_km: float) -> float:
    return 1.0 / max(d_km, MIN_EDGE_DISTANCE_KM)


class NodeClass(enum.Enum):
    SURVEY_CLUSTER = "cluster"
    SETTLEMENT = "settlement"
    PHANTOM = "phantom"


@dataclass(frozen=True)
class Node:
    """A graph node: a location with its embedding and optional label.

    Cluster nodes carry a label; settlement nodes do not; phantom nodes
    stand in for clusters with no candidate settlement and reuse the
    reported coordinate's embedding.
    """

    key: str
    location: GeoPoint
    embedding: np.ndarray
    node_class: NodeClass
    label: float | None = None
    survey_id: str | None = None


@dataclass
class SpatialGraph:
    """An undirected graph in CSR form: every edge appears in both rows."""

    nodes: list[Node]
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        """Undirected edge count."""
        return int(self.indices.size) // 2

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def embedding_matrix(self) -> np.ndarray:
        if not self.nodes:
            return np.empty((0, 0))
        return np.stack([n.embedding for n in self.nodes])

    def validate(self) -> None:
        """Check CSR structure, weight positivity, and symmetry."""
        n = self.n_nodes
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise ValueError("bad CSR offsets")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("CSR offsets not non-decreasing")
        if self.indices.size != self.weights.size:
            raise ValueError("indices/weights length mismatch")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError("column index out of range")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValueError("edge weights must be positive and finite")
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        if np.any(rows == self.indices):
            raise ValueError("self-edges are not allowed")
        for i in range(n):
            cols = self.indices[self.indptr[i] : self.indptr[i + 1]]
            if cols.size > 1 and np.any(np.diff(cols) <= 0):
                raise ValueError(f"row {i} columns not strictly increasing")
        # Symmetry: the reversed edge list must be the same set, same weights.
        order = np.lexsort((rows, self.indices))
        if not (
            np.array_equal(self.indices[order], rows)
            and np.array_equal(rows[order], self.indices)
            and np.array_equal(self.weights[order], self.weights)
        ):
            raise ValueError("adjacency is not symmetric")


@dataclass
class FuzzyAssignment:
    """For one labeled cluster, the candidate node indices and their
    normalized probabilities of being the true location."""

    label_index: int
    node_indices: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.node_indices = np.asarray(self.node_indices, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.node_indices.shape != self.probs.shape or self.node_indices.ndim != 1:
            raise ValueError("candidates and probabilities must be 1-d and aligned")


def _csr_from_undirected(n: int, edges: dict[tuple[int, int], float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build CSR arrays from an undirected edge dict keyed (i, j) with i < j."""
    m = len(edges)
    if m == 0:
        return np.zeros(n + 1, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    src = np.empty(2 * m, dtype=np.int64)
    dst = np.empty(2 * m, dtype=np.int64)
    w = np.empty(2 * m, dtype=np.float64)
    for idx, ((i, j), weight) in enumerate(edges.items()):
        src[idx], dst[idx], w[idx] = i, j, weight
        src[m + idx], dst[m + idx], w[m + idx] = j, i, weight
    order = np.lexsort((dst, src))
    src, dst, w = src[order], dst[order], w[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst, w


def _cluster_node(c: SurveyCluster, embeddings: EmbeddingTable) -> Node:
    return Node(
        key=c.key,
        location=c.reported,
        embedding=embeddings[c.key],
        node_class=NodeClass.SURVEY_CLUSTER,
        label=c.iwi,
        survey_id=c.survey_id,
    )


def _settlement_node(s: Settlement, embeddings: EmbeddingTable) -> Node:
    return Node(
        key=s.settlement_id,
        location=s.location,
        embedding=embeddings[s.settlement_id],
        node_class=NodeClass.SETTLEMENT,
    )


def _survey_edges(
    clusters: list[SurveyCluster],
    node_ids: list[int],
    locations: list[GeoPoint],
    threshold_km: float,
    edges: dict[tuple[int, int], float],
) -> None:
    """Add edges between same-survey clusters strictly closer than the
    threshold, weighted by clamped inverse distance."""
    by_survey: dict[str, list[int]] = {}
    for pos, c in enumerate(clusters):
        by_survey.setdefault(c.survey_id, []).append(pos)
    for members in by_survey.values():
        if len(members) < 2:
            continue
        index = SpatialIndex([locations[p] for p in members])
        for local_i, pos_i in enumerate(members):
            for local_j, d in index.radius_query(locations[pos_i], threshold_km):
                if local_j == local_i or d >= threshold_km:
                    continue
                a, b = node_ids[pos_i], node_ids[members[local_j]]
                if a > b:
                    a, b = b, a
                edges[(a, b)] = inverse_distance_weight(d)


def build_dhs_graph(
    clusters: list[SurveyCluster],
    embeddings: EmbeddingTable,
    threshold_km: float = 100.0,
) -> SpatialGraph:
    """Graph over cluster nodes only; edges join clusters of the same survey
    strictly closer than `threshold_km`. Node order follows input order."""
    nodes = [_cluster_node(c, embeddings) for c in clusters]
    locations = [n.location for n in nodes]
    edges: dict[tuple[int, int], float] = {}
    _survey_edges(clusters, list(range(len(clusters))), locations, threshold_km, edges)
    indptr, indices, weights = _csr_from_undirected(len(nodes), edges)
    return SpatialGraph(nodes=nodes, indptr=indptr, indices=indices, weights=weights)


def build_full_graph(
    clusters: list[SurveyCluster],
    settlements: list[Settlement],
    embeddings: EmbeddingTable,
    k: int = 8,
    threshold_km: float = 100.0,
) -> SpatialGraph:
    """Clusters plus settlements. Cluster-to-cluster edges are the per-survey
    edges of :func:`build_dhs_graph`; every settlement additionally links to
    its k nearest neighbors among ALL nodes within `threshold_km`
    (settlement-initiated, then symmetrized). Clusters come first in node
    order, settlements after, both in input order."""
    nodes = [_cluster_node(c, embeddings) for c in clusters]
    nodes += [_settlement_node(s, embeddings) for s in settlements]
    locations = [n.location for n in nodes]
    edges: dict[tuple[int, int], float] = {}
    _survey_edges(clusters, list(range(len(clusters))), locations, threshold_km, edges)

    index = SpatialIndex(locations)
    n_clusters = len(clusters)
    for s_id in range(n_clusters, len(nodes)):
        for other, d in index.knn_query(locations[s_id], k, threshold_km):
            a, b = (s_id, other) if s_id < other else (other, s_id)
            edges[(a, b)] = inverse_distance_weight(d)

    indptr, indices, weights = _csr_from_undirected(len(nodes), edges)
    return SpatialGraph(nodes=nodes, indptr=indptr, indices=indices, weights=weights)


def _candidates_for(
    cluster: SurveyCluster,
    settlement_index: SpatialIndex,
    model: DisplacementModel,
) -> list[tuple[int, float, float]]:
    """(settlement position, distance, normalized probability) for every
    settlement within the cluster's displacement radius; empty if none."""
    radius = model.max_radius_km(cluster.kind)
    hits = settlement_index.radius_query(cluster.reported, radius)
    if not hits:
        return []
    dens = [likelihood(model, cluster.kind, d) for _, d in hits]
    total = sum(dens)
    return [(sid, d, dens[i] / total) for i, (sid, d) in enumerate(hits)]


def build_ego_graphs(
    clusters: list[SurveyCluster],
    settlements: list[Settlement],
    embeddings: EmbeddingTable,
    model: DisplacementModel | None = None,
) -> list[SpatialGraph]:
    """One star graph per cluster: the cluster node at the center, candidate
    settlements as leaves, edge weights equal to the normalized displacement
    likelihood of each candidate. A cluster with no candidate in radius
    yields a singleton graph."""
    if model is None:
        model = DisplacementModel()
    settlement_index = SpatialIndex([s.location for s in settlements])
    settlement_nodes = [_settlement_node(s, embeddings) for s in settlements]
    out: list[SpatialGraph] = []
    for c in clusters:
        center = _cluster_node(c, embeddings)
        cands = _candidates_for(c, settlement_index, model)
        nodes = [center] + [settlement_nodes[sid] for sid, _, _ in cands]
        edges = {(0, 1 + leaf): p for leaf, (_, _, p) in enumerate(cands)}
        indptr, indices, weights = _csr_from_undirected(len(nodes), edges)
        out.append(SpatialGraph(nodes=nodes, indptr=indptr, indices=indices, weights=weights))
    return out


def build_fuzzy_assignments(
    clusters: list[SurveyCluster],
    settlements: list[Settlement],
    embeddings: EmbeddingTable,
    model: DisplacementModel | None = None,
) -> tuple[list[Node], list[FuzzyAssignment]]:
    """Node universe (settlements, then phantoms in cluster order) and one
    normalized assignment per cluster.

    A cluster whose displacement radius contains no settlement gets a
    phantom node at its reported coordinate, carrying the reported
    coordinate's embedding, with probability 1.
    """
    if model is None:
        model = DisplacementModel()
    settlement_index = SpatialIndex([s.location for s in settlements])
    nodes = [_settlement_node(s, embeddings) for s in settlements]
    assignments: list[FuzzyAssignment] = []
    for j, c in enumerate(clusters):
        cands = _candidates_for(c, settlement_index, model)
        if cands:
            assignments.append(
                FuzzyAssignment(
                    label_index=j,
                    node_indices=np.array([sid for sid, _, _ in cands], dtype=np.int64),
                    probs=np.array([p for _, _, p in cands], dtype=np.float64),
                )
            )
        else:
            phantom = Node(
                key=f"phantom:{c.key}",
                location=c.reported,
                embedding=embeddings[c.key],
                node_class=NodeClass.PHANTOM,
                survey_id=c.survey_id,
            )
            nodes.append(phantom)
            assignments.append(
                FuzzyAssignment(
                    label_index=j,
                    node_indices=np.array([len(nodes) - 1], dtype=np.int64),
                    probs=np.array([1.0]),
                )
            )
    return nodes, assignments


def build_fuzzy_graph(
    clusters: list[SurveyCluster],
    settlements: list[Settlement],
    embeddings: EmbeddingTable,
    model: DisplacementModel | None = None,
    k: int = 8,
    threshold_km: float = 100.0,
) -> tuple[SpatialGraph, list[FuzzyAssignment]]:
    """kNN graph over settlements and phantoms only (no cluster nodes), with
    inverse-distance weights; assignments index into this node set. Phantom
    nodes get kNN edges like any settlement."""
    nodes, assignments = build_fuzzy_assignments(clusters, settlements, embeddings, model)
    locations = [n.location for n in nodes]
    index = SpatialIndex(locations)
    edges: dict[tuple[int, int], float] = {}
    for i in range(len(nodes)):
        for other, d in index.knn_query(locations[i], k, threshold_km):
            a, b = (i, other) if i < other else (other, i)
            edges[(a, b)] = inverse_distance_weight(d)
    indptr, indices, weights = _csr_from_undirected(len(nodes), edges)
    return SpatialGraph(nodes=nodes, indptr=indptr, indices=indices, weights=weights), assignments


def dump_graph(graph: SpatialGraph, edges_path: str, nodes_path: str) -> None:
    """Debug dump: one CSV row per stored directed edge (`src,dst,weight`)
    plus a node table (`index,key,lat,lon,node_class,label,survey_id`)."""
    with open(edges_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        rows = np.repeat(np.arange(graph.n_nodes), np.diff(graph.indptr))
        for s, d, w in zip(rows, graph.indices, graph.weights):
            writer.writerow([int(s), int(d), repr(float(w))])
    with open(nodes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "key", "lat", "lon", "node_class", "label", "survey_id"])
        for i, n in enumerate(graph.nodes):
            writer.writerow(
                [
                    i,
                    n.key,
                    repr(n.location.lat),
                    repr(n.location.lon),
                    n.node_class.value,
                    "" if n.label is None else repr(n.label),
                    n.survey_id or "",
                ]
            )


def dump_assignments(assignments: list[FuzzyAssignment], path: str) -> None:
    """CSV dump of fuzzy assignments: `label_index,node_index,prob`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label_index", "node_index", "prob"])
        for a in assignments:
            for idx, p in zip(a.node_indices, a.probs):
                writer.writerow([a.label_index, int(idx), repr(float(p))])
