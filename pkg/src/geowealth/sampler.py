"""Neighborhood subsampling for mini-batch graph training.

For every labeled root, a bounded two-hop subgraph is sampled: up to
`fanout1` first-degree neighbors uniformly without replacement, then up to
`fanout2` distinct second-degree nodes drawn from the pooled neighbors of
the sampled first hop. Kept edges are the root-to-hop1 and hop1-to-hop2
relations, symmetric within the batch, with original weights. Ego graphs
batch by disjoint union instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import SpatialGraph


@dataclass
class SubgraphBatch:
    """A sampled training batch in local CSR form.

    `node_ids` maps local positions to ids in the parent graph (or, for ego
    unions, into the virtual concatenation of the ego-graph list's nodes).
    `root_locals` are the positions of the labeled roots; `root_labels` is
    NaN where a root has no label. `assignments`, when present, are fuzzy
    assignments remapped to local node positions.
    """

    node_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    root_locals: np.ndarray
    root_labels: np.ndarray | None = None
    assignments: list | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.size)


def _assemble(
    n_roots_ids: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    w: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Dedupe directed edges, relabel to local ids, build a sorted CSR."""
    node_ids = np.unique(np.concatenate([n_roots_ids, src, dst]))
    n_local = node_ids.size
    ls = np.searchsorted(node_ids, src)
    ld = np.searchsorted(node_ids, dst)
    if ls.size:
        key = ls * n_local + ld
        _, first = np.unique(key, return_index=True)  # sorted by (ls, ld)
        ls, ld, w = ls[first], ld[first], w[first]
    indptr = np.zeros(n_local + 1, dtype=np.int64)
    np.cumsum(np.bincount(ls, minlength=n_local), out=indptr[1:])
    return node_ids, indptr, ld.astype(np.int64), w


def sample_neighborhood(
    graph: SpatialGraph,
    roots,
    fanout1: int = 4,
    fanout2: int = 16,
    rng: np.random.Generator | None = None,
) -> SubgraphBatch:
    """Sample a two-hop batch around `roots`; deterministic for a fixed rng.

    Sampled edges are always edges of the parent graph with their weights
    copied unchanged; with fanouts at or above the max degree the result is
    the exact two-hop subgraph restricted to root->hop1->hop2 paths.
    """
    roots = np.asarray(roots, dtype=np.int64)
    if roots.size == 0:
        raise ValueError("empty roots")
    if rng is None:
        rng = np.random.default_rng()
    indptr, indices, weights = graph.indptr, graph.indices, graph.weights

    src_parts: list[np.ndarray] = []
    dst_parts: list[np.ndarray] = []
    w_parts: list[np.ndarray] = []
    for r in roots:
        nbrs = indices[indptr[r] : indptr[r + 1]]
        nbr_w = weights[indptr[r] : indptr[r + 1]]
        if nbrs.size > fanout1:
            pos = rng.choice(nbrs.size, size=fanout1, replace=False)
            hop1, hop1_w = nbrs[pos], nbr_w[pos]
        else:
            hop1, hop1_w = nbrs, nbr_w
        if hop1.size == 0:
            continue
        src_parts.append(np.full(hop1.size, r, dtype=np.int64))
        dst_parts.append(hop1)
        w_parts.append(hop1_w)

        pool_src = []
        pool_dst = []
        pool_w = []
        for u in hop1:
            cols = indices[indptr[u] : indptr[u + 1]]
            pool_src.append(np.full(cols.size, u, dtype=np.int64))
            pool_dst.append(cols)
            pool_w.append(weights[indptr[u] : indptr[u + 1]])
        pool_src = np.concatenate(pool_src)
        pool_dst = np.concatenate(pool_dst)
        pool_w = np.concatenate(pool_w)
        # Second-degree candidates exclude the root and the sampled first hop.
        fresh = ~np.isin(pool_dst, np.append(hop1, r))
        candidates = np.unique(pool_dst[fresh])
        if candidates.size > fanout2:
            hop2 = rng.choice(candidates, size=fanout2, replace=False)
        else:
            hop2 = candidates
        if hop2.size:
            keep = np.isin(pool_dst, hop2)
            src_parts.append(pool_src[keep])
            dst_parts.append(pool_dst[keep])
            w_parts.append(pool_w[keep])

    if src_parts:
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
        w = np.concatenate(w_parts)
        # Symmetric within the batch.
        src, dst, w = np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w])
    else:
        src = dst = np.empty(0, dtype=np.int64)
        w = np.empty(0)

    node_ids, indptr_l, indices_l, weights_l = _assemble(roots, src, dst, w)
    root_locals = np.searchsorted(node_ids, roots)
    labels = np.array(
        [np.nan if graph.nodes[r].label is None else graph.nodes[r].label for r in roots]
    )
    return SubgraphBatch(
        node_ids=node_ids,
        indptr=indptr_l,
        indices=indices_l,
        weights=weights_l,
        root_locals=root_locals,
        root_labels=labels,
    )


def union_ego_graphs(ego_graphs: list[SpatialGraph], chosen: np.ndarray) -> SubgraphBatch:
    """Disjoint union of the chosen ego graphs (in the given order) with
    index offsetting; roots are the centers.

    `node_ids` index into the virtual concatenation of ALL graphs' nodes in
    list order, so callers can pre-stack embeddings once.
    """
    sizes = np.array([g.n_nodes for g in ego_graphs], dtype=np.int64)
    bases = np.concatenate([[0], np.cumsum(sizes)])
    node_ids = []
    indptr = [np.zeros(1, dtype=np.int64)]
    indices = []
    weights = []
    roots = []
    labels = []
    n_off = 0
    e_off = 0
    for gid in chosen:
        g = ego_graphs[int(gid)]
        node_ids.append(np.arange(g.n_nodes, dtype=np.int64) + bases[int(gid)])
        indptr.append(g.indptr[1:] + e_off)
        indices.append(g.indices + n_off)
        weights.append(g.weights)
        roots.append(n_off)
        labels.append(np.nan if g.nodes[0].label is None else g.nodes[0].label)
        n_off += g.n_nodes
        e_off += g.indices.size
    return SubgraphBatch(
        node_ids=np.concatenate(node_ids),
        indptr=np.concatenate(indptr),
        indices=np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
        weights=np.concatenate(weights) if weights else np.empty(0),
        root_locals=np.asarray(roots, dtype=np.int64),
        root_labels=np.asarray(labels),
    )


def batch_ego_graphs(
    ego_graphs: list[SpatialGraph], batch_size: int, rng: np.random.Generator | None = None
) -> SubgraphBatch:
    """Disjoint union of `batch_size` randomly chosen (without replacement)
    ego graphs."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > len(ego_graphs):
        raise ValueError(f"batch_size {batch_size} exceeds {len(ego_graphs)} ego graphs")
    if rng is None:
        rng = np.random.default_rng()
    chosen = rng.choice(len(ego_graphs), size=batch_size, replace=False)
    return union_ego_graphs(ego_graphs, chosen)
