"""Training and evaluation of the six model variants with survey-level
cross-validation.

Variants differ along three axes (unlabeled settlement nodes, graph
structure, fuzzy labels):

====== ========================= ========= ===== ============
method inputs                    geonames  graph fuzzy labels
====== ========================= ========= ===== ============
A      cluster embeddings
B      per-survey cluster graph             yes
C      clusters + settlements    yes        yes
D      per-cluster ego graphs    yes        yes
E      candidate embeddings      yes              yes
F      settlement/phantom graph  yes        yes   yes
====== ========================= ========= ===== ============

Every run trains each learning rate in the grid for a fixed number of
epochs with AdamW, tracks validation loss every epoch, and keeps the
parameters from the best epoch; the grid winner is the lowest best
validation loss (ties to the smaller rate). Validation and test for graph
methods always use the full graph, never sampling, so reported metrics are
deterministic. Test metrics are MAE and R^2 of cluster-level predictions;
for fuzzy methods a cluster's prediction is the probability-weighted mean
of its candidates' predictions.
"""

from __future__ import annotations

import csv
import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import EmbeddingTable, Settlement, SurveyCluster
from .displacement import DisplacementModel
from .graph import (
    FuzzyAssignment,
    SpatialGraph,
    build_dhs_graph,
    build_ego_graphs,
    build_full_graph,
    build_fuzzy_graph,
)
from .nn import (
    ARCH_GCN,
    ARCH_MLP,
    AdamWState,
    ModelParams,
    NormalizedAdjacency,
    adamw_step,
    backward,
    forward_with_cache,
    init_params,
    mse_loss,
    fuzzy_loss,
)
from .sampler import sample_neighborhood, union_ego_graphs

R2_UNDEFINED = -1.0e30  # sentinel for zero-variance targets with residual error


class Method(enum.Enum):
    A_POINTS = "A"
    B_DHS_GRAPH = "B"
    C_FULL_GRAPH = "C"
    D_EGO_GRAPHS = "D"
    E_POINTS_FUZZY = "E"
    F_GRAPH_FUZZY = "F"

    @property
    def uses_geonames(self) -> bool:
        return self in (Method.C_FULL_GRAPH, Method.D_EGO_GRAPHS, Method.E_POINTS_FUZZY, Method.F_GRAPH_FUZZY)

    @property
    def uses_graph(self) -> bool:
        return self in (Method.B_DHS_GRAPH, Method.C_FULL_GRAPH, Method.D_EGO_GRAPHS, Method.F_GRAPH_FUZZY)

    @property
    def uses_fuzzy(self) -> bool:
        return self in (Method.E_POINTS_FUZZY, Method.F_GRAPH_FUZZY)

    @property
    def arch(self) -> str:
        return ARCH_MLP if self in (Method.A_POINTS, Method.E_POINTS_FUZZY) else ARCH_GCN


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr_grid: tuple[float, ...] = (1e-2, 3e-3, 1e-3, 3e-4)
    batch_size: int | None = None  # None: 256 roots for graph methods, 512 points otherwise
    seed: int = 0
    fanout1: int = 4
    fanout2: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    normalize_features: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_grid:
            raise ValueError("lr_grid must be non-empty")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def effective_batch_size(self, method: Method) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 512 if method in (Method.A_POINTS, Method.E_POINTS_FUZZY) else 256


@dataclass
class DataBundle:
    """Everything a run needs: labeled clusters, candidate settlements,
    embeddings for both, and the displacement model."""

    clusters: list[SurveyCluster]
    settlements: list[Settlement]
    embeddings: EmbeddingTable
    displacement: DisplacementModel = field(default_factory=DisplacementModel)


# --------------------------------------------------------------------------
# Fold plans
# --------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Survey groups and the rotation of (train groups, val group, test
    group) over them. In every fold the three parts are disjoint and cover
    all groups."""

    groups: dict[str, list[str]]
    folds: list[tuple[tuple[str, ...], str, str]]

    def validate(self) -> None:
        names = set(self.groups)
        if not self.folds:
            raise ValueError("fold plan has no folds")
        for train, val, test in self.folds:
            parts = set(train) | {val, test}
            if parts != names or len(train) + 2 != len(names) or val == test or val in train or test in train:
                raise ValueError(f"fold ({train}, {val}, {test}) does not partition groups {sorted(names)}")

    def fold_surveys(self, i: int) -> tuple[set[str], set[str], set[str]]:
        train, val, test = self.folds[i]
        tr: set[str] = set()
        for g in train:
            tr.update(self.groups[g])
        return tr, set(self.groups[val]), set(self.groups[test])


def rotation_plan(groups: dict[str, list[str]]) -> FoldPlan:
    """Standard rotation: fold i tests group i and validates on the next
    group (cyclically), training on the rest."""
    names = sorted(groups)
    if len(names) < 3:
        raise ValueError("need at least 3 groups for a train/val/test rotation")
    folds = []
    for i, test in enumerate(names):
        val = names[(i + 1) % len(names)]
        train = tuple(n for n in names if n not in (test, val))
        folds.append((train, val, test))
    plan = FoldPlan(groups=dict(groups), folds=folds)
    plan.validate()
    return plan


def random_fold_plan(survey_ids: list[str], n_groups: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle surveys into `n_groups` round-robin groups named 'A', 'B', ...
    and build the rotation plan."""
    uniq = sorted(set(survey_ids))
    if n_groups < 3 or n_groups > len(uniq):
        raise ValueError(f"n_groups must be in [3, {len(uniq)}], got {n_groups}")
    if n_groups > 26:
        raise ValueError("n_groups > 26 not supported")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(97,))))
    perm = rng.permutation(len(uniq))
    groups: dict[str, list[str]] = {chr(ord("A") + g): [] for g in range(n_groups)}
    for pos, survey_pos in enumerate(perm):
        groups[chr(ord("A") + pos % n_groups)].append(uniq[survey_pos])
    return rotation_plan(groups)


def load_fold_groups(path: str) -> dict[str, list[str]]:
    """Read a `group,survey_id` CSV into a group mapping."""
    groups: dict[str, list[str]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["group", "survey_id"]:
            raise ValueError(f"{path}:1: expected header 'group,survey_id', got {header!r}")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: malformed row {row!r}")
            groups.setdefault(row[0], []).append(row[1])
    return groups


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def evaluate(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(MAE, R^2). R^2 is 1.0 when both residual and total sums are zero,
    and the :data:`R2_UNDEFINED` sentinel when the target has no variance
    but residuals remain."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    mae = float(np.mean(np.abs(diff)))
    ss_res = float(np.sum(diff * diff))
    ss_tot = float(np.sum((target - np.mean(target)) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else R2_UNDEFINED
    else:
        r2 = 1.0 - ss_res / ss_tot
    return mae, r2


@dataclass
class FoldResult:
    fold: int
    method: str
    lr: float
    mae: float
    r2: float
    best_val_loss: float
    final_val_loss: float
    best_epoch: int


@dataclass
class EvalReport:
    method: str
    folds: list[FoldResult]

    def _agg(self, values: list[float]) -> tuple[float, float]:
        arr = np.array(values)
        sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
        return float(np.mean(arr)), sd

    @property
    def mae_mean(self) -> float:
        return self._agg([f.mae for f in self.folds])[0]

    @property
    def mae_sd(self) -> float:
        return self._agg([f.mae for f in self.folds])[1]

    @property
    def r2_mean(self) -> float:
        return self._agg([f.r2 for f in self.folds])[0]

    @property
    def r2_sd(self) -> float:
        return self._agg([f.r2 for f in self.folds])[1]


# --------------------------------------------------------------------------
# Per-method prepared data
# --------------------------------------------------------------------------


@dataclass
class PreparedMethod:
    """Method-specific structures built once and reused across folds and
    learning rates."""

    method: Method
    y: np.ndarray                    # label per cluster, cluster order
    surveys: list[str]               # survey id per cluster
    X: np.ndarray | None = None      # input rows (meaning depends on method)
    graph: SpatialGraph | None = None
    adj: NormalizedAdjacency | None = None
    cluster_nodes: np.ndarray | None = None   # graph node index per cluster (B/C)
    ego: list[SpatialGraph] | None = None
    assignments: list[FuzzyAssignment] | None = None


def prepare_method_data(
    method: Method,
    data: DataBundle,
    k: int = 8,
    threshold_km: float = 100.0,
) -> PreparedMethod:
    y = np.array([c.iwi for c in data.clusters], dtype=np.float64)
    surveys = [c.survey_id for c in data.clusters]
    if method.uses_geonames and not data.settlements:
        raise ValueError(f"method {method.value} requires settlements")
    if not data.clusters:
        raise ValueError("no clusters")

    if method is Method.A_POINTS:
        X = np.stack([data.embeddings[c.key] for c in data.clusters])
        return PreparedMethod(method=method, y=y, surveys=surveys, X=X)

    if method is Method.B_DHS_GRAPH:
        graph = build_dhs_graph(data.clusters, data.embeddings, threshold_km)
    elif method is Method.C_FULL_GRAPH:
        graph = build_full_graph(data.clusters, data.settlements, data.embeddings, k, threshold_km)
    elif method is Method.D_EGO_GRAPHS:
        ego = build_ego_graphs(data.clusters, data.settlements, data.embeddings, data.displacement)
        X_all = np.concatenate([g.embedding_matrix() for g in ego])
        return PreparedMethod(method=method, y=y, surveys=surveys, X=X_all, ego=ego)
    elif method is Method.E_POINTS_FUZZY:
        nodes, assignments = __import__("geowealth.graph", fromlist=["build_fuzzy_assignments"]).build_fuzzy_assignments(
            data.clusters, data.settlements, data.embeddings, data.displacement
        )
        X = np.stack([n.embedding for n in nodes])
        return PreparedMethod(method=method, y=y, surveys=surveys, X=X, assignments=assignments)
    elif method is Method.F_GRAPH_FUZZY:
        graph, assignments = build_fuzzy_graph(
            data.clusters, data.settlements, data.embeddings, data.displacement, k, threshold_km
        )
        return PreparedMethod(
            method=method,
            y=y,
            surveys=surveys,
            X=graph.embedding_matrix(),
            graph=graph,
            adj=NormalizedAdjacency.from_graph(graph),
            assignments=assignments,
        )
    else:
        raise ValueError(f"unknown method {method}")

    # B and C share the labeled-node layout: clusters come first.
    return PreparedMethod(
        method=method,
        y=y,
        surveys=surveys,
        X=graph.embedding_matrix(),
        graph=graph,
        adj=NormalizedAdjacency.from_graph(graph),
        cluster_nodes=np.arange(len(data.clusters), dtype=np.int64),
    )


# --------------------------------------------------------------------------
# Assignment bookkeeping for fuzzy methods
# --------------------------------------------------------------------------


def _subset_assignments(
    assignments: list[FuzzyAssignment], positions: np.ndarray, y: np.ndarray
) -> tuple[list[FuzzyAssignment], np.ndarray]:
    """Pick assignments by cluster position; label_index is rebased to the
    subset so it indexes the returned label vector."""
    subset = [
        FuzzyAssignment(label_index=new_j, node_indices=assignments[j].node_indices, probs=assignments[j].probs)
        for new_j, j in enumerate(positions)
    ]
    return subset, y[positions]


def _localize_assignments(
    subset: list[FuzzyAssignment],
) -> tuple[np.ndarray, list[FuzzyAssignment]]:
    """Unique node ids referenced by the subset, plus copies remapped to
    positions within that id list."""
    ids = np.unique(np.concatenate([a.node_indices for a in subset]))
    local = [
        FuzzyAssignment(
            label_index=a.label_index,
            node_indices=np.searchsorted(ids, a.node_indices),
            probs=a.probs,
        )
        for a in subset
    ]
    return ids, local


def _weighted_cluster_predictions(
    assignments: list[FuzzyAssignment], preds: np.ndarray
) -> np.ndarray:
    """Probability-weighted mean of candidate predictions per assignment."""
    return np.array([float(np.sum(a.probs * preds[a.node_indices])) for a in assignments])


# --------------------------------------------------------------------------
# Training engines
# --------------------------------------------------------------------------


@dataclass
class _TrainedModel:
    params: ModelParams
    best_val: float
    final_val: float
    best_epoch: int


def _run_epochs(
    arch: str,
    config: TrainConfig,
    lr: float,
    seed_seq: np.random.SeedSequence,
    n_train: int,
    batch_size: int,
    train_step,   # (params, state, batch_positions, rng) -> None
    val_loss,     # (params) -> float
) -> _TrainedModel:
    """Shared epoch loop: shuffled mini-batches, per-epoch validation, and
    best-epoch checkpointing (strict improvement keeps the earliest best)."""
    init_ss, batch_ss = seed_seq.spawn(2)
    rng_init = np.random.Generator(np.random.PCG64(init_ss))
    rng_batch = np.random.Generator(np.random.PCG64(batch_ss))
    params = init_params(arch, rng_init)
    state = AdamWState.for_params(
        params,
        lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    best: _TrainedModel | None = None
    val = float("inf")
    for epoch in range(config.epochs):
        perm = rng_batch.permutation(n_train)
        for start in range(0, n_train, batch_size):
            train_step(params, state, perm[start : start + batch_size], rng_batch)
        val = val_loss(params)
        if best is None or val < best.best_val:
            best = _TrainedModel(params=params.copy(), best_val=val, final_val=val, best_epoch=epoch)
    assert best is not None
    best.final_val = val
    return best


def _standardize(X_fit: np.ndarray, X_all: np.ndarray) -> np.ndarray:
    mu = X_fit.mean(axis=0)
    sd = np.maximum(X_fit.std(axis=0), 1e-8)
    return (X_all - mu) / sd


def _train_points_mse(
    X: np.ndarray, y: np.ndarray, tr_idx: np.ndarray, va_idx: np.ndarray,
    config: TrainConfig, lr: float, seed_seq,
) -> _TrainedModel:
    def train_step(params, state, batch_positions, rng) -> None:
        sel = tr_idx[batch_positions]
        out, cache = forward_with_cache(params, X[sel])
        _, dpred = mse_loss(out[:, 0], y[sel])
        grads = backward(params, cache, dpred.reshape(-1, 1))
        adamw_step(params, grads, state)

    X_val, y_val = X[va_idx], y[va_idx]

    def val_loss(params) -> float:
        out, _ = forward_with_cache(params, X_val)
        return mse_loss(out[:, 0], y_val)[0]

    return _run_epochs(
        ARCH_MLP, config, lr, seed_seq, tr_idx.size,
        config.effective_batch_size(Method.A_POINTS), train_step, val_loss,
    )


def _train_graph_mse(
    prep: PreparedMethod, X: np.ndarray, tr_pos: np.ndarray, va_pos: np.ndarray,
    config: TrainConfig, lr: float, seed_seq,
) -> _TrainedModel:
    graph, adj = prep.graph, prep.adj
    tr_nodes = prep.cluster_nodes[tr_pos]
    tr_y = prep.y[tr_pos]
    va_nodes = prep.cluster_nodes[va_pos]
    va_y = prep.y[va_pos]

    def train_step(params, state, batch_positions, rng) -> None:
        roots = tr_nodes[batch_positions]
        batch = sample_neighborhood(graph, roots, config.fanout1, config.fanout2, rng)
        adj_b = NormalizedAdjacency(batch.indptr, batch.indices, batch.weights, batch.n_nodes)
        out, cache = forward_with_cache(params, X[batch.node_ids], adj_b)
        _, dpred = mse_loss(out[batch.root_locals, 0], tr_y[batch_positions])
        dY = np.zeros_like(out)
        dY[batch.root_locals, 0] = dpred
        grads = backward(params, cache, dY)
        adamw_step(params, grads, state)

    def val_loss(params) -> float:
        out, _ = forward_with_cache(params, X, adj)
        return mse_loss(out[va_nodes, 0], va_y)[0]

    return _run_epochs(
        ARCH_GCN, config, lr, seed_seq, tr_pos.size,
        config.effective_batch_size(prep.method), train_step, val_loss,
    )


def _train_ego_mse(
    prep: PreparedMethod, X_all: np.ndarray, tr_pos: np.ndarray, va_pos: np.ndarray,
    config: TrainConfig, lr: float, seed_seq,
) -> _TrainedModel:
    ego = prep.ego

    val_union = union_ego_graphs(ego, va_pos)
    X_val = X_all[val_union.node_ids]
    adj_val = NormalizedAdjacency(val_union.indptr, val_union.indices, val_union.weights, val_union.n_nodes)
    va_y = prep.y[va_pos]

    def train_step(params, state, batch_positions, rng) -> None:
        gids = tr_pos[batch_positions]
        batch = union_ego_graphs(ego, gids)
        adj_b = NormalizedAdjacency(batch.indptr, batch.indices, batch.weights, batch.n_nodes)
        out, cache = forward_with_cache(params, X_all[batch.node_ids], adj_b)
        _, dpred = mse_loss(out[batch.root_locals, 0], prep.y[gids])
        dY = np.zeros_like(out)
        dY[batch.root_locals, 0] = dpred
        grads = backward(params, cache, dY)
        adamw_step(params, grads, state)

    def val_loss(params) -> float:
        out, _ = forward_with_cache(params, X_val, adj_val)
        return mse_loss(out[val_union.root_locals, 0], va_y)[0]

    return _run_epochs(
        ARCH_GCN, config, lr, seed_seq, tr_pos.size,
        config.effective_batch_size(prep.method), train_step, val_loss,
    )


def _train_points_fuzzy(
    prep: PreparedMethod, X: np.ndarray, tr_pos: np.ndarray, va_pos: np.ndarray,
    config: TrainConfig, lr: float, seed_seq,
) -> _TrainedModel:
    tr_assign, tr_y = _subset_assignments(prep.assignments, tr_pos, prep.y)
    va_assign, va_y = _subset_assignments(prep.assignments, va_pos, prep.y)
    va_ids, va_local = _localize_assignments(va_assign)
    X_val = X[va_ids]

    def train_step(params, state, batch_positions, rng) -> None:
        subset, yb = _subset_assignments(tr_assign, batch_positions, tr_y)
        ids, local = _localize_assignments(subset)
        out, cache = forward_with_cache(params, X[ids])
        _, dpred = fuzzy_loss(out[:, 0], local, yb)
        grads = backward(params, cache, dpred.reshape(-1, 1))
        adamw_step(params, grads, state)

    def val_loss(params) -> float:
        out, _ = forward_with_cache(params, X_val)
        return fuzzy_loss(out[:, 0], va_local, va_y)[0]

    return _run_epochs(
        ARCH_MLP, config, lr, seed_seq, len(tr_assign),
        config.effective_batch_size(prep.method), train_step, val_loss,
    )


def _train_graph_fuzzy(
    prep: PreparedMethod, X: np.ndarray, tr_pos: np.ndarray, va_pos: np.ndarray,
    config: TrainConfig, lr: float, seed_seq,
) -> _TrainedModel:
    graph, adj = prep.graph, prep.adj
    tr_assign, tr_y = _subset_assignments(prep.assignments, tr_pos, prep.y)
    va_assign, va_y = _subset_assignments(prep.assignments, va_pos, prep.y)

    def train_step(params, state, batch_positions, rng) -> None:
        subset, yb = _subset_assignments(tr_assign, batch_positions, tr_y)
        roots = np.unique(np.concatenate([a.node_indices for a in subset]))
        batch = sample_neighborhood(graph, roots, config.fanout1, config.fanout2, rng)
        local = [
            FuzzyAssignment(
                label_index=a.label_index,
                node_indices=np.searchsorted(batch.node_ids, a.node_indices),
                probs=a.probs,
            )
            for a in subset
        ]
        adj_b = NormalizedAdjacency(batch.indptr, batch.indices, batch.weights, batch.n_nodes)
        out, cache = forward_with_cache(params, X[batch.node_ids], adj_b)
        _, dpred = fuzzy_loss(out[:, 0], local, yb)
        grads = backward(params, cache, dpred.reshape(-1, 1))
        adamw_step(params, grads, state)

    def val_loss(params) -> float:
        out, _ = forward_with_cache(params, X, adj)
        return fuzzy_loss(out[:, 0], va_assign, va_y)[0]

    return _run_epochs(
        ARCH_GCN, config, lr, seed_seq, len(tr_assign),
        config.effective_batch_size(prep.method), train_step, val_loss,
    )


# --------------------------------------------------------------------------
# run_method / cross_validate
# --------------------------------------------------------------------------


@dataclass
class RunOutcome:
    params: ModelParams
    result: FoldResult
    test_pred: np.ndarray
    test_target: np.ndarray


def _split_positions(surveys: list[str], fold: tuple[set[str], set[str], set[str]]):
    tr_s, va_s, te_s = fold
    tr = np.array([i for i, s in enumerate(surveys) if s in tr_s], dtype=np.int64)
    va = np.array([i for i, s in enumerate(surveys) if s in va_s], dtype=np.int64)
    te = np.array([i for i, s in enumerate(surveys) if s in te_s], dtype=np.int64)
    for name, part in (("train", tr), ("validation", va), ("test", te)):
        if part.size == 0:
            raise ValueError(f"fold has no {name} clusters")
    return tr, va, te


def _method_inputs(prep: PreparedMethod, tr_pos: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Optionally standardize features with statistics from the training
    portion only."""
    X = prep.X
    if not config.normalize_features:
        return X
    if prep.method is Method.A_POINTS:
        fit = X[tr_pos]
    elif prep.method in (Method.B_DHS_GRAPH, Method.C_FULL_GRAPH):
        fit = X[prep.cluster_nodes[tr_pos]]
    elif prep.method is Method.D_EGO_GRAPHS:
        bases = np.concatenate([[0], np.cumsum([g.n_nodes for g in prep.ego])])
        fit = X[bases[tr_pos]]
    else:
        ids = np.unique(np.concatenate([prep.assignments[int(i)].node_indices for i in tr_pos]))
        fit = X[ids]
    return _standardize(fit, X)


def _test_metrics(
    prep: PreparedMethod, X: np.ndarray, params: ModelParams, te_pos: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster-level test predictions and targets (full-graph inference)."""
    method = prep.method
    if method is Method.A_POINTS:
        out, _ = forward_with_cache(params, X[te_pos])
        return out[:, 0], prep.y[te_pos]
    if method in (Method.B_DHS_GRAPH, Method.C_FULL_GRAPH):
        out, _ = forward_with_cache(params, X, prep.adj)
        return out[prep.cluster_nodes[te_pos], 0], prep.y[te_pos]
    if method is Method.D_EGO_GRAPHS:
        union = union_ego_graphs(prep.ego, te_pos)
        adj_u = NormalizedAdjacency(union.indptr, union.indices, union.weights, union.n_nodes)
        out, _ = forward_with_cache(params, X[union.node_ids], adj_u)
        return out[union.root_locals, 0], prep.y[te_pos]
    te_assign, te_y = _subset_assignments(prep.assignments, te_pos, prep.y)
    if method is Method.E_POINTS_FUZZY:
        ids, local = _localize_assignments(te_assign)
        out, _ = forward_with_cache(params, X[ids])
        return _weighted_cluster_predictions(local, out[:, 0]), te_y
    out, _ = forward_with_cache(params, X, prep.adj)
    return _weighted_cluster_predictions(te_assign, out[:, 0]), te_y


_TRAINERS = {
    Method.A_POINTS: None,  # special-cased below
    Method.B_DHS_GRAPH: _train_graph_mse,
    Method.C_FULL_GRAPH: _train_graph_mse,
    Method.D_EGO_GRAPHS: _train_ego_mse,
    Method.E_POINTS_FUZZY: _train_points_fuzzy,
    Method.F_GRAPH_FUZZY: _train_graph_fuzzy,
}


def run_method(
    method: Method,
    data: DataBundle,
    fold: tuple[set[str], set[str], set[str]],
    config: TrainConfig,
    fold_index: int = 0,
    prepared: PreparedMethod | None = None,
) -> RunOutcome:
    """Grid-search learning rates on one fold; returns the winning
    checkpoint (best-validation epoch) and its test metrics."""
    prep = prepared if prepared is not None else prepare_method_data(method, data)
    if prep.method is not method:
        raise ValueError(f"prepared data is for {prep.method}, not {method}")
    tr_pos, va_pos, te_pos = _split_positions(prep.surveys, fold)
    X = _method_inputs(prep, tr_pos, config)
    method_index = list(Method).index(method)

    best: tuple[float, float, _TrainedModel] | None = None  # (val, lr, model)
    for lr_index, lr in enumerate(config.lr_grid):
        seed_seq = np.random.SeedSequence(
            entropy=config.seed, spawn_key=(method_index, fold_index, lr_index)
        )
        if method is Method.A_POINTS:
            trained = _train_points_mse(X, prep.y, tr_pos, va_pos, config, lr, seed_seq)
        else:
            trained = _TRAINERS[method](prep, X, tr_pos, va_pos, config, lr, seed_seq)
        if (
            best is None
            or trained.best_val < best[0]
            or (trained.best_val == best[0] and lr < best[1])
        ):
            best = (trained.best_val, lr, trained)
    assert best is not None
    _, lr_sel, model = best

    pred, target = _test_metrics(prep, X, model.params, te_pos)
    mae, r2 = evaluate(pred, target)
    result = FoldResult(
        fold=fold_index,
        method=method.value,
        lr=lr_sel,
        mae=mae,
        r2=r2,
        best_val_loss=model.best_val,
        final_val_loss=model.final_val,
        best_epoch=model.best_epoch,
    )
    return RunOutcome(params=model.params, result=result, test_pred=pred, test_target=target)


def _cv_task(args):
    method, data, fold, config, fold_index, prep = args
    outcome = run_method(method, data, fold, config, fold_index=fold_index, prepared=prep)
    return fold_index, outcome.result, outcome.params


def cross_validate(
    methods: list[Method],
    data: DataBundle,
    plan: FoldPlan,
    config: TrainConfig,
    jobs: int = 1,
    checkpoint_dir: str | None = None,
) -> dict[Method, EvalReport]:
    """Run every (method, fold) pair and aggregate per-method reports.

    With `jobs` > 1 folds run in worker processes; results are merged in
    fold order so the output is identical either way.
    """
    plan.validate()
    reports: dict[Method, EvalReport] = {}
    for method in methods:
        prep = prepare_method_data(method, data)
        tasks = [
            (method, data, plan.fold_surveys(i), config, i, prep)
            for i in range(len(plan.folds))
        ]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                raw = list(pool.map(_cv_task, tasks))
        else:
            raw = [_cv_task(t) for t in tasks]
        raw.sort(key=lambda item: item[0])
        results = []
        for fold_index, result, params in raw:
            results.append(result)
            if checkpoint_dir is not None:
                from .nn import save_params
                import os

                save_params(
                    os.path.join(checkpoint_dir, f"checkpoint_{method.value}_fold{fold_index}.bin"),
                    params,
                )
        reports[method] = EvalReport(method=method.value, folds=results)
    return reports


def write_report(path: str, reports: list[EvalReport]) -> None:
    """report.csv: per-fold rows (fold, method, lr, mae, r2) followed by
    'mean' and 'sd' aggregate rows per method. Floats use full round-trip
    precision so identical runs produce identical bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "method", "lr", "mae", "r2"])
        for report in reports:
            for f in report.folds:
                writer.writerow([f.fold, f.method, repr(f.lr), repr(f.mae), repr(f.r2)])
            writer.writerow(["mean", report.method, "", repr(report.mae_mean), repr(report.r2_mean)])
            writer.writerow(["sd", report.method, "", repr(report.mae_sd), repr(report.r2_sd)])


def write_manifest(path: str, entries: dict) -> None:
    """Plain-text `key = value` run manifest."""
    with open(path, "w") as fh:
        for key in sorted(entries):
            fh.write(f"{key} = {entries[key]}\n")


# --------------------------------------------------------------------------
# Map prediction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MapPrediction:
    key: str
    lat: float
    lon: float
    value: float


def predict_map(
    params: ModelParams,
    method: Method,
    data: DataBundle,
    k: int = 8,
    threshold_km: float = 100.0,
    clip: bool = False,
) -> list[MapPrediction]:
    """Predict wealth at every settlement with a trained model.

    Point methods (A, E) run the MLP on settlement embeddings; graph
    methods run the GCN over the full graph (B, C, D) or the
    settlement/phantom graph (F) and report the settlement rows. Raw
    predictions may leave [0, 100] unless `clip` is set.
    """
    if params.arch != method.arch:
        raise ValueError(f"method {method.value} expects {method.arch} params, got {params.arch}")
    if not data.settlements:
        raise ValueError("no settlements to predict at")
    if method in (Method.A_POINTS, Method.E_POINTS_FUZZY):
        X = np.stack([data.embeddings[s.settlement_id] for s in data.settlements])
        out, _ = forward_with_cache(params, X)
        preds = out[:, 0]
        rows = [(s.settlement_id, s.location) for s in data.settlements]
    elif method is Method.F_GRAPH_FUZZY:
        graph, _ = build_fuzzy_graph(
            data.clusters, data.settlements, data.embeddings, data.displacement, k, threshold_km
        )
        out, _ = forward_with_cache(params, graph.embedding_matrix(), NormalizedAdjacency.from_graph(graph))
        n_settlements = len(data.settlements)
        preds = out[:n_settlements, 0]
        rows = [(n.key, n.location) for n in graph.nodes[:n_settlements]]
    else:
        graph = build_full_graph(data.clusters, data.settlements, data.embeddings, k, threshold_km)
        out, _ = forward_with_cache(params, graph.embedding_matrix(), NormalizedAdjacency.from_graph(graph))
        n_clusters = len(data.clusters)
        preds = out[n_clusters:, 0]
        rows = [(n.key, n.location) for n in graph.nodes[n_clusters:]]
    if clip:
        preds = np.clip(preds, 0.0, 100.0)
    return [
        MapPrediction(key=key, lat=loc.lat, lon=loc.lon, value=float(v))
        for (key, loc), v in zip(rows, preds)
    ]
