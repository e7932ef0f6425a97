"""Dense and graph neural-network kernels with exact reverse-mode gradients.

Two small architectures share one parameter layout (three layers of
64 -> 128 -> 128 -> 1, 24,961 parameters each):

- MLP: linear-ReLU, linear-ReLU, linear, applied row-wise.
- GCN: two graph convolutions (symmetric-normalized weighted adjacency with
  unit self-loops) with ReLU, then a final linear readout.

Everything is float64. numpy/scipy supply the dense and sparse matrix
products; the layer semantics, normalization, backward passes, losses, and
the AdamW update are implemented here and verified against central finite
differences by :func:`grad_check`. Kernels reject NaN/Inf inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

ARCH_MLP = "mlp"
ARCH_GCN = "gcn"
DEFAULT_DIMS = (64, 128, 128, 1)

PARAM_MAGIC = b"GWPARAM1"
_ARCH_TAGS = {ARCH_MLP: 0, ARCH_GCN: 1}
_TAG_ARCHS = {v: k for k, v in _ARCH_TAGS.items()}


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")


@dataclass
class ModelParams:
    """Flat parameter store: per-layer (in x out) weight and (out,) bias."""

    arch: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
        )

    def check_finite(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            _require_finite(f"weight[{i}]", w)
            _require_finite(f"bias[{i}]", b)


def init_params(
    arch: str, rng: np.random.Generator, dims: tuple[int, ...] = DEFAULT_DIMS
) -> ModelParams:
    """Fan-in-scaled uniform weights (U[-1/sqrt(fan_in), 1/sqrt(fan_in)]),
    zero biases."""
    if arch not in (ARCH_MLP, ARCH_GCN):
        raise ValueError(f"unknown architecture {arch!r}")
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return ModelParams(arch=arch, weights=weights, biases=biases)


# --------------------------------------------------------------------------
# Adjacency normalization
# --------------------------------------------------------------------------


class NormalizedAdjacency:
    """Symmetric-normalized weighted adjacency with unit self-loops:
    D^{-1/2} (A + I) D^{-1/2}, where D is the weighted degree of A + I.

    Precompute once per graph and reuse across layers and epochs.
    """

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray, n: int):
        weights = np.asarray(weights, dtype=np.float64)
        _require_finite("edge weights", weights)
        if weights.size and weights.min() <= 0:
            raise ValueError("edge weights must be positive")
        self.n = int(n)
        deg = np.ones(self.n)  # self-loop weight 1
        rows = np.repeat(np.arange(self.n), np.diff(indptr))
        np.add.at(deg, rows, weights)
        inv_sqrt = 1.0 / np.sqrt(deg)
        all_rows = np.concatenate([rows, np.arange(self.n)])
        all_cols = np.concatenate([indices, np.arange(self.n)])
        all_vals = np.concatenate([weights * inv_sqrt[rows] * inv_sqrt[indices], inv_sqrt * inv_sqrt])
        self.matrix = sp.csr_matrix((all_vals, (all_rows, all_cols)), shape=(self.n, self.n))

    def propagate(self, X: np.ndarray) -> np.ndarray:
        return self.matrix @ X

    @classmethod
    def from_graph(cls, graph) -> "NormalizedAdjacency":
        return cls(graph.indptr, graph.indices, graph.weights, graph.n_nodes)


def _as_adjacency(adj) -> NormalizedAdjacency:
    if isinstance(adj, NormalizedAdjacency):
        return adj
    return NormalizedAdjacency.from_graph(adj)


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class _Cache:
    inputs: list[np.ndarray]   # per layer: what the weight multiplied (post-propagation)
    pres: list[np.ndarray]     # pre-activation of the two hidden layers
    adj: NormalizedAdjacency | None


def _forward_cached(params: ModelParams, X: np.ndarray, adj: NormalizedAdjacency | None) -> tuple[np.ndarray, _Cache]:
    h = X
    inputs, pres = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if adj is not None and i < last:
            h = adj.propagate(h)
        inputs.append(h)
        h = h @ w + b
        if i < last:
            pres.append(h)
            h = np.maximum(h, 0.0)
    return h, _Cache(inputs=inputs, pres=pres, adj=adj)


def _backward(params: ModelParams, cache: _Cache, grad_out: np.ndarray) -> ModelParams:
    grads = params.zeros_like()
    g = grad_out
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (cache.pres[i] > 0.0)
        grads.weights[i] = cache.inputs[i].T @ g
        grads.biases[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i].T
            # Only the conv layers propagated; their operator is symmetric,
            # so its transpose is itself.
            if cache.adj is not None and i < last:
                g = cache.adj.propagate(g)
    return grads


def _check_forward_args(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input shape {X.shape} incompatible with first layer {params.weights[0].shape}"
        )
    _require_finite("input", X)
    params.check_finite()
    return X


def mlp_forward(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Row-wise forward pass; returns an (n, 1) prediction matrix."""
    if params.arch != ARCH_MLP:
        raise ValueError(f"expected {ARCH_MLP} params, got {params.arch}")
    X = _check_forward_args(params, X)
    out, _ = _forward_cached(params, X, None)
    return out


def gcn_conv(weight: np.ndarray, bias: np.ndarray, X: np.ndarray, adj) -> np.ndarray:
    """One graph convolution: normalized-adjacency propagation followed by a
    linear map. `adj` is a :class:`NormalizedAdjacency` or anything with CSR
    attributes (indptr, indices, weights, n_nodes)."""
    X = np.asarray(X, dtype=np.float64)
    _require_finite("input", X)
    _require_finite("weight", weight)
    _require_finite("bias", bias)
    norm = _as_adjacency(adj)
    if X.shape[0] != norm.n:
        raise ValueError(f"X has {X.shape[0]} rows but graph has {norm.n} nodes")
    if X.shape[1] != weight.shape[0]:
        raise ValueError(f"X cols {X.shape[1]} != weight rows {weight.shape[0]}")
    return norm.propagate(X) @ weight + bias


def gcn_forward(params: ModelParams, X: np.ndarray, adj) -> np.ndarray:
    """conv-ReLU, conv-ReLU, linear readout; returns (n, 1)."""
    if params.arch != ARCH_GCN:
        raise ValueError(f"expected {ARCH_GCN} params, got {params.arch}")
    X = _check_forward_args(params, X)
    norm = _as_adjacency(adj)
    if X.shape[0] != norm.n:
        raise ValueError(f"X has {X.shape[0]} rows but graph has {norm.n} nodes")
    out, _ = _forward_cached(params, X, norm)
    return out


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to `pred`."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty prediction")
    if pred.shape[0] != target.shape[0] or pred.size != target.size:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    _require_finite("pred", pred)
    _require_finite("target", target)
    n = pred.shape[0]
    diff = pred.reshape(n) - target.reshape(n)
    loss = float(np.sum(diff * diff) / n)
    grad = (2.0 * diff / n).reshape(pred.shape)
    return loss, grad


def fuzzy_loss(
    pred_by_node: np.ndarray, assignments: list, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Label-spreading squared loss.

    Each label j is spread over candidate nodes i with probabilities P_ji:
    loss = (1/N_l) * sum_j sum_i P_ji * (pred_i - y_j)^2. The gradient is
    accumulated per node. With a single unit-probability candidate per label
    this reduces to :func:`mse_loss` in the exact same summation order.
    """
    pred = np.asarray(pred_by_node, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("empty labels")
    _require_finite("pred", pred)
    _require_finite("labels", labels)
    flat = pred.reshape(pred.shape[0])
    n_l = labels.shape[0]
    idx_parts, p_parts, y_parts = [], [], []
    for a in assignments:
        total = float(np.sum(a.probs))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(
                f"assignment for label {a.label_index} is unnormalized (sum={total!r})"
            )
        if np.any(a.probs < 0):
            raise ValueError(f"assignment for label {a.label_index} has negative probability")
        if a.node_indices.size and (a.node_indices.min() < 0 or a.node_indices.max() >= flat.size):
            raise ValueError(f"assignment for label {a.label_index} references missing nodes")
        idx_parts.append(a.node_indices)
        p_parts.append(a.probs)
        y_parts.append(np.full(a.node_indices.size, labels[a.label_index]))
    idx = np.concatenate(idx_parts) if idx_parts else np.empty(0, dtype=np.int64)
    p = np.concatenate(p_parts) if p_parts else np.empty(0)
    y = np.concatenate(y_parts) if y_parts else np.empty(0)
    diff = flat[idx] - y
    loss = float(np.sum(p * (diff * diff)) / n_l)
    grad_flat = np.zeros_like(flat)
    np.add.at(grad_flat, idx, 2.0 * p * diff / n_l)
    return loss, grad_flat.reshape(pred.shape)


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Optimizer state; moment buffers mirror the parameter layout. Weight
    decay is decoupled and applied to weights only, never biases."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, **kwargs) -> "AdamWState":
        state = cls(lr=lr, **kwargs)
        state.m_w = [np.zeros_like(w) for w in params.weights]
        state.v_w = [np.zeros_like(w) for w in params.weights]
        state.m_b = [np.zeros_like(b) for b in params.biases]
        state.v_b = [np.zeros_like(b) for b in params.biases]
        return state


def adamw_step(params: ModelParams, grads: ModelParams, state: AdamWState) -> tuple[ModelParams, AdamWState]:
    """One decoupled-weight-decay Adam update, in place, with bias correction."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    def update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, decay: bool) -> None:
        if decay and state.weight_decay != 0.0:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    for p, g, m, v in zip(params.weights, grads.weights, state.m_w, state.v_w):
        update(p, g, m, v, decay=True)
    for p, g, m, v in zip(params.biases, grads.biases, state.m_b, state.v_b):
        update(p, g, m, v, decay=False)
    return params, state


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def _param_views(params: ModelParams) -> list[np.ndarray]:
    return list(params.weights) + list(params.biases)


def grad_check(
    loss_fn,
    params: ModelParams,
    n_samples: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over a random subsample of parameters.

    `loss_fn(params)` must return (loss, grads) deterministically; two
    identical evaluations that disagree raise RuntimeError.
    """
    loss_a, grads_a = loss_fn(params)
    loss_b, grads_b = loss_fn(params)
    same = loss_a == loss_b and all(
        np.array_equal(ga, gb)
        for ga, gb in zip(_param_views(grads_a), _param_views(grads_b))
    )
    if not same:
        raise RuntimeError("loss_fn is non-deterministic; gradient check is meaningless")

    views = _param_views(params)
    grad_views = _param_views(grads_a)
    sizes = [v.size for v in views]
    total = sum(sizes)
    starts = np.cumsum([0] + sizes)
    rng = np.random.Generator(np.random.PCG64(seed))
    flat_ids = rng.choice(total, size=min(n_samples, total), replace=False)

    work = params.copy()
    work_views = _param_views(work)
    max_err = 0.0
    for fid in flat_ids:
        which = int(np.searchsorted(starts, fid, side="right") - 1)
        local = int(fid - starts[which])
        orig = work_views[which].flat[local]
        work_views[which].flat[local] = orig + h
        up, _ = loss_fn(work)
        work_views[which].flat[local] = orig - h
        down, _ = loss_fn(work)
        work_views[which].flat[local] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = grad_views[which].flat[local]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_params(path: str, params: ModelParams) -> None:
    """Binary checkpoint: magic, architecture tag byte, then per layer u32 LE
    (rows, cols), rows*cols f64 LE weight values, cols f64 LE bias values."""
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(bytes([_ARCH_TAGS[params.arch]]))
        for w, b in zip(params.weights, params.biases):
            rows, cols = w.shape
            if b.shape != (cols,):
                raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")
            fh.write(struct.pack("<II", rows, cols))
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_params(path: str) -> ModelParams:
    """Bit-exact inverse of :func:`save_params`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise ValueError(f"{path}: bad magic, not a parameter checkpoint")
    off = len(PARAM_MAGIC)
    if off >= len(data) or data[off] not in _TAG_ARCHS:
        raise ValueError(f"{path}: unknown architecture tag")
    arch = _TAG_ARCHS[data[off]]
    off += 1
    weights, biases = [], []
    while off < len(data):
        if off + 8 > len(data):
            raise ValueError(f"{path}: truncated layer header")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        need = 8 * (rows * cols + cols)
        if off + need > len(data):
            raise ValueError(f"{path}: truncated layer data")
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=cols, offset=off)
        off += 8 * cols
        weights.append(w.copy())
        biases.append(b.copy())
    if not weights:
        raise ValueError(f"{path}: no layers")
    return ModelParams(arch=arch, weights=weights, biases=biases)
