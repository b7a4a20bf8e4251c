"""k-NN graphs, head-to-body edge transfer and the MixHop graph network.

The network is written directly in numpy with a hand-derived backward
pass. The normalized adjacency is a dense matrix; propagation applies it
through a sparse copy, one power at a time.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .core import EmbeddingSet, l2_normalize_rows
from .errors import (
    ConfigError,
    DegenerateGraphError,
    DimensionError,
    FormatError,
    GraphMismatchError,
    LabelError,
    TrainingDivergedError,
)
from .losses import log_softmax

log = logging.getLogger(__name__)

METRICS = ("one-minus-cosine", "euclidean")
TRANSFER_MODES = ("replace", "union")
ACTIVATIONS = ("relu", "identity")


# ---------------------------------------------------------------------------
# k-NN graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnnGraph:
    """Directed k-NN graph. ``adjacency[i, j]`` is True when j is a neighbor of i.

    ``present`` marks the nodes that carry the graph's channel; the others
    are isolated.
    """

    adjacency: np.ndarray
    present: np.ndarray
    k: int
    channel: str = "body"

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> set[tuple[int, int]]:
        src, dst = np.nonzero(self.adjacency)
        return set(zip(src.tolist(), dst.tolist()))

    def edge_array(self) -> np.ndarray:
        """Edges as an (E, 2) int array sorted by (source, target)."""
        return np.argwhere(self.adjacency)

    def out_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def in_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=0)


def _row_distances(x: np.ndarray, i: int, metric: str) -> np.ndarray:
    # elementwise product then a per-row reduction: identical rows give bit-identical distances
    if metric == "euclidean":
        diff = x - x[i]
        return np.sqrt((diff * diff).sum(axis=1))
    return 1.0 - (x * x[i]).sum(axis=1)


def knn_adjacency(x: np.ndarray, k: int, metric: str = "one-minus-cosine",
                  present: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact k-NN over the rows of ``x`` restricted to ``present`` rows.

    Ties are broken by lower row index. Rows outside ``present`` get no
    edges in or out.
    """
    if k <= 0:
        raise ConfigError(f"k must be >= 1, got {k}")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    n = x.shape[0]
    present = np.ones(n, dtype=bool) if present is None else np.asarray(present, dtype=bool)
    idx = np.flatnonzero(present)
    if idx.size < 2:
        raise DegenerateGraphError(f"need at least 2 nodes with the channel, got {idx.size}")
    sub = x[idx]
    if metric == "one-minus-cosine":
        sub = l2_normalize_rows(sub)
    kk = min(k, idx.size - 1)
    adj = np.zeros((n, n), dtype=bool)
    for local, node in enumerate(idx):
        d = _row_distances(sub, local, metric)
        d[local] = np.inf
        order = np.argsort(d, kind="stable")[:kk]
        adj[node, idx[order]] = True
    return adj


def build_knn_graph(eset: EmbeddingSet, channel: str = "body", k: int = 5,
                    metric: str = "one-minus-cosine") -> KnnGraph:
    present = eset.has_channel(channel)
    x = np.nan_to_num(eset.matrix(channel), nan=0.0)
    adj = knn_adjacency(x, k, metric, present)
    return KnnGraph(adj, present, k, channel)


def transfer_head_edges(head_g: KnnGraph, body_g: KnnGraph, mode: str = "replace") -> KnnGraph:
    """Let head-graph edges dictate body-graph edges among head-bearing nodes.

    ``replace``: for pairs whose endpoints both carry heads, the edge is
    present exactly when it is in the head graph; other pairs keep their
    body edges. ``union``: body edges plus those head edges.
    """
    if head_g.n_nodes != body_g.n_nodes:
        raise GraphMismatchError(f"{head_g.n_nodes} head nodes vs {body_g.n_nodes} body nodes")
    if mode not in TRANSFER_MODES:
        raise ConfigError(f"unknown transfer mode {mode!r}")
    headed = head_g.present
    both = headed[:, None] & headed[None, :]
    head_edges = head_g.adjacency & both
    if mode == "replace":
        adj = np.where(both, head_edges, body_g.adjacency)
    else:
        adj = body_g.adjacency | head_edges
    return KnnGraph(adj, body_g.present.copy(), body_g.k, body_g.channel)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2`` for the symmetrized edge matrix A."""

    matrix: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]


def normalize_adjacency(g) -> NormalizedAdjacency:
    """Accepts a ``KnnGraph`` or a square 0/1 (possibly directed) matrix."""
    adj = g.adjacency if isinstance(g, KnnGraph) else np.asarray(g)
    n = adj.shape[0]
    if n == 0:
        raise DegenerateGraphError("graph has no nodes")
    a = (adj != 0) | (adj != 0).T
    np.fill_diagonal(a, False)
    a = a.astype(np.float64) + np.eye(n)
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    m = a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    # force exact symmetry
    m = 0.5 * (m + m.T)
    return NormalizedAdjacency(m)


def adjacency_powers(adj, max_power: int) -> list[np.ndarray]:
    """``[I, Â, Â², ...]`` up to ``max_power`` by repeated multiplication."""
    a = adj.matrix if isinstance(adj, NormalizedAdjacency) else np.asarray(adj, dtype=np.float64)
    out = [np.eye(a.shape[0])]
    for _ in range(max_power):
        out.append(out[-1] @ a)
    return out


# ---------------------------------------------------------------------------
# MixHop network
# ---------------------------------------------------------------------------


@dataclass
class MixhopLayer:
    powers: tuple[int, ...]
    weights: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.powers = tuple(int(p) for p in self.powers)
        if list(self.powers) != sorted(set(self.powers)) or min(self.powers) < 0:
            raise ConfigError(f"powers must be distinct, ascending and >= 0: {self.powers}")
        if len(self.weights) != len(self.powers):
            raise ConfigError("one weight matrix per power is required")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        shapes = {w.shape for w in self.weights}
        if len(shapes) != 1:
            raise DimensionError(f"weight shapes differ within a layer: {shapes}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return len(self.powers) * self.hidden_dim


@dataclass
class MixhopNet:
    layers: list[MixhopLayer]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def __post_init__(self):
        dim = self.layers[0].in_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != dim:
                raise DimensionError(f"layer {i} expects {layer.in_dim} inputs, gets {dim}")
            dim = layer.out_dim
        self.classifier_weight = np.asarray(self.classifier_weight, dtype=np.float64)
        self.classifier_bias = np.asarray(self.classifier_bias, dtype=np.float64).reshape(-1)
        if self.classifier_weight.shape != (dim, self.classifier_bias.shape[0]):
            raise DimensionError(
                f"classifier weight {self.classifier_weight.shape} does not fit "
                f"{dim} features / {self.classifier_bias.shape[0]} classes"
            )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_classes(self) -> int:
        return self.classifier_bias.shape[0]

    @property
    def max_power(self) -> int:
        return max(max(layer.powers) for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Every trainable array, in a fixed order shared with the gradients."""
        params = [w for layer in self.layers for w in layer.weights]
        return params + [self.classifier_weight, self.classifier_bias]

    def copy(self) -> "MixhopNet":
        layers = [MixhopLayer(l.powers, [w.copy() for w in l.weights], l.activation)
                  for l in self.layers]
        return MixhopNet(layers, self.classifier_weight.copy(), self.classifier_bias.copy())

    def __eq__(self, other):
        if not isinstance(other, MixhopNet):
            return NotImplemented
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.powers != b.powers or a.activation != b.activation:
                return False
        mine, theirs = self.parameters(), other.parameters()
        return len(mine) == len(theirs) and all(
            x.shape == y.shape and np.array_equal(x, y) for x, y in zip(mine, theirs)
        )


def init_mixhop_net(in_dim: int, n_classes: int, depth: int = 3,
                    powers: Sequence[int] = (0, 1, 2), hidden_width: int = 128,
                    seed: int = 0, final_activation: str = "identity") -> MixhopNet:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.

    Hidden layers use ReLU; the last MixHop layer uses ``final_activation``.
    """
    if depth < 1 or hidden_width < 1 or n_classes < 1:
        raise ConfigError("depth, hidden_width and n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    powers = tuple(sorted(set(int(p) for p in powers)))
    layers = []
    dim = in_dim
    for i in range(depth):
        bound = 1.0 / np.sqrt(dim)
        ws = [rng.uniform(-bound, bound, (dim, hidden_width)) for _ in powers]
        act = final_activation if i == depth - 1 else "relu"
        layers.append(MixhopLayer(powers, ws, act))
        dim = len(powers) * hidden_width
    bound = 1.0 / np.sqrt(dim)
    cw = rng.uniform(-bound, bound, (dim, n_classes))
    cb = rng.uniform(-bound, bound, n_classes)
    return MixhopNet(layers, cw, cb)


def identity_net(dim: int) -> MixhopNet:
    """Single layer with P={0}, identity weights and activation, identity classifier."""
    layer = MixhopLayer((0,), [np.eye(dim)], "identity")
    return MixhopNet([layer], np.eye(dim), np.zeros(dim))


def _adj_matrix(adj) -> np.ndarray:
    if isinstance(adj, Propagator):
        return adj.dense
    return adj.matrix if isinstance(adj, NormalizedAdjacency) else np.asarray(adj, dtype=np.float64)


class Propagator:
    """Applies ``Â^j`` to a matrix by repeated sparse products.

    k-NN adjacencies have O(k) nonzeros per row, so this is much cheaper
    than multiplying by materialized dense powers.
    """

    def __init__(self, adj):
        self.dense = _adj_matrix(adj)
        self.sparse = sparse.csr_matrix(self.dense)

    @property
    def n_nodes(self) -> int:
        return self.dense.shape[0]

    def __call__(self, j: int, x: np.ndarray) -> np.ndarray:
        for _ in range(j):
            x = self.sparse @ x
        return x


def _propagator(adj, prop: Optional[Propagator] = None) -> Propagator:
    if prop is not None:
        return prop
    return adj if isinstance(adj, Propagator) else Propagator(adj)


def mixhop_forward(h, adj, layer: MixhopLayer, prop: Optional[Propagator] = None) -> np.ndarray:
    """Concatenate ``sigma(Â^j H W^j)`` over the layer's powers, ascending."""
    h = np.asarray(h, dtype=np.float64)
    n = _adj_matrix(adj).shape[0]
    if h.shape != (n, layer.in_dim):
        raise DimensionError(f"input shape {h.shape}, expected ({n}, {layer.in_dim})")
    prop = _propagator(adj, prop)
    outs = []
    for j, w in zip(layer.powers, layer.weights):
        z = prop(j, h @ w)
        outs.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    return np.concatenate(outs, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _forward_cached(net: MixhopNet, x: np.ndarray, prop: Propagator):
    caches = []
    h = x
    for layer in net.layers:
        pre = [prop(j, h @ w) for j, w in zip(layer.powers, layer.weights)]
        caches.append((h, pre))
        acts = [np.maximum(z, 0.0) if layer.activation == "relu" else z for z in pre]
        h = np.concatenate(acts, axis=1)
    logits = h @ net.classifier_weight + net.classifier_bias
    return h, logits, caches


def _check_features(net: MixhopNet, features, adj) -> tuple[np.ndarray, int]:
    x = np.asarray(features, dtype=np.float64)
    n = _adj_matrix(adj).shape[0]
    if x.ndim != 2 or x.shape != (n, net.in_dim):
        raise DimensionError(f"features shape {x.shape}, expected ({n}, {net.in_dim})")
    return x, n


def gcn_forward(features, adj, net: MixhopNet, prop: Optional[Propagator] = None):
    """Run every MixHop layer then the classifier.

    Returns ``(embeddings, probs)`` where embeddings is the last MixHop
    layer's output.
    """
    x, _ = _check_features(net, features, adj)
    emb, logits, _ = _forward_cached(net, x, _propagator(adj, prop))
    return emb, softmax(logits)


def cross_entropy(probs, labels) -> tuple[float, np.ndarray]:
    """Mean ``-log p[y]`` over labeled rows (label < 0 means unlabeled).

    The second return value is the gradient with respect to the logits
    that produced ``probs`` through a softmax.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError(f"{probs.shape[0]} rows but {labels.shape[0]} labels")
    mask = labels >= 0
    if not mask.any():
        raise LabelError("no labeled nodes")
    if labels.max() >= probs.shape[1]:
        raise LabelError(f"label {labels.max()} out of range for {probs.shape[1]} classes")
    rows = np.flatnonzero(mask)
    n_lab = rows.size
    with np.errstate(divide="ignore"):
        loss = -np.log(probs[rows, labels[rows]]).sum() / n_lab
    grad = np.zeros_like(probs)
    grad[rows] = probs[rows]
    grad[rows, labels[rows]] -= 1.0
    return float(loss), grad / n_lab


def loss_and_grads(net: MixhopNet, features, adj, labels,
                   prop: Optional[Propagator] = None) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy of the network and its gradient for every parameter.

    Gradients come back in the order of ``net.parameters()``.
    """
    x, n = _check_features(net, features, adj)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{n} nodes but {labels.shape[0]} labels")
    mask = labels >= 0
    if not mask.any():
        raise LabelError("no labeled nodes")
    if labels.max() >= net.n_classes:
        raise LabelError(f"label {labels.max()} out of range for {net.n_classes} classes")
    prop = _propagator(adj, prop)
    emb, logits, caches = _forward_cached(net, x, prop)

    rows = np.flatnonzero(mask)
    logp = log_softmax(logits[rows])
    loss = -logp[np.arange(rows.size), labels[rows]].mean()
    g_logits = np.zeros_like(logits)
    g_logits[rows] = np.exp(logp)
    g_logits[rows, labels[rows]] -= 1.0
    g_logits /= rows.size

    g_cw = emb.T @ g_logits
    g_cb = g_logits.sum(axis=0)
    g_h = g_logits @ net.classifier_weight.T

    layer_grads = []
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        h_in, pre = caches[li]
        width = layer.hidden_dim
        g_ws = []
        g_in = np.zeros_like(h_in) if li > 0 else None
        for slot, (j, w) in enumerate(zip(layer.powers, layer.weights)):
            g = g_h[:, slot * width:(slot + 1) * width]
            if layer.activation == "relu":
                g = g * (pre[slot] > 0)
            # Â is symmetric, so its transpose powers equal its powers
            g_prop = prop(j, g)
            g_ws.append(h_in.T @ g_prop)
            if g_in is not None:
                g_in += g_prop @ w.T
        layer_grads.append(g_ws)
        g_h = g_in
    grads = [g for g_ws in reversed(layer_grads) for g in g_ws]
    return float(loss), grads + [g_cw, g_cb]


def train_gcn(features, adj, labels, lr: float = 0.5, epochs: int = 100, seed: int = 0, *,
              depth: int = 3, powers: Sequence[int] = (0, 1, 2), hidden_width: int = 128,
              final_activation: str = "identity", net: Optional[MixhopNet] = None,
              history: Optional[list] = None) -> MixhopNet:
    """Full-batch gradient descent on the node cross-entropy.

    Labels < 0 mark unlabeled nodes. If ``history`` is a list, the loss of
    every epoch (before its update) is appended to it. Raises
    ``TrainingDivergedError`` as soon as the loss stops being finite.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    labeled = labels[labels >= 0]
    if np.unique(labeled).size < 2:
        raise LabelError("training needs at least 2 classes among labeled nodes")
    x = np.asarray(features, dtype=np.float64)
    if net is None:
        net = init_mixhop_net(x.shape[1], int(labeled.max()) + 1, depth, powers,
                              hidden_width, seed, final_activation)
    else:
        net = net.copy()
    prop = _propagator(adj)
    params = net.parameters()
    for epoch in range(epochs):
        loss, grads = loss_and_grads(net, x, adj, labels, prop)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        if history is not None:
            history.append(loss)
        for p, g in zip(params, grads):
            p -= lr * g
        log.debug("epoch %d loss %.6f", epoch, loss)
    return net


def extract_updated_features(net: MixhopNet, features, adj, prop: Optional[Propagator] = None) -> np.ndarray:
    """L2-normalized output of the last MixHop layer (classifier skipped)."""
    x, _ = _check_features(net, features, adj)
    prop = _propagator(adj, prop)
    h = x
    for layer in net.layers:
        h = mixhop_forward(h, adj, layer, prop)
    return l2_normalize_rows(h)


def accuracy(net: MixhopNet, features, adj, labels) -> float:
    labels = np.asarray(labels)
    _, probs = gcn_forward(features, adj, net)
    mask = labels >= 0
    return float((probs[mask].argmax(axis=1) == labels[mask]).mean())


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

NET_MAGIC = b"UDGN"
NET_VERSION = 1


def net_to_bytes(net: MixhopNet) -> bytes:
    """Little-endian layout: magic, u32 version, u32 layer count, then per
    layer u32 |P|, u32 powers, u32 in_dim, u32 hidden_dim, u8 activation,
    f64 weights row-major; finally u32 out_dim, u32 classes, f64 classifier
    weight and bias."""
    buf = io.BytesIO()
    buf.write(NET_MAGIC)
    buf.write(struct.pack("<II", NET_VERSION, len(net.layers)))
    for layer in net.layers:
        buf.write(struct.pack("<I", len(layer.powers)))
        buf.write(struct.pack(f"<{len(layer.powers)}I", *layer.powers))
        buf.write(struct.pack("<IIB", layer.in_dim, layer.hidden_dim,
                              ACTIVATIONS.index(layer.activation)))
        for w in layer.weights:
            buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    buf.write(struct.pack("<II", net.out_dim, net.n_classes))
    buf.write(np.ascontiguousarray(net.classifier_weight, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(net.classifier_bias, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated data at byte offset {self.pos} (needed {n} bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int, dtype: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * size), dtype=dtype).astype(np.float64)


def net_from_bytes(data: bytes) -> MixhopNet:
    r = _Reader(data)
    if r.take(4) != NET_MAGIC:
        raise FormatError("bad magic: not a UDGN network file")
    version, n_layers = r.unpack("<II")
    if version != NET_VERSION:
        raise FormatError(f"unsupported network file version {version}")
    layers = []
    for _ in range(n_layers):
        (n_pow,) = r.unpack("<I")
        powers = r.unpack(f"<{n_pow}I")
        in_dim, hidden, act = r.unpack("<IIB")
        if act >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {act} at byte offset {r.pos - 1}")
        ws = [r.floats(in_dim * hidden, "<f8").reshape(in_dim, hidden) for _ in powers]
        layers.append(MixhopLayer(powers, ws, ACTIVATIONS[act]))
    out_dim, n_classes = r.unpack("<II")
    cw = r.floats(out_dim * n_classes, "<f8").reshape(out_dim, n_classes)
    cb = r.floats(n_classes, "<f8")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes at offset {r.pos}")
    return MixhopNet(layers, cw, cb)


def save_net(net: MixhopNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(net_to_bytes(net))


def load_net(path) -> MixhopNet:
    with open(path, "rb") as fh:
        return net_from_bytes(fh.read())
