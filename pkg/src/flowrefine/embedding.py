"""Position-aware matching costs between two point-cloud frames.

A small MLP scores each (point, neighbor) feature pair, a second one encodes
the relative position layout, and a third turns the two into per-channel
attention over the neighborhood. The aggregated cost vector per point is the
attention-weighted sum of the pair costs. Weights are plain dense layers
stored in a human-readable text format; initialization is seeded Gaussian,
std 0.1.

This module only needs the forward pass; training happens elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputFileError
from .geometry import PointCloud, knn_search

_ACTIVATIONS = ("relu", "identity")

INIT_STD = 0.1


@dataclass(frozen=True)
class MlpLayer:
    """One dense layer y = act(x W^T + b); weight is (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("layer weight must be (out, in)")
        if b.shape != (w.shape[0],):
            raise ValueError("layer bias must be (out,)")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters contain non-finite values")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.T + self.bias
        if self.activation == "relu":
            np.maximum(y, 0.0, out=y)
        return y


@dataclass(frozen=True)
class Mlp:
    """Dense layers applied in order; dimensions must chain."""

    layers: tuple[MlpLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            y = layer(y)
        return y


def mlp_from_dims(dims, seed: int = 0, std: float = INIT_STD) -> Mlp:
    """Seeded Gaussian init: hidden layers relu, final layer identity."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for li in range(len(dims) - 1):
        act = "identity" if li == len(dims) - 2 else "relu"
        w = rng.normal(0.0, std, size=(dims[li + 1], dims[li]))
        b = np.zeros(dims[li + 1])
        layers.append(MlpLayer(weight=w, bias=b, activation=act))
    return Mlp(layers=tuple(layers))


def identity_mlp(dim: int) -> Mlp:
    """Pass-through network, handy for pinning outputs in small examples."""
    return Mlp(layers=(MlpLayer(weight=np.eye(dim), bias=np.zeros(dim),
                                activation="identity"),))


@dataclass(frozen=True)
class EmbeddingConfig:
    """Networks and neighborhood size for the matching-cost forward pass.

    cost: scores feature pairs, input 2f+3 (f_i, f_j, p_j - p_i).
    position: encodes layout, input 10 (p_i, p_j, p_i - p_j, ||p_i - p_j||).
    attention: logits from (cost difference, position code); its output width
    must equal the cost width so the softmax is per channel.
    """

    neighbor_k: int
    cost: Mlp
    position: Mlp
    attention: Mlp

    def __post_init__(self):
        if self.neighbor_k < 1:
            raise ValueError("neighbor_k must be >= 1")
        if self.position.in_dim != 10:
            raise ValueError("position network input must be 10")
        if self.attention.in_dim != self.cost.out_dim + self.position.out_dim:
            raise ValueError("attention input must be cost_dim + pos_dim")
        if self.attention.out_dim != self.cost.out_dim:
            raise ValueError("attention output must match cost_dim")

    @property
    def cost_dim(self) -> int:
        return self.cost.out_dim

    @property
    def pos_dim(self) -> int:
        return self.position.out_dim

    @property
    def feature_dim(self) -> int:
        return (self.cost.in_dim - 3) // 2

    @classmethod
    def seeded(cls, feature_dim: int, neighbor_k: int = 8, cost_dim: int = 16,
               pos_dim: int = 8, hidden_dim: int = 32, seed: int = 0) -> "EmbeddingConfig":
        """Three fresh seeded networks with one hidden layer each."""
        return cls(
            neighbor_k=neighbor_k,
            cost=mlp_from_dims([2 * feature_dim + 3, hidden_dim, cost_dim], seed=seed),
            position=mlp_from_dims([10, hidden_dim, pos_dim], seed=seed + 1),
            attention=mlp_from_dims([cost_dim + pos_dim, hidden_dim, cost_dim], seed=seed + 2),
        )


def matching_cost(fi, fj, pi, pj, cost_net: Mlp) -> np.ndarray:
    """Score of matching point i (features fi at pi) to j: net(fi, fj, pj - pi).
    Broadcasts over leading axes."""
    fi = np.asarray(fi, dtype=np.float64)
    fj = np.asarray(fj, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    pj = np.asarray(pj, dtype=np.float64)
    fi, fj = np.broadcast_arrays(fi, fj)
    return cost_net(np.concatenate([fi, fj, pj - pi], axis=-1))


def pseudo_cost(fi, pi, cost_net: Mlp) -> np.ndarray:
    """Self-match score net(fi, fi, 0): the reference a real match is compared
    against. Equals matching_cost(fi, fi, pi, pi, net); pi never enters the
    value but keeps the call shape parallel."""
    fi = np.asarray(fi, dtype=np.float64)
    zeros = np.zeros(fi.shape[:-1] + (3,))
    return cost_net(np.concatenate([fi, fi, zeros], axis=-1))


def cost_difference(pair_cost, self_cost) -> np.ndarray:
    """Match score relative to the self-match baseline."""
    a = np.asarray(pair_cost, dtype=np.float64)
    b = np.asarray(self_cost, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("cost widths differ")
    return a - b


def position_encoding(pi, pj, position_net: Mlp) -> np.ndarray:
    """Layout code net(p_i, p_j, p_i - p_j, ||p_i - p_j||)."""
    pi = np.asarray(pi, dtype=np.float64)
    pj = np.asarray(pj, dtype=np.float64)
    pi, pj = np.broadcast_arrays(pi, pj)
    diff = pi - pj
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    return position_net(np.concatenate([pi, pj, diff, dist], axis=-1))


def aggregation_weights(cost_diff, pos_code, attention_net: Mlp) -> np.ndarray:
    """Per-channel softmax over the neighbor axis (second to last) of the
    attention logits. Rows sum to one per channel."""
    u = np.asarray(cost_diff, dtype=np.float64)
    s = np.asarray(pos_code, dtype=np.float64)
    if u.shape[:-1] != s.shape[:-1]:
        raise ValueError("cost/position stacks must align")
    logits = attention_net(np.concatenate([u, s], axis=-1))
    logits = logits - logits.max(axis=-2, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-2, keepdims=True)


def cross_frame_neighbors(cloud_t, cloud_t1, k: int) -> np.ndarray:
    """Default frame-t -> frame-t+1 neighborhood: the k nearest t+1 points of
    each t point."""
    p0 = cloud_t.points if isinstance(cloud_t, PointCloud) else np.asarray(cloud_t, dtype=np.float64)
    p1 = cloud_t1.points if isinstance(cloud_t1, PointCloud) else np.asarray(cloud_t1, dtype=np.float64)
    return knn_search(p1, p0, k)


def flow_embedding(cloud_t: PointCloud, cloud_t1: PointCloud, graph,
                   config: EmbeddingConfig) -> np.ndarray:
    """Aggregated matching-cost vector per point of frame t, shape (n, cost_dim).

    graph holds, per frame-t point, indices of its frame-t+1 neighborhood
    (see cross_frame_neighbors for the default).
    """
    if cloud_t.features is None or cloud_t1.features is None:
        raise ValueError("features required")
    f = config.feature_dim
    if cloud_t.feature_dim != f or cloud_t1.feature_dim != f:
        raise ValueError(f"networks expect {f}-dim features")
    nbrs = np.asarray(graph, dtype=np.int64)
    if nbrs.ndim != 2 or nbrs.shape[0] != len(cloud_t):
        raise ValueError("graph must be (n_t, k) neighbor indices")
    if nbrs.size and (nbrs.min() < 0 or nbrs.max() >= len(cloud_t1)):
        raise ValueError("graph indices out of range")
    if nbrs.shape[1] < 1:
        raise ValueError("graph needs at least one neighbor per point")
    p0 = cloud_t.points
    p1 = cloud_t1.points
    k = nbrs.shape[1]

    fi = np.broadcast_to(cloud_t.features[:, None, :], (len(cloud_t), k, f))
    fj = cloud_t1.features[nbrs]
    pi = np.broadcast_to(p0[:, None, :], (len(cloud_t), k, 3))
    pj = p1[nbrs]

    pair = matching_cost(fi, fj, pi, pj, config.cost)
    base = pseudo_cost(cloud_t.features, p0, config.cost)
    u = cost_difference(pair, base[:, None, :])
    s = position_encoding(pi, pj, config.position)
    w = aggregation_weights(u, s, config.attention)
    return np.einsum("nkc,nkc->nc", w, pair)


def baseline_initial_flow(cloud_t, cloud_t1, k: int = 4, tau: float = 0.01) -> np.ndarray:
    """Soft-correspondence flow: softmax over the k nearest frame-t+1
    neighbors of -||p_i - p_j||^2 / tau, averaging the offsets p_j - p_i."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    p0 = cloud_t.points if isinstance(cloud_t, PointCloud) else np.asarray(cloud_t, dtype=np.float64)
    p1 = cloud_t1.points if isinstance(cloud_t1, PointCloud) else np.asarray(cloud_t1, dtype=np.float64)
    nbrs = knn_search(p1, p0, k)
    offsets = p1[nbrs] - p0[:, None, :]
    d2 = np.einsum("nkj,nkj->nk", offsets, offsets)
    logits = -d2 / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkj->nj", w, offsets)


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    arr = np.atleast_2d(np.asarray(array, dtype=np.float64))
    fh.write(f"tensor {name} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# On-disk tensor-name prefixes for the three networks. Fixed by the file
# format; do not change.
_NET_PREFIXES = (("h", "cost"), ("ms", "position"), ("ma", "attention"))


def save_weights(path, config: EmbeddingConfig) -> None:
    """Text format: one 'tensor <name> <rows> <cols>' header per tensor,
    followed by row-major values. Biases are stored as one row. Tensor names
    are h.<i>.weight/bias for the cost net, ms.* for the position net, and
    ma.* for the attention net."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"neighbor_k {config.neighbor_k}\n")
        for prefix, attr in _NET_PREFIXES:
            net = getattr(config, attr)
            for li, layer in enumerate(net.layers):
                _write_tensor(fh, f"{prefix}.{li}.weight", layer.weight)
                _write_tensor(fh, f"{prefix}.{li}.bias", layer.bias[None, :])


def load_weights(path) -> EmbeddingConfig:
    """Inverse of save_weights; values round-trip exactly."""
    tensors: dict[str, np.ndarray] = {}
    neighbor_k = None
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        tokens = fh.read().split()
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise InputFileError(f"{path}: unexpected end of file")
        tok = tokens[pos]
        pos += 1
        return tok

    while pos < len(tokens):
        head = take()
        if head == "neighbor_k":
            try:
                neighbor_k = int(take())
            except ValueError:
                raise InputFileError(f"{path}: bad neighbor_k value") from None
        elif head == "tensor":
            name = take()
            try:
                rows = int(take())
                cols = int(take())
            except ValueError:
                raise InputFileError(f"{path}: bad shape for tensor '{name}'") from None
            count = rows * cols
            if pos + count > len(tokens):
                raise InputFileError(f"{path}: tensor '{name}' is truncated")
            try:
                values = np.array([float(t) for t in tokens[pos:pos + count]])
            except ValueError:
                raise InputFileError(f"{path}: non-numeric value in tensor '{name}'") from None
            pos += count
            tensors[name] = values.reshape(rows, cols)
        else:
            raise InputFileError(f"{path}: unexpected token '{head}'")
    if neighbor_k is None:
        raise InputFileError(f"{path}: missing neighbor_k")

    nets = {}
    for prefix, attr in _NET_PREFIXES:
        layers = []
        li = 0
        while f"{prefix}.{li}.weight" in tensors:
            w = tensors.pop(f"{prefix}.{li}.weight")
            bkey = f"{prefix}.{li}.bias"
            if bkey not in tensors:
                raise InputFileError(f"{path}: missing {bkey}")
            b = tensors.pop(bkey)[0]
            layers.append((w, b))
            li += 1
        if not layers:
            raise InputFileError(f"{path}: network '{prefix}' has no layers")
        built = tuple(
            MlpLayer(weight=w, bias=b,
                     activation="identity" if i == len(layers) - 1 else "relu")
            for i, (w, b) in enumerate(layers)
        )
        nets[attr] = Mlp(layers=built)
    if tensors:
        raise InputFileError(f"{path}: unexpected tensors {sorted(tensors)}")
    try:
        return EmbeddingConfig(neighbor_k=neighbor_k, cost=nets["cost"],
                               position=nets["position"], attention=nets["attention"])
    except ValueError as exc:
        raise InputFileError(f"{path}: {exc}") from None
