"""The subtree-centric generator network.

Three stages share one computation tape:

  1. tree encoder   -- each extracted subtree runs through a shared GCN
                       stack, is average-pooled and projected to a fixed
                       embedding;
  2. aggregator     -- nodes and subtrees become the two blocks of a
                       bipartite membership graph and exchange messages
                       through further GCN layers;
  3. pairwise decoder -- for every node pair (i < j) the features
                       [h_i | h_j | |h_i - h_j|] feed two parallel MLP
                       heads, one emitting an edge-existence logit and one
                       a sigmoid edge weight; values are mirrored to (j, i).

The fused prediction hard-masks the weight matrix by the thresholded
structure probabilities, so the structure head decides which entries
survive and the weight head decides their magnitude.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graphs import WeightedGraph, normalize_adjacency
from .subtrees import Subtree, extract_all, tree_adjacency

VARIANTS = ("full", "no_struct", "no_weight")

# stand-in for -inf on the logit diagonal; keeps arithmetic finite
NEG_LARGE = -1e9

_INIT_STREAM = 101  # rng domain tag, keeps init draws off other streams


class ConfigMismatchError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n: int = 35
    m: int = 15
    k: int = 1
    d_hidden: int = 32
    d_out: int = 16
    layers_encoder: int = 2
    layers_aggregator: int = 2
    decoder_hidden: int = 32
    variant: str = "full"

    def __post_init__(self):
        for name in ("n", "m", "k", "d_hidden", "d_out", "layers_encoder", "layers_aggregator", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.m > self.n:
            raise ValueError(f"m={self.m} exceeds n={self.n}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def encoder_dims(self) -> list:
        return [self.n] + [self.d_hidden] * (self.layers_encoder - 1) + [self.d_out]

    def aggregator_dims(self) -> list:
        return [self.d_out] + [self.d_hidden] * (self.layers_aggregator - 1) + [self.d_out]


class ModelParams:
    """All trainable tensors, named, in a fixed order.

    The embedding width D equals d_out, so the projection after pooling is
    d_out x d_out and tree embeddings enter the aggregator through a square
    map.  GCN layers carry no bias; the pooling projection and the decoder
    MLPs do.
    """

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        out = {}
        pos = 0
        for name, v in self.tensors.items():
            out[name] = flat[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return ModelParams(out)


def _shapes(config: ModelConfig) -> dict:
    d = config.d_out
    enc = config.encoder_dims()
    agg = config.aggregator_dims()
    shapes = {}
    for i in range(config.layers_encoder):
        shapes[f"enc{i}.w"] = (enc[i], enc[i + 1])
    shapes["proj.w"] = (d, d)
    shapes["proj.b"] = (1, d)
    shapes["node_proj.w"] = (config.n, d)
    shapes["tree_proj.w"] = (d, d)
    for i in range(config.layers_aggregator):
        shapes[f"agg{i}.w"] = (agg[i], agg[i + 1])
    for head in ("struct", "weight"):
        shapes[f"{head}.w1"] = (3 * d, config.decoder_hidden)
        shapes[f"{head}.b1"] = (1, config.decoder_hidden)
        shapes[f"{head}.w2"] = (config.decoder_hidden, 1)
        shapes[f"{head}.b2"] = (1, 1)
    return shapes


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng([seed, _INIT_STREAM])
    tensors = {}
    for name, shape in _shapes(config).items():
        if name.endswith(".b") or ".b" in name.rsplit(".", 1)[-1]:
            tensors[name] = np.zeros(shape)
        else:
            lim = glorot_limit(shape[0], shape[1])
            tensors[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(tensors)


@dataclasses.dataclass(frozen=True)
class BipartiteGraph:
    """(N + m)-node membership graph: rows 0..N-1 are graph nodes, rows
    N..N+m-1 are subtrees, with an edge (i, N+k) iff node i is in tree k."""

    size: int
    adj: np.ndarray

    def __post_init__(self):
        adj = np.array(self.adj, dtype=np.float64)
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)


def build_bipartite(n: int, trees: list) -> BipartiteGraph:
    m = len(trees)
    adj = np.zeros((n + m, n + m))
    for k, t in enumerate(trees):
        for v in t.nodes:
            if v >= n:
                raise ValueError(f"tree node {v} out of range for n={n}")
            adj[v, n + k] = 1.0
            adj[n + k, v] = 1.0
    return BipartiteGraph(size=n + m, adj=adj)


@dataclasses.dataclass(frozen=True)
class DecodedGraph:
    """Raw decoder heads plus the fused prediction.

    logits: symmetric, diagonal fixed at NEG_LARGE.
    weights: symmetric, off-diagonal in (0, 1), zero diagonal.
    fused: valid WeightedGraph combining both heads.
    """

    logits: np.ndarray
    weights: np.ndarray
    fused: WeightedGraph

    def __post_init__(self):
        for name in ("logits", "weights"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def fuse(logits: np.ndarray, weights: np.ndarray, variant: str = "full") -> WeightedGraph:
    """Combine the two heads into one weighted prediction.

    full:      weights hard-masked where the edge probability >= 0.5
    no_struct: the weight head alone (no structure mask exists)
    no_weight: the structure probability itself, masked the same way
    """
    mask = (logits >= 0.0).astype(np.float64)  # sigmoid(l) >= 0.5  <=>  l >= 0
    np.fill_diagonal(mask, 0.0)
    if variant == "full":
        fused = weights * mask
    elif variant == "no_struct":
        fused = weights.copy()
    elif variant == "no_weight":
        probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
        fused = probs * mask
    else:
        raise ValueError(f"unknown variant {variant!r}")
    np.fill_diagonal(fused, 0.0)
    return WeightedGraph(fused)


# ---------------------------------------------------------------------------
# forward pass


@dataclasses.dataclass(frozen=True)
class Prepared:
    """Per-sample constants: extraction and normalizations are parameter-free,
    so they are computed once and reused across epochs."""

    graph: WeightedGraph
    trees: tuple
    tree_norms: tuple  # normalized subtree adjacencies
    tree_feats: tuple  # node feature rows per subtree
    bip_norm: np.ndarray
    iu: np.ndarray
    ju: np.ndarray


def prepare(g: WeightedGraph, config: ModelConfig) -> Prepared:
    if g.n != config.n:
        raise ConfigMismatchError(f"graph has {g.n} nodes, model expects {config.n}")
    trees = extract_all(g, config.m, config.k)
    tree_norms = tuple(normalize_adjacency(tree_adjacency(t)) for t in trees)
    tree_feats = tuple(g.adj[np.array(t.nodes), :] for t in trees)
    bip = build_bipartite(g.n, trees)
    iu, ju = np.triu_indices(g.n, k=1)
    return Prepared(
        graph=g,
        trees=tuple(trees),
        tree_norms=tree_norms,
        tree_feats=tree_feats,
        bip_norm=normalize_adjacency(bip.adj),
        iu=iu,
        ju=ju,
    )


def bind(tape: ad.Tape, params: ModelParams, trainable: bool = True) -> dict:
    """Wrap every parameter tensor as a leaf on ``tape``."""
    return {name: tape.leaf(v, requires_grad=trainable) for name, v in params.tensors.items()}


def gcn_layer(a_norm, h: ad.Node, w: ad.Node) -> ad.Node:
    """One graph convolution: relu(a_norm @ h @ w)."""
    a_node = a_norm if isinstance(a_norm, ad.Node) else h.tape.constant(a_norm)
    return ad.relu(ad.matmul(ad.matmul(a_node, h), w))


def encode_subtree(tape: ad.Tape, pn: dict, a_norm: np.ndarray, feats: np.ndarray, config: ModelConfig) -> ad.Node:
    """Shared-GCN encoding of one subtree followed by average pooling and an
    affine projection; returns a 1 x D embedding node."""
    h = tape.constant(feats)
    for i in range(config.layers_encoder):
        h = gcn_layer(a_norm, h, pn[f"enc{i}.w"])
    pooled = ad.mean_rows(h)
    return ad.broadcast_add_rowvec(ad.matmul(pooled, pn["proj.w"]), pn["proj.b"])


def encode_all(tape: ad.Tape, pn: dict, prep: Prepared, config: ModelConfig) -> ad.Node:
    """Stack the m subtree embeddings into an m x D matrix (row k = tree k)."""
    rows = [
        encode_subtree(tape, pn, a_norm, feats, config)
        for a_norm, feats in zip(prep.tree_norms, prep.tree_feats)
    ]
    return rows[0] if len(rows) == 1 else ad.concat_rows(*rows)


def aggregate(tape: ad.Tape, pn: dict, prep: Prepared, t: ad.Node, config: ModelConfig):
    """Bipartite message passing; returns (h_node, h_tree) embedding nodes."""
    x = tape.constant(prep.graph.adj)
    h0 = ad.concat_rows(ad.matmul(x, pn["node_proj.w"]), ad.matmul(t, pn["tree_proj.w"]))
    h = h0
    b_norm = tape.constant(prep.bip_norm)
    for i in range(config.layers_aggregator):
        h = gcn_layer(b_norm, h, pn[f"agg{i}.w"])
    n = config.n
    h_node = ad.gather_rows(h, np.arange(n))
    h_tree = ad.gather_rows(h, np.arange(n, n + len(prep.trees)))
    return h_node, h_tree


def pair_features(h: ad.Node, iu: np.ndarray, ju: np.ndarray) -> ad.Node:
    """Per-pair features [h_i | h_j | |h_i - h_j|] for pairs i < j in
    lexicographic order."""
    hi = ad.gather_rows(h, iu)
    hj = ad.gather_rows(h, ju)
    return ad.concat_cols(hi, hj, ad.absval(ad.sub(hi, hj)))


def _mlp_head(pn: dict, head: str, phi: ad.Node) -> ad.Node:
    hidden = ad.relu(ad.broadcast_add_rowvec(ad.matmul(phi, pn[f"{head}.w1"]), pn[f"{head}.b1"]))
    return ad.broadcast_add_rowvec(ad.matmul(hidden, pn[f"{head}.w2"]), pn[f"{head}.b2"])


def decode_nodes(tape: ad.Tape, pn: dict, h_node: ad.Node, n: int, iu, ju):
    """Both decoder heads as tape nodes (logits matrix, weights matrix)."""
    phi = pair_features(h_node, iu, ju)
    logits_col = _mlp_head(pn, "struct", phi)
    weight_col = ad.sigmoid(_mlp_head(pn, "weight", phi))
    logits = ad.scatter_pairs_symmetric(logits_col, n, iu, ju, NEG_LARGE)
    weights = ad.scatter_pairs_symmetric(weight_col, n, iu, ju, 0.0)
    return logits, weights


def forward(tape: ad.Tape, pn: dict, prep: Prepared, config: ModelConfig):
    t = encode_all(tape, pn, prep, config)
    h_node, _ = aggregate(tape, pn, prep, t, config)
    return decode_nodes(tape, pn, h_node, config.n, prep.iu, prep.ju)


def node_embeddings(g: WeightedGraph, trees, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Aggregated per-node embeddings for a given subtree list (mainly for
    inspection and invariance tests)."""
    prep = prepare(g, config)
    prep = dataclasses.replace(
        prep,
        trees=tuple(trees),
        tree_norms=tuple(normalize_adjacency(tree_adjacency(t)) for t in trees),
        tree_feats=tuple(g.adj[np.array(t.nodes), :] for t in trees),
        bip_norm=normalize_adjacency(build_bipartite(g.n, list(trees)).adj),
    )
    tape = ad.Tape()
    pn = bind(tape, params, trainable=False)
    t = encode_all(tape, pn, prep, config)
    h_node, _ = aggregate(tape, pn, prep, t, config)
    return h_node.value.copy()


def decode(h_node: np.ndarray, params: ModelParams, variant: str = "full") -> DecodedGraph:
    """Run only the decoder on given node embeddings."""
    n = h_node.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    tape = ad.Tape()
    pn = bind(tape, params, trainable=False)
    logits, weights = decode_nodes(tape, pn, tape.constant(h_node), n, iu, ju)
    return DecodedGraph(
        logits=logits.value,
        weights=weights.value,
        fused=fuse(logits.value, weights.value, variant),
    )


def predict(g: WeightedGraph, params: ModelParams, config: ModelConfig) -> DecodedGraph:
    """Full pipeline: extract -> encode -> aggregate -> decode -> fuse."""
    prep = prepare(g, config)
    tape = ad.Tape()
    pn = bind(tape, params, trainable=False)
    logits, weights = forward(tape, pn, prep, config)
    return DecodedGraph(
        logits=logits.value,
        weights=weights.value,
        fused=fuse(logits.value, weights.value, config.variant),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, config: ModelConfig, seed: int, path) -> None:
    payload = {
        "config": dataclasses.asdict(config),
        "seed": int(seed),
        "tensors": {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()} for name, v in params.tensors.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    config = ModelConfig(**payload["config"])
    tensors = {
        name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in payload["tensors"].items()
    }
    expected = _shapes(config)
    if set(tensors) != set(expected) or any(tensors[k].shape != expected[k] for k in expected):
        raise ValueError("checkpoint tensors do not match the stored config")
    ordered = ModelParams({name: tensors[name] for name in expected})
    return ordered, config, int(payload["seed"])
