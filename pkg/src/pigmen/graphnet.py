"""Encoder-processor-decoder graph network built on the autodiff tape.

Default architecture: node/edge encoders and decoder are MLPs with two hidden
layers of width 64 and ReLU activations (linear output layer); three processor
blocks, each a pair of residual edge/node MLPs with sum aggregation over
incoming edges. A standardization layer is applied to node and edge inputs
before encoding. The decoder emits 2k channels, split into the predicted field
u (first k) and the multiplier field lambda (last k).

A second model kind, ``coord_mlp``, is a plain per-node MLP over the raw node
features (used as the non-graph baseline; it has no locality or translation
invariance by construction).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import autodiff as ad
from .mesh import Graph

STD_FLOOR = 1e-8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    node_in_dim: int
    edge_in_dim: int
    out_channels: int            # k: the decoder emits k for u plus k for lambda
    hidden_width: int = 64
    mlp_layers: int = 2          # hidden layers per MLP
    n_processors: int = 3
    kind: str = "graph"          # "graph" | "coord_mlp"
    split_decoder: bool = False  # separate decoder heads for u and lambda

    def __post_init__(self):
        for name in ("node_in_dim", "edge_in_dim", "out_channels",
                     "hidden_width", "mlp_layers", "n_processors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kind not in ("graph", "coord_mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    seed: int
    mlps: dict               # key -> list of (W, b) arrays
    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray

    @property
    def n_parameters(self) -> int:
        return sum(W.size + b.size for layers in self.mlps.values()
                   for W, b in layers)


def _mlp_sizes(config: ModelConfig) -> dict:
    """Layer size lists [in, hidden..., out] for every MLP in the model."""
    w = config.hidden_width
    hidden = [w] * config.mlp_layers
    k2 = 2 * config.out_channels
    if config.kind == "coord_mlp":
        return {"mlp": [config.node_in_dim] + hidden + [k2]}
    sizes = {
        "node_encoder": [config.node_in_dim] + hidden + [w],
        "edge_encoder": [config.edge_in_dim] + hidden + [w],
    }
    for block in range(config.n_processors):
        sizes[f"edge_processor_{block}"] = [3 * w] + hidden + [w]
        sizes[f"node_processor_{block}"] = [2 * w] + hidden + [w]
    if config.split_decoder:
        sizes["decoder_u"] = [w] + hidden + [config.out_channels]
        sizes["decoder_lambda"] = [w] + hidden + [config.out_channels]
    else:
        sizes["decoder"] = [w] + hidden + [k2]
    return sizes


def init_model(config: ModelConfig, seed: int, zero_init: bool = False) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed.

    zero_init is a test hook: all weights and biases zero, so the forward
    pass is identically zero for any input.
    """
    rng = np.random.default_rng(seed)
    mlps = {}
    for key, sizes in _mlp_sizes(config).items():
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            if zero_init:
                W = np.zeros((n_in, n_out))
            else:
                bound = 1.0 / np.sqrt(n_in)
                W = rng.uniform(-bound, bound, size=(n_in, n_out))
            layers.append((W, np.zeros(n_out)))
        mlps[key] = layers
    return ModelParams(
        config=config, seed=int(seed), mlps=mlps,
        node_mean=np.zeros(config.node_in_dim),
        node_std=np.ones(config.node_in_dim),
        edge_mean=np.zeros(config.edge_in_dim),
        edge_std=np.ones(config.edge_in_dim),
    )


def fit_standardizer(params: ModelParams, graph: Graph) -> ModelParams:
    """Record per-feature mean/std of the node and edge inputs (std floored)."""
    if graph.n_nodes < 2:
        raise ValueError("standardizer needs a graph with at least 2 nodes")
    node_mean = graph.node_features.mean(axis=0)
    node_std = np.maximum(graph.node_features.std(axis=0), STD_FLOOR)
    edge_mean = graph.edge_features.mean(axis=0)
    edge_std = np.maximum(graph.edge_features.std(axis=0), STD_FLOOR)
    return replace(params, node_mean=node_mean, node_std=node_std,
                   edge_mean=edge_mean, edge_std=edge_std)


# ---------------------------------------------------------------------------
# flatten / unflatten for the optimizers


def flatten_params(params: ModelParams) -> np.ndarray:
    parts = []
    for key in sorted(params.mlps):
        for W, b in params.mlps[key]:
            parts.append(W.ravel())
            parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_params(params: ModelParams, vec: np.ndarray) -> ModelParams:
    mlps = {}
    offset = 0
    for key in sorted(params.mlps):
        layers = []
        for W, b in params.mlps[key]:
            w_new = vec[offset:offset + W.size].reshape(W.shape).copy()
            offset += W.size
            b_new = vec[offset:offset + b.size].copy()
            offset += b.size
            layers.append((w_new, b_new))
        mlps[key] = layers
    if offset != vec.size:
        raise ValueError(f"parameter vector has {vec.size} entries, expected {offset}")
    return replace(params, mlps=mlps)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardResult:
    u: ad.Value
    lam: ad.Value
    param_values: list  # leaf Values in flatten_params order


def _register_params(tape: ad.Tape, params: ModelParams):
    mlp_values = {}
    flat_order = []
    for key in sorted(params.mlps):
        layers = []
        for W, b in params.mlps[key]:
            wv = tape.input(W)
            bv = tape.input(b)
            layers.append((wv, bv))
            flat_order.extend([wv, bv])
        mlp_values[key] = layers
    return mlp_values, flat_order


def _apply_mlp(tape: ad.Tape, layers, x: ad.Value) -> ad.Value:
    h = x
    for i, (W, b) in enumerate(layers):
        h = ad.linear_layer(tape, W, b, h)
        if i < len(layers) - 1:
            h = ad.relu(tape, h)
    return h


def graph_block(tape: ad.Tape, edge_proc, node_proc, graph: Graph,
                v: ad.Value, e: ad.Value):
    """One message-passing round with residual updates.

    e'_k = e_k + phi_e(e_k, v_recv, v_send); aggregation is the sum of
    incoming updated edges; v'_i = v_i + phi_v(agg_i, v_i).
    """
    v_recv = ad.gather_rows(tape, v, graph.receivers)
    v_send = ad.gather_rows(tape, v, graph.senders)
    e_in = ad.concat(tape, ad.concat(tape, e, v_recv), v_send)
    e_new = ad.add(tape, e, _apply_mlp(tape, edge_proc, e_in))
    agg = ad.scatter_sum(tape, e_new, graph.receivers, graph.n_nodes)
    v_in = ad.concat(tape, agg, v)
    v_new = ad.add(tape, v, _apply_mlp(tape, node_proc, v_in))
    return v_new, e_new


def forward(tape: ad.Tape, params: ModelParams, graph: Graph) -> ForwardResult:
    """Standardize, encode, process, decode; returns (u, lambda) node fields."""
    config = params.config
    if graph.node_features.shape[1] != config.node_in_dim:
        raise ad.ShapeMismatchError(
            f"graph has {graph.node_features.shape[1]} node channels, "
            f"model expects {config.node_in_dim}")
    mlp_values, flat_order = _register_params(tape, params)
    k = config.out_channels

    node_x = tape.constant((graph.node_features - params.node_mean) / params.node_std)

    if config.kind == "coord_mlp":
        out = _apply_mlp(tape, mlp_values["mlp"], node_x)
    else:
        if graph.edge_features.shape[1] != config.edge_in_dim:
            raise ad.ShapeMismatchError(
                f"graph has {graph.edge_features.shape[1]} edge channels, "
                f"model expects {config.edge_in_dim}")
        edge_x = tape.constant((graph.edge_features - params.edge_mean) / params.edge_std)
        v = _apply_mlp(tape, mlp_values["node_encoder"], node_x)
        e = _apply_mlp(tape, mlp_values["edge_encoder"], edge_x)
        for block in range(config.n_processors):
            v, e = graph_block(tape, mlp_values[f"edge_processor_{block}"],
                               mlp_values[f"node_processor_{block}"], graph, v, e)
        if config.split_decoder:
            u = _apply_mlp(tape, mlp_values["decoder_u"], v)
            lam = _apply_mlp(tape, mlp_values["decoder_lambda"], v)
            return ForwardResult(u=u, lam=lam, param_values=flat_order)
        out = _apply_mlp(tape, mlp_values["decoder"], v)

    u = ad.slice_cols(tape, out, 0, k)
    lam = ad.slice_cols(tape, out, k, 2 * k)
    return ForwardResult(u=u, lam=lam, param_values=flat_order)


def predict(params: ModelParams, graph: Graph):
    """Inference convenience: numpy (u, lambda) without keeping the tape."""
    result = forward(ad.Tape(), params, graph)
    return result.u.data.copy(), result.lam.data.copy()


def collect_gradient(result: ForwardResult) -> np.ndarray:
    """Flat gradient vector aligned with flatten_params order."""
    parts = []
    for value in result.param_values:
        grad = value.grad if value.grad is not None else np.zeros_like(value.data)
        parts.append(np.asarray(grad).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned npz container; round-trips bitwise."""
    arrays = {
        "checkpoint_version": np.int64(CHECKPOINT_VERSION),
        "config_json": np.str_(json.dumps(asdict(params.config), sort_keys=True)),
        "seed": np.int64(params.seed),
        "node_mean": params.node_mean, "node_std": params.node_std,
        "edge_mean": params.edge_mean, "edge_std": params.edge_std,
    }
    for key in sorted(params.mlps):
        for i, (W, b) in enumerate(params.mlps[key]):
            arrays[f"W__{key}__{i}"] = W
            arrays[f"b__{key}__{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["checkpoint_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig(**json.loads(str(data["config_json"])))
        mlps = {}
        for key, sizes in _mlp_sizes(config).items():
            layers = []
            for i in range(len(sizes) - 1):
                layers.append((data[f"W__{key}__{i}"], data[f"b__{key}__{i}"]))
            mlps[key] = layers
        return ModelParams(
            config=config, seed=int(data["seed"]), mlps=mlps,
            node_mean=data["node_mean"], node_std=data["node_std"],
            edge_mean=data["edge_mean"], edge_std=data["edge_std"])
