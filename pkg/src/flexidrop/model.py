"""Graph convolutional model with trainable dropout retention.

Layer l computes P @ (m ∘ sigma(H_{l-1})) @ W_l where m is the dropout
mask for the chosen strategy and sigma is skipped for the raw input
layer. The trainable-retention strategy replaces the random mask by its
expectation: every column is scaled by its retention probability
p = logistic(z), identically in train and eval mode, so the forward pass
is deterministic and the logits z receive gradients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, Value
from .graphs import Graph, PropagationOperator, build_propagation, sample_absent_pairs

STRATEGIES = ("none", "flexidrop", "fixed_dropout", "dropnode", "dropedge")
TASKS = ("node_classification", "link_prediction")


class NumericsError(ArithmeticError):
    """A forward pass produced NaN; the message names the layer."""


def logistic(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LayerParams:
    """One layer: a dense weight and per-input-column retention logits."""

    weight: np.ndarray            # (k_in, k_out)
    retention_logits: np.ndarray  # (k_in,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.retention_logits = np.asarray(self.retention_logits, dtype=np.float64).ravel()
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.retention_logits.shape[0] != self.weight.shape[0]:
            raise ValueError(
                f"retention logits length {self.retention_logits.shape[0]} "
                f"must match weight input width {self.weight.shape[0]}")

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.retention_logits.copy())


@dataclass(frozen=True)
class ModelConfig:
    layer_dims: tuple[int, ...]          # [d, hidden..., output]
    strategy: str = "none"
    rate: float = 0.0                    # dropout rate for the fixed strategies
    propagation_mode: str = "row_stochastic"
    task: str = "node_classification"
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(k) for k in self.layer_dims)
        if len(dims) < 2 or any(k < 1 for k in dims):
            raise ValueError(f"layer_dims needs >= 2 positive entries, got {dims}")
        object.__setattr__(self, "layer_dims", dims)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy in ("none", "flexidrop"):
            if self.rate != 0.0:
                raise ValueError(f"strategy {self.strategy!r} takes no rate")
        elif not 0.0 <= self.rate < 1.0:
            raise ValueError(f"rate must lie in [0, 1), got {self.rate}")
        if self.propagation_mode not in ("symmetric", "row_stochastic"):
            raise ValueError(f"unknown propagation mode {self.propagation_mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def to_dict(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "strategy": self.strategy,
                "rate": self.rate, "propagation_mode": self.propagation_mode,
                "task": self.task, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(layer_dims=tuple(d["layer_dims"]), strategy=d.get("strategy", "none"),
                   rate=float(d.get("rate", 0.0)),
                   propagation_mode=d.get("propagation_mode", "row_stochastic"),
                   task=d.get("task", "node_classification"),
                   activation=d.get("activation", "relu"))


RETENTION_LOGIT_INIT = 2.0   # logistic(2) ~ 0.88, a gentle initial dropout


def init_params(layer_dims, seed: int) -> list[LayerParams]:
    """Glorot-uniform weights and constant retention logits, reproducible by seed."""
    rng = np.random.default_rng(seed)
    params = []
    dims = list(layer_dims)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        z = np.full(fan_in, RETENTION_LOGIT_INIT)
        params.append(LayerParams(w, z))
    return params


def retention_probabilities(params: list[LayerParams]) -> list[np.ndarray]:
    """Per-layer retention probabilities logistic(z), each strictly inside (0, 1)."""
    return [logistic(p.retention_logits) for p in params]


@dataclass
class BoundLayer:
    """Layer parameters bound to a tape: weight and logit leaves plus p = logistic(z)."""

    weight: Value
    retention_logits: Value
    retention: Value | None = None


def bind_layers(tape: Tape, params: list[LayerParams], *, train_weights: bool,
                train_retention: bool, with_retention: bool) -> list[BoundLayer]:
    layers = []
    for p in params:
        w = tape.leaf(p.weight, requires_grad=train_weights)
        z = tape.leaf(p.retention_logits.reshape(-1, 1), requires_grad=train_retention)
        r = tape.sigmoid(z) if with_retention else None
        layers.append(BoundLayer(w, z, r))
    return layers


@dataclass
class ForwardResult:
    preactivations: list[Value]   # one per layer, final entry is the logits
    logits: Value
    layers: list[BoundLayer]
    operator: sp.csr_matrix       # the propagation matrix actually applied

    def embeddings(self) -> list[np.ndarray]:
        return [v.data for v in self.preactivations]


def _check_params(params: list[LayerParams], config: ModelConfig) -> None:
    dims = config.layer_dims
    if len(params) != config.num_layers:
        raise ValueError(f"{len(params)} layers of parameters for {config.num_layers} layers")
    for i, p in enumerate(params):
        if p.weight.shape != (dims[i], dims[i + 1]):
            raise ValueError(
                f"layer {i} weight shape {p.weight.shape} != {(dims[i], dims[i + 1])}")


def forward(tape: Tape, graph: Graph, prop: PropagationOperator,
            params: list[LayerParams] | list[BoundLayer], config: ModelConfig,
            mode: str = "eval", seed: int = 0) -> ForwardResult:
    """Run the model, returning per-layer pre-activation embeddings and logits.

    mode "train" applies the configured dropout strategy, "eval" disables
    the randomized strategies. Retention scaling is deterministic and
    applies in both modes; mode "sample" instead draws one Bernoulli(p)
    retention vector per layer without rescaling, a diagnostic for
    checking the deterministic pass against the sampled average.
    """
    if mode not in ("train", "eval", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and config.strategy != "flexidrop":
        raise ValueError("mode 'sample' only applies to the flexidrop strategy")
    if graph.feature_dim != config.layer_dims[0]:
        raise ValueError(
            f"graph feature dim {graph.feature_dim} != layer_dims[0] {config.layer_dims[0]}")
    if isinstance(params[0], BoundLayer):
        layers = params
    else:
        _check_params(params, config)
        layers = bind_layers(tape, params, train_weights=(mode == "train"),
                             train_retention=(mode == "train" and config.strategy == "flexidrop"),
                             with_retention=(config.strategy == "flexidrop" and mode != "sample"))

    rng = np.random.default_rng(seed)
    p_matrix = prop.matrix
    if config.strategy == "dropedge" and mode == "train":
        # resample the operator once per forward pass: drop graph edges,
        # keep self-loops, renormalize in the configured mode
        keep = rng.random(graph.num_edges) >= config.rate
        thinned = graph.with_edges(graph.edges[keep])
        p_matrix = build_propagation(thinned, config.propagation_mode).matrix

    h = tape.leaf(graph.features)
    preacts: list[Value] = []
    for li, layer in enumerate(layers):
        a = h if li == 0 else tape.relu(h)
        k_in = a.shape[1]
        if config.strategy == "flexidrop":
            if mode == "sample":
                probs = logistic(layer.retention_logits.data.ravel())
                draw = (rng.random(k_in) < probs).astype(np.float64)
                a = tape.row_broadcast_mul(a, tape.leaf(draw.reshape(-1, 1)))
            else:
                a = tape.row_broadcast_mul(a, layer.retention)
        elif mode == "train" and config.strategy == "fixed_dropout" and config.rate > 0.0:
            mask = (rng.random(a.shape) >= config.rate) / (1.0 - config.rate)
            a = tape.elementwise_mul(a, tape.leaf(mask))
        elif mode == "train" and config.strategy == "dropnode" and config.rate > 0.0:
            rows = (rng.random(a.shape[0]) >= config.rate) / (1.0 - config.rate)
            a = tape.elementwise_mul(a, tape.leaf(np.repeat(rows.reshape(-1, 1), k_in, axis=1)))
        h = tape.matmul(tape.spmm(p_matrix, a), layer.weight)
        if np.isnan(h.data).any():
            raise NumericsError(f"forward produced NaN at layer {li + 1}")
        preacts.append(h)
    return ForwardResult(preacts, preacts[-1], layers, p_matrix)


def link_scores(tape: Tape, embeddings: Value, pos_edges: np.ndarray,
                neg_edges: np.ndarray) -> tuple[Value, np.ndarray]:
    """Edge probabilities logistic(<h_u, h_v>) for positive then negative pairs.

    Returns the stacked probability column and the matching 0/1 label
    array (positives first).
    """
    pos = np.asarray(pos_edges, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg_edges, dtype=np.int64).reshape(-1, 2)
    pairs = np.concatenate([pos, neg], axis=0)
    if pairs.size == 0:
        raise ValueError("link_scores needs at least one pair")
    m = pairs.shape[0]
    n = embeddings.shape[0]
    sel_u = sp.csr_matrix((np.ones(m), (np.arange(m), pairs[:, 0])), shape=(m, n))
    sel_v = sp.csr_matrix((np.ones(m), (np.arange(m), pairs[:, 1])), shape=(m, n))
    hu = tape.spmm(sel_u, embeddings)
    hv = tape.spmm(sel_v, embeddings)
    inner = tape.matmul(tape.elementwise_mul(hu, hv), tape.leaf(np.ones((embeddings.shape[1], 1))))
    probs = tape.sigmoid(inner)
    labels = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    return probs, labels


def link_loss(tape: Tape, probs: Value, labels: np.ndarray) -> Value:
    """Mean binary cross-entropy; the log clamp keeps extreme scores finite."""
    y = tape.leaf(labels.reshape(-1, 1))
    ones = tape.leaf(np.ones_like(labels, dtype=np.float64).reshape(-1, 1))
    hit = tape.elementwise_mul(y, tape.log(probs))
    miss = tape.elementwise_mul(tape.sub(ones, y), tape.log(tape.sub(ones, probs)))
    return tape.scalar_mul(-1.0, tape.mean(tape.add(hit, miss)))


def sample_negative_edges(graph: Graph, count: int, seed: int) -> np.ndarray:
    """Uniform non-edges for link prediction, one negative per requested slot."""
    return sample_absent_pairs(graph, count, np.random.default_rng(seed))


CHECKPOINT_FORMAT = 1


def save_checkpoint(path: str | Path, params: list[LayerParams],
                    config: ModelConfig, extra: dict | None = None) -> None:
    """Write ``<path>.npz`` with all arrays and ``<path>.json`` with the manifest."""
    path = Path(path)
    arrays = {}
    layers = []
    for i, p in enumerate(params):
        arrays[f"weight_{i}"] = p.weight
        arrays[f"retention_logits_{i}"] = p.retention_logits
        layers.append({"weight_shape": list(p.weight.shape),
                       "retention_len": int(p.retention_logits.shape[0])})
    np.savez(path.with_suffix(".npz"), **arrays)
    manifest = {"format_version": CHECKPOINT_FORMAT, "config": config.to_dict(),
                "layers": layers}
    if extra:
        manifest["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[list[LayerParams], ModelConfig, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    params = []
    with np.load(path.with_suffix(".npz")) as data:
        for i, spec in enumerate(manifest["layers"]):
            w = data[f"weight_{i}"]
            z = data[f"retention_logits_{i}"]
            if list(w.shape) != spec["weight_shape"]:
                raise ValueError(f"layer {i} weight shape mismatch against manifest")
            expected = (config.layer_dims[i], config.layer_dims[i + 1])
            if w.shape != expected or z.shape != (expected[0],):
                raise ValueError(f"layer {i} array shape disagrees with config layer_dims")
            params.append(LayerParams(w, z))
    return params, config, manifest
