"""Full-batch training with Adam, run records, and the grid sweep."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .bounds import BoundContext, complexity_regularizer, multilayer_bound
from .graphs import Graph, build_propagation
from .metrics import accuracy, auc_score, link_accuracy
from .model import (LayerParams, ModelConfig, NumericsError, bind_layers, forward,
                    init_params, link_loss, link_scores, retention_probabilities,
                    sample_negative_edges)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 256
    learning_rate: float = 0.01
    reg_lambda: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "reg_lambda": self.reg_lambda, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "seed": self.seed, "eval_every": self.eval_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in ("epochs", "learning_rate", "reg_lambda", "beta1",
                                   "beta2", "eps", "seed", "eval_every") if k in d}
        return cls(**known)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), t=0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameter and state."""
    if param.shape != grad.shape:
        raise ValueError(f"adam_step: param shape {param.shape} != grad shape {grad.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, AdamState(m=m, v=v, t=t)


class TrainingAborted(RuntimeError):
    """Raised when a loss or layer output turns NaN; carries the last finite state."""

    def __init__(self, epoch: int, params: list[LayerParams], record: "RunRecord"):
        super().__init__(f"training aborted at epoch {epoch}: non-finite loss")
        self.epoch = epoch
        self.params = params
        self.record = record


@dataclass
class RunRecord:
    """Per-epoch rows plus a JSON-ready summary."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in self.columns})

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary, indent=2, sort_keys=True))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


@dataclass
class TrainResult:
    params: list[LayerParams]
    record: RunRecord


def _epoch_seed(base_seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(stream), int(epoch)])
               .generate_state(1)[0])


def _record_columns(num_layers: int) -> list[str]:
    cols = ["epoch", "train_loss", "objective", "regularizer",
            "train_accuracy", "val_accuracy", "test_accuracy"]
    for i in range(1, num_layers + 1):
        cols += [f"retention_min_l{i}", f"retention_mean_l{i}", f"retention_max_l{i}"]
    cols.append("wall_clock_s")
    return cols


def _split_edges(graph: Graph, seed: int,
                 fractions=(0.85, 0.05, 0.10)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle the edge list and cut it into train/val/test positives."""
    e = graph.num_edges
    order = np.random.default_rng(seed).permutation(e)
    n_train = int(fractions[0] * e)
    n_val = int(fractions[1] * e)
    edges = graph.edges
    return (edges[order[:n_train]], edges[order[n_train:n_train + n_val]],
            edges[order[n_train + n_val:]])


def train(graph: Graph, model_config: ModelConfig, train_config: TrainConfig) -> TrainResult:
    """Train on the full train mask; deterministic for a fixed seed.

    The trainable-retention strategy optimizes the weights and the
    retention logits against loss + reg_lambda * regularizer; every other
    strategy optimizes the weights alone against the plain loss. A NaN
    loss aborts with TrainingAborted carrying the last finite parameters.
    """
    cfg = train_config
    flexi = model_config.strategy == "flexidrop"
    link_task = model_config.task == "link_prediction"
    params = init_params(model_config.layer_dims, cfg.seed)
    ctx = BoundContext.from_graph(graph, model_config.num_layers, cfg.reg_lambda)

    if link_task:
        train_pos, val_pos, test_pos = _split_edges(graph, _epoch_seed(cfg.seed, 0, 3))
        if min(len(train_pos), len(val_pos), len(test_pos)) == 0:
            raise ValueError("link_prediction needs enough edges for a train/val/test split")
        # messages may only pass over training edges
        message_graph = graph.with_edges(train_pos)
        eval_negs = {name: sample_negative_edges(graph, len(pos), _epoch_seed(cfg.seed, 0, 4 + i))
                     for i, (name, pos) in enumerate(
                         (("train", train_pos), ("val", val_pos), ("test", test_pos)))}
        eval_pos = {"train": train_pos, "val": val_pos, "test": test_pos}
    else:
        message_graph = graph

    prop = build_propagation(message_graph, model_config.propagation_mode)

    states = [AdamState.zeros_like(p.weight) for p in params]
    z_states = [AdamState.zeros_like(p.retention_logits) for p in params] if flexi else None

    record = RunRecord(columns=_record_columns(model_config.num_layers))
    start = time.perf_counter()

    def evaluate(current: list[LayerParams]) -> dict:
        tape = Tape()
        out = forward(tape, message_graph, prop, current, model_config, mode="eval")
        if link_task:
            accs = {}
            for name in ("train", "val", "test"):
                probs, labels = link_scores(tape, out.logits, eval_pos[name], eval_negs[name])
                accs[name] = link_accuracy(probs.data, labels)
            return accs
        return {name: accuracy(out.logits.data, graph.labels, mask)
                for name, mask in (("train", graph.train_mask), ("val", graph.val_mask),
                                   ("test", graph.test_mask))}

    def log_row(epoch: int, loss_val: float, obj_val: float) -> None:
        accs = evaluate(params)
        row = {"epoch": epoch, "train_loss": loss_val, "objective": obj_val,
               "regularizer": multilayer_bound(ctx, params),
               "train_accuracy": accs["train"], "val_accuracy": accs["val"],
               "test_accuracy": accs["test"]}
        for i, p in enumerate(retention_probabilities(params), start=1):
            row[f"retention_min_l{i}"] = float(p.min())
            row[f"retention_mean_l{i}"] = float(p.mean())
            row[f"retention_max_l{i}"] = float(p.max())
        row["wall_clock_s"] = time.perf_counter() - start
        record.rows.append(row)

    best_val = -1.0
    best_epoch = 0
    best_test_at_val = None
    last_loss = None
    last_obj = None

    for epoch in range(1, cfg.epochs + 1):
        tape = Tape()
        layers = bind_layers(tape, params, train_weights=True, train_retention=flexi,
                             with_retention=flexi)
        try:
            out = forward(tape, message_graph, prop, layers, model_config, mode="train",
                          seed=_epoch_seed(cfg.seed, epoch, 1))
        except NumericsError:
            raise TrainingAborted(epoch, [p.copy() for p in params], record) from None

        if link_task:
            negs = sample_negative_edges(graph, len(train_pos), _epoch_seed(cfg.seed, epoch, 2))
            probs, labels = link_scores(tape, out.logits, train_pos, negs)
            loss = link_loss(tape, probs, labels)
        else:
            loss = tape.softmax_cross_entropy(out.logits, graph.labels, graph.train_mask)

        objective = loss
        if flexi and cfg.reg_lambda > 0.0:
            reg = complexity_regularizer(tape, ctx, layers)
            objective = tape.add(loss, tape.scalar_mul(cfg.reg_lambda, reg))

        loss_val = loss.item()
        obj_val = objective.item()
        if not np.isfinite(obj_val):
            raise TrainingAborted(epoch, [p.copy() for p in params], record)

        tape.backward(objective)
        for i, layer in enumerate(layers):
            g = layer.weight.grad
            if g is None:
                g = np.zeros_like(params[i].weight)
            params[i].weight, states[i] = adam_step(
                params[i].weight, g, states[i], cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            if flexi:
                gz = layer.retention_logits.grad
                gz = np.zeros_like(params[i].retention_logits) if gz is None else gz.ravel()
                params[i].retention_logits, z_states[i] = adam_step(
                    params[i].retention_logits, gz, z_states[i],
                    cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

        last_loss, last_obj = loss_val, obj_val
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            log_row(epoch, loss_val, obj_val)
            row = record.rows[-1]
            if row["val_accuracy"] >= best_val:
                best_val = row["val_accuracy"]
                best_epoch = epoch
                best_test_at_val = row["test_accuracy"]

    final = evaluate(params) if cfg.epochs > 0 else None
    record.summary = {
        "model_config": model_config.to_dict(),
        "train_config": cfg.to_dict(),
        "epochs_run": cfg.epochs,
        "final_train_loss": last_loss,
        "final_objective": last_obj,
        "final_regularizer": multilayer_bound(ctx, params),
        "final_train_accuracy": final["train"] if final else None,
        "final_val_accuracy": final["val"] if final else None,
        "final_test_accuracy": final["test"] if final else None,
        "best_val_epoch": best_epoch or None,
        "best_val_accuracy": best_val if best_epoch else None,
        "test_accuracy_at_best_val": best_test_at_val,
        "retention_mean": [float(p.mean()) for p in retention_probabilities(params)],
    }
    if link_task and cfg.epochs > 0:
        tape = Tape()
        out = forward(tape, message_graph, prop, params, model_config, mode="eval")
        probs, labels = link_scores(tape, out.logits, eval_pos["test"], eval_negs["test"])
        record.summary["final_test_auc"] = auc_score(probs.data, labels)
    return TrainResult(params=params, record=record)


def grid_search(graph: Graph, base_model: ModelConfig, strategies, rates, seeds,
                train_config: TrainConfig) -> list[dict]:
    """Sweep (strategy, rate) x seeds; one row per run plus aggregate rows.

    For the fixed strategies the swept value is the dropout rate; the
    trainable-retention strategy has no rate, so the same values sweep
    the regularization weight instead, and "none" collapses to a single
    parameter-free cell. Failed runs are recorded and skipped in the
    aggregates.
    """
    rows = []
    for strategy in strategies:
        if strategy == "none":
            sweep = [0.0]
        else:
            sweep = list(rates)
        for value in sweep:
            per_seed = []
            for seed in seeds:
                if strategy == "flexidrop":
                    mc = replace(base_model, strategy=strategy, rate=0.0)
                    tc = replace(train_config, seed=int(seed), reg_lambda=float(value))
                else:
                    mc = replace(base_model, strategy=strategy, rate=float(value))
                    tc = replace(train_config, seed=int(seed))
                try:
                    result = train(graph, mc, tc)
                except (TrainingAborted, ValueError, ArithmeticError) as exc:
                    rows.append({"strategy": strategy, "param": value, "seed": int(seed),
                                 "test_accuracy": None, "val_accuracy": None,
                                 "status": f"failed: {exc}"})
                    continue
                s = result.record.summary
                rows.append({"strategy": strategy, "param": value, "seed": int(seed),
                             "test_accuracy": s["final_test_accuracy"],
                             "val_accuracy": s["final_val_accuracy"], "status": "ok"})
                per_seed.append(s["final_test_accuracy"])
            agg = {"strategy": strategy, "param": value, "seed": "aggregate",
                   "status": f"{len(per_seed)}/{len(seeds)} ok"}
            if per_seed:
                arr = np.asarray(per_seed)
                agg["test_accuracy"] = float(arr.mean())
                agg["test_std"] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            else:
                agg["test_accuracy"] = None
                agg["test_std"] = None
            rows.append(agg)
    return rows


GRID_COLUMNS = ["strategy", "param", "seed", "test_accuracy", "val_accuracy",
                "test_std", "status"]


def write_grid_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in GRID_COLUMNS})
