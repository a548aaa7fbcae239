"""Command-line interface: training runs, sweeps, bound reports, and data tools.

Every command writes its resolved manifest into the output directory, so
a run can be reproduced from the directory alone. Exit codes: 0 success,
1 runtime failure (an error record is written when possible), 2 usage.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, grad_check
from .bounds import BoundContext, bound_report, complexity_prefactor, complexity_regularizer
from .graphs import (Graph, ParseError, SplitSpec, ValidationError, build_propagation,
                     generate_sbm, load_graph)
from .metrics import oversmoothing_profile, robustness_sweep
from .model import ModelConfig, bind_layers, forward, init_params, save_checkpoint
from .training import (GRID_COLUMNS, RunRecord, TrainConfig, TrainingAborted, grid_search,
                       train, write_grid_csv)

OUTPUT_ROOT_ENV = "FLEXIDROP_OUTPUT_ROOT"

DEFAULT_DATASET = {"kind": "sbm", "num_nodes": 200, "num_blocks": 2, "p_in": 0.1,
                   "p_out": 0.01, "feature_dim": 16, "noise_scale": 0.1, "seed": 42}


def _output_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {path}")
    return json.loads(p.read_text())


def load_dataset(spec: dict) -> Graph:
    kind = spec.get("kind", "sbm")
    if kind == "sbm":
        return generate_sbm(
            num_nodes=int(spec.get("num_nodes", 200)),
            num_blocks=int(spec.get("num_blocks", 2)),
            p_in=float(spec.get("p_in", 0.1)),
            p_out=float(spec.get("p_out", 0.01)),
            feature_dim=int(spec.get("feature_dim", 16)),
            noise_scale=float(spec.get("noise_scale", 0.1)),
            seed=int(spec.get("seed", 42)),
            split_fractions=tuple(spec.get("split_fractions", (0.6, 0.2, 0.2))))
    if kind == "files":
        missing = [k for k in ("edges", "features", "labels") if k not in spec]
        if missing:
            raise ValidationError(
                f"dataset kind 'files' needs keys {missing} (paths to the edge list and CSVs)")
        split_spec = spec.get("split", {})
        if "index_files" in split_spec:
            split = SplitSpec.from_index_files(*split_spec["index_files"])
        else:
            fr = split_spec.get("fractions", (0.6, 0.2, 0.2))
            split = SplitSpec.from_fractions(*fr, seed=int(split_spec.get("seed", 0)))
        return load_graph(spec["edges"], spec["features"], spec["labels"], split)
    raise ValidationError(f"unknown dataset kind {kind!r}")


def _resolve_model(config: dict, graph: Graph, args) -> ModelConfig:
    model = dict(config.get("model", {}))
    for key, val in (("strategy", args.strategy), ("rate", args.rate),
                     ("propagation_mode", getattr(args, "propagation", None)),
                     ("task", getattr(args, "task", None))):
        if val is not None:
            model[key] = val
    if "layer_dims" not in model:
        hidden = model.pop("hidden_dims", [256])
        if model.get("task", "node_classification") == "link_prediction":
            out_dim = int(model.pop("output_dim", 32))
        else:
            out_dim = graph.num_classes
            model.pop("output_dim", None)
        model["layer_dims"] = [graph.feature_dim] + list(hidden) + [out_dim]
    model.pop("hidden_dims", None)
    model.pop("output_dim", None)
    return ModelConfig.from_dict(model)


def _resolve_train(config: dict, args) -> TrainConfig:
    tc = dict(config.get("train", {}))
    for key, val in (("epochs", args.epochs), ("seed", args.seed),
                     ("reg_lambda", getattr(args, "reg_lambda", None)),
                     ("eval_every", getattr(args, "eval_every", None)),
                     ("learning_rate", getattr(args, "learning_rate", None))):
        if val is not None:
            tc[key] = val
    return TrainConfig.from_dict(tc)


def _manifest(command: str, config: dict) -> dict:
    clean = {k: v for k, v in config.items() if not callable(v)}
    return {"command": command, "version": __version__, "config": clean}


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x != ""]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x != ""]


def _strategies(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


# ---- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    config = _load_config(args.config)
    dataset = config.get("dataset", DEFAULT_DATASET)
    graph = load_dataset(dataset)
    model_config = _resolve_model(config, graph, args)
    train_config = _resolve_train(config, args)
    out = _output_dir(args, "train")
    resolved = {"dataset": dataset, "model": model_config.to_dict(),
                "train": train_config.to_dict()}
    _write_json(out / "manifest.json", _manifest("train", resolved))
    try:
        result = train(graph, model_config, train_config)
    except TrainingAborted as exc:
        save_checkpoint(out / "last_finite", exc.params, model_config,
                        extra={"aborted_epoch": exc.epoch})
        exc.record.write_csv(out / "run.csv")
        _write_json(out / "error.json", {"type": "TrainingAborted", "epoch": exc.epoch,
                                         "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    result.record.write_csv(out / "run.csv")
    result.record.write_summary(out / "summary.json")
    save_checkpoint(out / "model", result.params, model_config)
    ctx = BoundContext.from_graph(graph, model_config.num_layers, train_config.reg_lambda)
    report = bound_report(ctx, result.params, model_config.propagation_mode)
    _write_json(out / "bound_report.json", report)
    print(f"final test accuracy {result.record.summary['final_test_accuracy']}")
    print(f"outputs in {out}")
    return 0


def cmd_grid(args) -> int:
    config = _load_config(args.config)
    dataset = config.get("dataset", DEFAULT_DATASET)
    graph = load_dataset(dataset)
    model_config = _resolve_model(config, graph, args)
    train_config = _resolve_train(config, args)
    strategies = _strategies(args.strategies)
    rates = _floats(args.rates)
    seeds = _ints(args.seeds)
    out = _output_dir(args, "grid")
    resolved = {"dataset": dataset, "model": model_config.to_dict(),
                "train": train_config.to_dict(), "strategies": strategies,
                "rates": rates, "seeds": seeds}
    _write_json(out / "manifest.json", _manifest("grid", resolved))
    rows = grid_search(graph, model_config, strategies, rates, seeds, train_config)
    write_grid_csv(rows, out / "grid.csv")
    print(f"grid written to {out / 'grid.csv'}")
    return 0


def cmd_oversmooth(args) -> int:
    config = _load_config(args.config)
    dataset = config.get("dataset", DEFAULT_DATASET)
    graph = load_dataset(dataset)
    train_config = _resolve_train(config, args)
    depths = _ints(args.depths)
    strategies = _strategies(args.strategies)
    rates = {}
    if args.rate is not None:
        rates = {s: args.rate for s in strategies if s in ("fixed_dropout", "dropnode", "dropedge")}
    out = _output_dir(args, "oversmooth")
    resolved = {"dataset": dataset, "train": train_config.to_dict(), "depths": depths,
                "strategies": strategies, "hidden_dim": args.hidden_dim, "rates": rates}
    _write_json(out / "manifest.json", _manifest("oversmooth", resolved))
    rows = oversmoothing_profile(graph, depths, strategies, train_config,
                                 hidden_dim=args.hidden_dim, rates=rates)
    record = RunRecord(columns=["depth", "strategy", "test_accuracy", "final_energy"],
                       rows=rows)
    record.write_csv(out / "oversmoothing.csv")
    print(f"profile written to {out / 'oversmoothing.csv'}")
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args.config)
    dataset = config.get("dataset", DEFAULT_DATASET)
    graph = load_dataset(dataset)
    model_config = _resolve_model(config, graph, args)
    train_config = _resolve_train(config, args)
    fractions = _floats(args.fractions)
    strategies = _strategies(args.strategies)
    seeds = _ints(args.seeds)
    rates = {}
    if args.rate is not None:
        rates = {s: args.rate for s in strategies if s in ("fixed_dropout", "dropnode", "dropedge")}
    out = _output_dir(args, "attack")
    resolved = {"dataset": dataset, "model": model_config.to_dict(),
                "train": train_config.to_dict(), "fractions": fractions,
                "strategies": strategies, "seeds": seeds, "rates": rates}
    _write_json(out / "manifest.json", _manifest("attack", resolved))
    rows = robustness_sweep(graph, fractions, strategies, seeds, train_config,
                            model_dims=model_config.layer_dims, rates=rates,
                            propagation_mode=model_config.propagation_mode)
    record = RunRecord(columns=["fraction", "strategy", "seed", "test_accuracy"], rows=rows)
    record.write_csv(out / "robustness.csv")
    print(f"sweep written to {out / 'robustness.csv'}")
    return 0


def cmd_bound(args) -> int:
    ctx = BoundContext(num_layers=args.layers, num_classes=args.classes,
                       feature_dim=args.feature_dim, num_nodes=args.nodes,
                       feature_inf_max=args.feature_inf_max)
    value = complexity_prefactor(ctx)
    print(f"complexity_prefactor {value!r}")
    if args.checkpoint:
        from .model import load_checkpoint
        params, model_config, _ = load_checkpoint(args.checkpoint)
        report = bound_report(ctx, params, model_config.propagation_mode)
        print(f"complexity_bound {report['complexity_bound']!r}")
        if args.out:
            out = _output_dir(args, "bound")
            _write_json(out / "manifest.json", _manifest("bound", vars(args)))
            _write_json(out / "bound_report.json", report)
    return 0


def _gradcheck_instance(seed: int) -> bool:
    """One composite gradient check touching every op plus the model path."""
    rng = np.random.default_rng(seed)
    a0 = rng.uniform(-1, 1, (3, 4))
    b0 = rng.uniform(-1, 1, (4, 2))
    v0 = rng.uniform(0.5, 1.5, (4, 1))

    def build(tape, leaves):
        a, b, v = leaves
        m = tape.matmul(a, b)
        s = tape.add(m, tape.relu(m))
        s = tape.sub(s, tape.scalar_mul(0.5, m))
        e = tape.elementwise_mul(s, tape.sigmoid(s))
        r = tape.row_broadcast_mul(tape.exp(tape.scalar_mul(0.1, a)), tape.log(v))
        norms = tape.column_l2_norms(e)
        mix = tape.add(tape.max_reduce(norms), tape.product_reduce(tape.column_l2_norms(r)))
        return tape.add(tape.add(tape.mean(e), tape.sum(r)), mix)

    ok = grad_check(build, [a0, b0, v0]).passed

    graph = generate_sbm(12, 2, 0.6, 0.2, 3, 0.1, seed)
    prop = build_propagation(graph, "row_stochastic")
    config = ModelConfig(layer_dims=(3, 4, 2), strategy="flexidrop")
    params = init_params(config.layer_dims, seed)
    ctx = BoundContext.from_graph(graph, 2, 0.5)
    shapes = [p.weight for p in params] + [p.retention_logits for p in params]

    def model_loss(tape, leaves):
        from .model import BoundLayer
        k = len(params)
        layers = [BoundLayer(leaves[i], leaves[k + i], tape.sigmoid(leaves[k + i]))
                  for i in range(k)]
        out = forward(tape, graph, prop, layers, config, mode="train", seed=0)
        loss = tape.softmax_cross_entropy(out.logits, graph.labels, graph.train_mask)
        reg = complexity_regularizer(tape, ctx, layers)
        return tape.add(loss, tape.scalar_mul(0.5, reg))

    ok = grad_check(model_loss, shapes).passed and ok
    return ok


def cmd_gradcheck(args) -> int:
    all_ok = True
    for i in range(args.instances):
        ok = _gradcheck_instance(args.seed + i)
        print(f"instance {i}: {'pass' if ok else 'FAIL'}")
        all_ok = all_ok and ok
    if not all_ok:
        print("gradient check failed", file=sys.stderr)
        return 1
    print(f"all {args.instances} instances passed")
    return 0


def cmd_sbm(args) -> int:
    graph = generate_sbm(args.num_nodes, args.num_blocks, args.p_in, args.p_out,
                         args.feature_dim, args.noise_scale, args.seed)
    out = _output_dir(args, "sbm")
    _write_json(out / "manifest.json", _manifest("sbm", vars(args)))
    with open(out / "edges.txt", "w") as fh:
        fh.write("# u v\n")
        for u, v in graph.edges:
            fh.write(f"{u} {v}\n")
    np.savetxt(out / "features.csv", graph.features, delimiter=",", fmt="%.17g")
    np.savetxt(out / "labels.csv", graph.labels.reshape(-1, 1), delimiter=",", fmt="%d")
    for name, mask in (("train", graph.train_mask), ("val", graph.val_mask),
                       ("test", graph.test_mask)):
        np.savetxt(out / f"{name}_idx.txt", np.flatnonzero(mask).reshape(-1, 1), fmt="%d")
    print(f"dataset written to {out}")
    return 0


# ---- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexidrop",
                                     description="GNN training with trainable dropout retention")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_model=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--eval-every", dest="eval_every", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--lambda", dest="reg_lambda", type=float,
                       help="regularization weight for the trainable-retention strategy")
        if with_model:
            p.add_argument("--strategy", choices=["none", "flexidrop", "fixed_dropout",
                                                  "dropnode", "dropedge"])
            p.add_argument("--rate", type=float)
            p.add_argument("--propagation", choices=["symmetric", "row_stochastic"])
            p.add_argument("--task", choices=["node_classification", "link_prediction"])

    p = sub.add_parser("train", help="train one model and write its run record")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="sweep strategies x rates x seeds")
    common(p)
    p.add_argument("--strategies", default="none,flexidrop,fixed_dropout")
    p.add_argument("--rates", default="0.1,0.3,0.5")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("oversmooth", help="depth sweep with final-layer energy")
    common(p, with_model=False)
    p.add_argument("--depths", default="2,4,8,16,32")
    p.add_argument("--strategies", default="none,flexidrop")
    p.add_argument("--rate", type=float, help="rate for any fixed strategies in the sweep")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=32)
    p.set_defaults(func=cmd_oversmooth)

    p = sub.add_parser("attack", help="random edge injection robustness sweep")
    common(p)
    p.add_argument("--fractions", default="0,0.5")
    p.add_argument("--strategies", default="none,flexidrop")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bound", help="print the complexity prefactor and optional report")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--feature-inf-max", dest="feature_inf_max", type=float, required=True)
    p.add_argument("--checkpoint", help="checkpoint stem for a full bound report")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole op set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sbm", help="generate a block-model dataset as loadable files")
    p.add_argument("--num-nodes", dest="num_nodes", type=int, default=200)
    p.add_argument("--num-blocks", dest="num_blocks", type=int, default=2)
    p.add_argument("--p-in", dest="p_in", type=float, default=0.1)
    p.add_argument("--p-out", dest="p_out", type=float, default=0.01)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=16)
    p.add_argument("--noise-scale", dest="noise_scale", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sbm)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ParseError, ValidationError, ValueError,
            ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(args, "out", None):
            try:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                _write_json(out / "error.json", {"type": type(exc).__name__, "error": str(exc)})
            except OSError:
                pass
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
