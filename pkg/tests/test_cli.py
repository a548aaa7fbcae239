"""Command line entry points, exercised in-process through run()."""
import json

import numpy as np
import pytest

from flexidrop.bounds import BoundContext, complexity_prefactor
from flexidrop.cli import run
from flexidrop.graphs import SplitSpec, generate_sbm, load_graph


def read_csv_without_wall_clock(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("wall_clock_s")
    return ["\x1f".join(c for i, c in enumerate(line.split(",")) if i != drop)
            for line in lines]


def write_config(tmp_path, body):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(body))
    return str(p)


def small_config(tmp_path, **overrides):
    body = {"dataset": {"kind": "sbm", "num_nodes": 40, "num_blocks": 2, "p_in": 0.4,
                        "p_out": 0.1, "feature_dim": 4, "noise_scale": 0.2, "seed": 7},
            "model": {"hidden_dims": [8], "strategy": "flexidrop"},
            "train": {"epochs": 4, "learning_rate": 0.05, "reg_lambda": 0.1,
                      "eval_every": 2}}
    for section, vals in overrides.items():
        body.setdefault(section, {}).update(vals)
    return write_config(tmp_path, body)


# ---- exit codes ---------------------------------------------------------------------


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        run(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_unknown_command_exits_two():
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 2


def test_missing_config_file_exits_one(tmp_path, capsys):
    code = run(["train", "--config", str(tmp_path / "absent.json"),
                "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_invalid_model_setting_reports_error_json(tmp_path, capsys):
    cfg = small_config(tmp_path, model={"strategy": "flexidrop", "rate": 0.5})
    out = tmp_path / "o"
    code = run(["train", "--config", cfg, "--out", str(out)])
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert "rate" in err["error"]


def test_files_dataset_missing_keys_is_clean_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"kind": "files", "edge_file": "x"},
                               "train": {"epochs": 1}}))
    out = tmp_path / "o"
    code = run(["train", "--config", str(cfg), "--out", str(out)])
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert "edges" in err["error"] and "features" in err["error"]


# ---- bound --------------------------------------------------------------------------


def test_bound_prints_prefactor(capsys):
    code = run(["bound", "--layers", "2", "--classes", "7", "--feature-dim", "1433",
                "--nodes", "2708", "--feature-inf-max", "1.0"])
    assert code == 0
    line = capsys.readouterr().out.strip().splitlines()[0]
    name, value = line.split()
    assert name == "complexity_prefactor"
    ctx = BoundContext(num_layers=2, num_classes=7, feature_dim=1433, num_nodes=2708,
                       feature_inf_max=1.0)
    assert float(value) == complexity_prefactor(ctx)   # repr round-trips exactly


def test_bound_with_checkpoint_writes_report(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "train"
    assert run(["train", "--config", cfg, "--out", str(out)]) == 0
    bout = tmp_path / "bound"
    code = run(["bound", "--layers", "2", "--classes", "2", "--feature-dim", "4",
                "--nodes", "40", "--feature-inf-max", "1.5",
                "--checkpoint", str(out / "model"), "--out", str(bout)])
    assert code == 0
    report = json.loads((bout / "bound_report.json").read_text())
    assert report["complexity_bound"] > 0.0
    assert "complexity_bound" in capsys.readouterr().out


# ---- train --------------------------------------------------------------------------


def test_train_writes_all_artifacts(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    assert run(["train", "--config", cfg, "--out", str(out)]) == 0
    for name in ("manifest.json", "run.csv", "summary.json", "model.npz",
                 "model.json", "bound_report.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["model"]["strategy"] == "flexidrop"
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["final_test_accuracy"] <= 1.0
    assert "final test accuracy" in capsys.readouterr().out


def test_train_flag_overrides_config(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    assert run(["train", "--config", cfg, "--out", str(out), "--strategy", "none",
                "--epochs", "2", "--seed", "9"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["strategy"] == "none"
    assert manifest["config"]["train"]["epochs"] == 2
    assert manifest["config"]["train"]["seed"] == 9


def test_train_rerun_is_byte_identical_modulo_wall_clock(tmp_path):
    cfg = small_config(tmp_path)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run(["train", "--config", cfg, "--out", str(out1)]) == 0
    assert run(["train", "--config", cfg, "--out", str(out2)]) == 0
    assert read_csv_without_wall_clock(out1 / "run.csv") == \
        read_csv_without_wall_clock(out2 / "run.csv")
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    assert (out1 / "bound_report.json").read_bytes() == \
        (out2 / "bound_report.json").read_bytes()


def test_train_default_dataset_needs_no_config(tmp_path):
    out = tmp_path / "o"
    assert run(["train", "--out", str(out), "--epochs", "1", "--eval-every", "8"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["dataset"]["kind"] == "sbm"


# ---- grid / sweeps ------------------------------------------------------------------


def test_grid_writes_csv(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    assert run(["grid", "--config", cfg, "--out", str(out),
                "--strategies", "none,fixed_dropout", "--rates", "0.3",
                "--seeds", "0,1", "--epochs", "2"]) == 0
    lines = (out / "grid.csv").read_text().strip().splitlines()
    assert lines[0].startswith("strategy,")
    assert len(lines) == 1 + 2 + 1 + 2 + 1   # header, none x2+agg, fixed x2+agg


def test_oversmooth_command(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    assert run(["oversmooth", "--config", cfg, "--out", str(out),
                "--depths", "1,2", "--strategies", "none", "--epochs", "2"]) == 0
    lines = (out / "oversmoothing.csv").read_text().strip().splitlines()
    assert lines[0] == "depth,strategy,test_accuracy,final_energy"
    assert len(lines) == 3


def test_attack_command(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    assert run(["attack", "--config", cfg, "--out", str(out), "--fractions", "0,0.5",
                "--strategies", "none", "--seeds", "0", "--epochs", "2"]) == 0
    lines = (out / "robustness.csv").read_text().strip().splitlines()
    assert lines[0] == "fraction,strategy,seed,test_accuracy"
    assert len(lines) == 3   # header + 2 fractions x 1 strategy x 1 seed


# ---- gradcheck ----------------------------------------------------------------------


def test_gradcheck_command_passes(capsys):
    assert run(["gradcheck", "--instances", "2", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "all 2 instances passed" in out


# ---- sbm dataset emission -----------------------------------------------------------


def test_sbm_roundtrips_through_loader(tmp_path):
    out = tmp_path / "data"
    assert run(["sbm", "--num-nodes", "30", "--num-blocks", "2", "--p-in", "0.4",
                "--p-out", "0.1", "--feature-dim", "4", "--noise-scale", "0.3",
                "--seed", "11", "--out", str(out)]) == 0
    split = SplitSpec.from_index_files(str(out / "train_idx.txt"),
                                       str(out / "val_idx.txt"),
                                       str(out / "test_idx.txt"))
    loaded = load_graph(str(out / "edges.txt"), str(out / "features.csv"),
                        str(out / "labels.csv"), split)
    reference = generate_sbm(30, 2, 0.4, 0.1, 4, 0.3, seed=11)
    assert np.array_equal(loaded.edges, reference.edges)
    assert np.array_equal(loaded.features, reference.features)   # %.17g is lossless
    assert np.array_equal(loaded.labels, reference.labels)
    assert np.array_equal(loaded.train_mask, reference.train_mask)
    assert np.array_equal(loaded.val_mask, reference.val_mask)
    assert np.array_equal(loaded.test_mask, reference.test_mask)
