import json

import numpy as np
import pytest

from deltatune import checkpoint, cli, harness
from deltatune.harness import ConfigError, ExperimentConfig, ReportError

TINY_DATA = {"structure": "OneSidedPatch", "n_train": 120, "n_tune": 60, "n_test": 80, "n_holdout": 20}


def tiny(tmp_path, **over):
    d = {
        "name": "tiny",
        "dataset": dict(TINY_DATA),
        "pretrain": {"epochs": 1, "seeds": [0]},
        "methods": [{"method": "ChangePenalized", "max_steps": 20}],
        "b_grid": [1, 2],
        "batches_per_model": 2,
        "output_dir": str(tmp_path / "out"),
    }
    d.update(over)
    return d


def write_config(tmp_path, d, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return path


# ---------------------------------------------------------------- config


def test_method_defaults():
    cp = harness.MethodSpec.from_dict({"method": "ChangePenalized"})
    ft = harness.MethodSpec.from_dict({"method": "FineTune"})
    assert (cp.norm.value, cp.lam, cp.epsilon, cp.weight_decay) == ("Combined", 1.0, 0, 0.0)
    assert (ft.lr, ft.momentum, ft.weight_decay, ft.epsilon) == (1e-5, 0.9, 5e-4, 0)
    assert harness.MethodSpec.from_dict({"method": "MAS"}).lambda_mas == 1.0


@pytest.mark.parametrize(
    "method,match",
    [
        ({"method": "Dropout"}, "unknown method"),
        ({"method": "FineTune", "lambda": 1.0}, "ChangePenalized only"),
        ({"method": "SideTune", "lambda_mas": 1.0}, "MAS only"),
        ({"method": "ChangePenalized", "norm": "L3"}, "L3"),
        ({"method": "ChangePenalized", "epsilon": 600}, "exceeds"),
        ({"method": "FineTune", "patience": 3}, "patience"),
    ],
)
def test_bad_methods(tmp_path, method, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(tiny(tmp_path, methods=[method]))


@pytest.mark.parametrize(
    "over,match",
    [
        ({"b_grid": [0, 1]}, "b_grid"),
        ({"b_grid": [64]}, "b_grid"),
        ({"pretrain": {"seeds": [1, 1]}}, "distinct"),
        ({"pretrain": {"momentum_x": 1}}, "momentum_x"),
        ({"extra": 1}, "extra"),
        ({"dataset": {"structure": "OneSidedPatch", "size": 3}}, "size"),
        ({"methods": []}, "no methods"),
        ({"workers": 0}, "positive"),
    ],
)
def test_bad_configs(tmp_path, over, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(tiny(tmp_path, **over))


def test_grid_expands_cross_product(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, methods=[], grid={
        "norms": ["L1", "L2", "Combined"], "lambdas": [0.01, 1.0], "epsilons": [0, 5]}))
    assert len(cfg.methods) == 12
    assert {(m.norm.value, m.lam, m.epsilon) for m in cfg.methods} == {
        (n, l, e) for n in ("L1", "L2", "Combined") for l in (0.01, 1.0) for e in (0, 5)}


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_overrides(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, pretrain={"seeds": [0, 1, 2]}))
    o = cfg.with_overrides(output_dir="x", seed=7, workers=3)
    assert (o.output_dir, o.pretrain.seeds, o.workers) == ("x", (7,), 3)


def test_cell_count(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, methods=[], grid={"lambdas": [1.0, 10.0]},
                                          pretrain={"seeds": [0, 1, 2]}, batches_per_model=5))
    assert len(harness.sweep_cells(cfg)) == 60


# ---------------------------------------------------------------- runs


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    d = tiny(tmp, methods=[
        {"method": "ChangePenalized", "max_steps": 20},
        {"method": "FineTune", "lr": 1e-3, "max_steps": 20},
        {"method": "SideTune", "lr": 1e-3, "max_steps": 20},
        {"method": "MAS", "lr": 1e-4, "max_steps": 20},
    ])
    cfg = ExperimentConfig.from_dict(d)
    path = harness.cmd_sweep(cfg)
    return cfg, path, tmp


def test_sweep_rows_and_order(swept):
    cfg, path, _ = swept
    rows = harness.read_results(path)
    assert len(rows) == 4 * 2 * 1 * 2
    assert [(r["method"], r["b"], r["batch_index"]) for r in rows] == [
        (m.method.value, b, k) for m in cfg.methods for b in (1, 2) for k in (0, 1)]
    assert all(r["error"] == "" for r in rows)


def test_csv_format(swept):
    _, path, _ = swept
    raw = path.read_bytes()
    assert raw.startswith(b"# deltatune-results/1\n")
    assert b"\r" not in raw
    header = raw.split(b"\n")[1].decode().split(",")
    assert header == harness.RESULT_COLUMNS


def test_sidecar_matches_csv(swept):
    _, path, _ = swept
    cols, mat = harness.read_sidecar(path.with_suffix(".f64"))
    rows = harness.read_results(path)
    j = cols.index("bacc_after")
    for r, v in zip(rows, mat[:, j]):
        assert float(f"{v:.6g}") == r["bacc_after"]


def test_batches_never_share_samples(swept):
    cfg, _, _ = swept
    ctx = harness._Context(cfg)
    from deltatune.tuner import select_contradicting
    for b in cfg.b_grid:
        ids = [set(select_contradicting(cfg.model, ctx.models[0], ctx.bundle.tune_pool, ctx.bundle.contradicting,
                                        b, k, seed=0)[2]) for k in range(cfg.batches_per_model)]
        assert not ids[0] & ids[1]


def test_sweep_rerun_byte_identical(swept, tmp_path):
    cfg, path, _ = swept
    again = harness.cmd_sweep(cfg, filename="again.csv")
    assert again.read_bytes() == path.read_bytes()
    assert again.with_suffix(".f64").read_bytes() == path.with_suffix(".f64").read_bytes()


def test_parallel_sweep_matches_serial(swept):
    cfg, path, _ = swept
    from dataclasses import replace
    par = harness.cmd_sweep(replace(cfg, workers=2), filename="par.csv")
    assert par.read_bytes() == path.read_bytes()


def test_failed_cells_recorded(tmp_path):
    # 60 patched class-1 images cannot supply 2 disjoint batches of 32
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, b_grid=[1, 32]))
    rows = harness.read_results(harness.cmd_sweep(cfg))
    assert [bool(r["error"]) for r in rows] == [False, False, False, True]
    assert "InsufficientSamples" in rows[-1]["error"]


def test_zero_lr_leaves_metrics(tmp_path):
    methods = [{"method": m, "lr": 0.0, "max_steps": 3} for m in ("ChangePenalized", "FineTune", "SideTune", "MAS")]
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, methods=methods, b_grid=[1], batches_per_model=1))
    for r in harness.run_sweep(cfg):
        assert (r["acc_after"], r["bacc_after"]) == (r["acc_before"], r["bacc_before"]), r["method"]


def test_tune_steps_match_tuner(tmp_path):
    from deltatune.tuner import select_contradicting, tune
    cfg = ExperimentConfig.from_dict(tiny(tmp_path))
    harness.cmd_pretrain(cfg)
    ck = harness.checkpoint_path(cfg, 0)
    row = harness.cmd_tune(cfg, ck, 0, 2, 1)
    params = checkpoint.load(ck)[0]
    bundle = harness.load_dataset(cfg)
    x, y, _ = select_contradicting(cfg.model, params, bundle.tune_pool, bundle.contradicting, 2, 1, seed=0)
    assert row["steps_taken"] == tune(params, cfg.model, (x, y), cfg.methods[0].tune_config(0)).steps_taken


def test_pretrain_report_and_determinism(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path))
    rows = harness.cmd_pretrain(cfg)
    first = harness.checkpoint_path(cfg, 0).read_bytes()
    harness.cmd_pretrain(cfg)
    assert harness.checkpoint_path(cfg, 0).read_bytes() == first
    assert rows[0]["bias_gap"] == pytest.approx(rows[0]["holdout_bacc"] - rows[0]["test_bacc"])
    assert (tmp_path / "out" / "pretrain_report.csv").read_text().startswith("# deltatune-pretrain/1\n")


def test_stale_checkpoint_is_retrained(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny(tmp_path))
    harness.cmd_pretrain(cfg)
    other = ExperimentConfig.from_dict(tiny(tmp_path, pretrain={"epochs": 2, "seeds": [0]}))
    harness.load_models(other)
    prov = checkpoint.read_manifest(harness.checkpoint_path(cfg, 0))["provenance"]
    assert prov["config_hash"] == other.model_hash(0)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = ExperimentConfig.from_dict(tiny(tmp_path, output_dir=str(blocker / "sub")))
    with pytest.raises(OSError, match="cannot create"):
        harness.cmd_pretrain(cfg)


# ---------------------------------------------------------------- report


def test_report_counts_and_files(swept):
    _, path, tmp = swept
    out = harness.cmd_report([path], tmp / "report")
    lines = out["aggregate"].read_text().splitlines()
    assert lines[0] == "# deltatune-aggregate/1"
    header = lines[1].split(",")
    n = header.index("n")
    assert all(line.split(",")[n] == "2" for line in lines[2:])
    assert len(lines) - 2 == 4 * 2
    for role in ("dbacc_vs_b", "norm_diff_vs_b", "epsilon_vs_b"):
        assert out[role].is_file()


def test_report_single_row_std_zero(swept, tmp_path):
    _, path, _ = swept
    lines = path.read_text().splitlines()
    single = tmp_path / "one.csv"
    single.write_text("\n".join(lines[:3]) + "\n")
    agg = harness.cmd_report([single], tmp_path / "r")["aggregate"].read_text().splitlines()
    header, row = agg[1].split(","), agg[2].split(",")
    assert all(float(row[i]) == 0.0 for i, h in enumerate(header) if h.startswith("std_"))


def test_report_shuffle_invariant(swept, tmp_path):
    _, path, _ = swept
    lines = path.read_text().splitlines()
    body = lines[2:]
    rng = np.random.default_rng(0)
    shuffled = tmp_path / "shuffled.csv"
    shuffled.write_text("\n".join(lines[:2] + [body[i] for i in rng.permutation(len(body))]) + "\n")
    a = harness.cmd_report([path], tmp_path / "a")
    b = harness.cmd_report([shuffled], tmp_path / "b")
    for role in a:
        assert a[role].read_bytes() == b[role].read_bytes()


def test_report_malformed_row_line_number(swept, tmp_path):
    _, path, _ = swept
    lines = path.read_text().splitlines()
    lines[4] = lines[4].replace(",", ";", 3)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReportError, match=r"bad.csv:5:"):
        harness.cmd_report([bad], tmp_path / "r")


# ---------------------------------------------------------------- CLI


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = write_config(tmp_path, tiny(tmp_path, b_grid=[99]))
    assert cli.run(["sweep", "--config", str(path)]) == 1
    assert "b_grid" in capsys.readouterr().err


def test_cli_invalid_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    assert cli.run(["pretrain", "--config", str(path)]) == 1


def test_cli_runtime_error_exit_code(tmp_path):
    path = write_config(tmp_path, tiny(tmp_path))
    assert cli.run(["tune", "--config", str(path), "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_cli_end_to_end(tmp_path, capsys):
    path = write_config(tmp_path, tiny(tmp_path))
    out = tmp_path / "cli_out"
    assert cli.run(["pretrain", "--config", str(path), "--output-dir", str(out)]) == 0
    ck = next((out / "checkpoints").glob("*.ckpt"))
    assert cli.run(["tune", "--config", str(path), "--output-dir", str(out), "--checkpoint", str(ck), "--b", "1"]) == 0
    assert cli.run(["sweep", "--config", str(path), "--output-dir", str(out), "--workers", "1"]) == 0
    assert cli.run(["report", str(out / "results.csv")]) == 0
    assert (out / "aggregate.csv").is_file()
    assert cli.run(["gen-data", "--config", str(path), "--output-dir", str(out)]) == 0
    assert (out / "data" / "manifest.tsv").is_file()


def test_cli_report_malformed_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("# x\nfoo,bar\n")
    assert cli.run(["report", str(bad)]) == 2


def test_image_folder_config(tmp_path):
    data = tmp_path / "data"
    cfg = ExperimentConfig.from_dict(tiny(tmp_path))
    from deltatune.datagen import export_image_folder, generate
    export_image_folder(generate(cfg.dataset), data)
    d = tiny(tmp_path, dataset={"image_folder": "data", "contradicting": [[1, "patch"]]})
    loaded = ExperimentConfig.load(write_config(tmp_path, d))
    rows = harness.run_sweep(loaded)
    assert len(rows) == 4 and all(r["error"] == "" for r in rows)
    assert rows[0]["dataset"] == "data"
