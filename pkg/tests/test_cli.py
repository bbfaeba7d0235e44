import json

import numpy as np
import pytest

from osma import bench, cli

SPLIT = {
    "input_size": 16,
    "train_per_class": 8,
    "test_per_class": 4,
    "seen": [
        {"name": "m1", "seed": 1, "architecture": "conv2_k3", "domain": "fractal"},
        {"name": "m2", "seed": 2, "architecture": "conv2_k5", "domain": "shapes"},
    ],
    "unseen_seed": [{"name": "s1", "seed": 11, "architecture": "conv2_k3", "domain": "fractal"}],
    "unseen_architecture": [{"name": "a1", "seed": 21, "architecture": "conv1_k3", "domain": "fractal"}],
    "unseen_dataset": [{"name": "d1", "seed": 1, "architecture": "conv2_k3", "domain": "mosaic"}],
}
TRAIN = {"input_size": 16, "width": 0.125, "embed_dim": 16, "batch_per_class": 4,
         "aug_steps_per_epoch": 2, "epochs": 2}


def write_config(directory, **extra):
    doc = {"manifest": "bench/manifest.jsonl", "run_dir": "run", "split": SPLIT, "train": TRAIN, **extra}
    path = directory / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    """A config directory with a generated benchmark and one trained run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert cli.main(["bench-gen", "--config", str(cfg), "--out", str(root / "bench")]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return root


def test_bench_gen_summary_and_identical_checksum(project, capsys):
    cfg = project / "cfg.json"
    assert cli.main(["bench-gen", "--config", str(cfg), "--out", str(project / "bench")]) == 0
    out = capsys.readouterr().out
    for group in ("seen_real", "seen_fake", "unseen_real", "unseen_fake"):
        assert group in out
    assert "identical checksum" in out


def test_paths_resolve_against_config_directory(project, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.OUTPUT_ROOT_ENV, raising=False)
    args = cli.build_parser().parse_args(["eval", "--config", str(project / "cfg.json")])
    cfg = cli.load_config(args)
    assert cfg.manifest == str(project / "bench" / "manifest.jsonl")
    assert cfg.run_dir == str(project / "run")


def test_output_root_environment_variable(project, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = cli.load_config(cli.build_parser().parse_args(["eval", "--config", str(project / "cfg.json")]))
    assert cfg.run_dir == str(tmp_path / "run")
    assert cfg.manifest == str(project / "bench" / "manifest.jsonl")


def test_flags_override_file_override_defaults(project):
    args = cli.build_parser().parse_args(["train", "--config", str(project / "cfg.json"), "--epochs", "7"])
    cfg = cli.load_config(args)
    assert cfg.train.epochs == 7
    assert cfg.train.width == 0.125
    assert cfg.train.lr_task == 1e-4


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = write_config(tmp_path, learning_rate=0.1)
    assert cli.main(["train", "--config", str(path)]) != 0
    assert "learning_rate" in capsys.readouterr().err
    path = write_config(tmp_path, train={**TRAIN, "lr": 0.1})
    assert cli.main(["train", "--config", str(path)]) != 0


@pytest.mark.parametrize(
    "argv,message",
    [
        (["eval", "--run-dir", "nowhere", "--manifest", "missing.jsonl"], "manifest not found"),
        (["train", "--manifest", "x.jsonl"], "run_dir"),
        (["eval", "--config", "no_such_config.json"], "cannot read config"),
    ],
)
def test_errors_exit_nonzero(tmp_path, monkeypatch, capsys, argv, message):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) != 0
    assert message in capsys.readouterr().err


def test_invalid_k_and_missing_checkpoint(project, tmp_path, capsys):
    cfg = str(project / "cfg.json")
    assert cli.main(["cluster", "--config", cfg, "--k", "1", "--out", str(tmp_path / "c")]) != 0
    assert "k must lie" in capsys.readouterr().err
    assert cli.main(["eval", "--config", cfg, "--run-dir", str(tmp_path / "empty")]) != 0


def test_unwritable_output(project, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["bench-gen", "--config", str(project / "cfg.json"), "--out", str(blocker / "sub")]) != 0
    assert "cannot write" in capsys.readouterr().err


def test_eval_outputs(project, tmp_path):
    out = tmp_path / "eval"
    argv = ["eval", "--config", str(project / "cfg.json"), "--out", str(out), "--theta-sweep", "0.2,0.5,0.9"]
    assert cli.main(argv) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert list(metrics) == ["accuracy", "auc_seed", "auc_architecture", "auc_dataset", "auc_all", "oscr_all"]
    for name in ("closed", "open", "seed", "architecture", "dataset"):
        assert (out / f"confidence_hist_{name}.csv").exists()
    for name in ("confidence_hist.png", "ccr_fpr.png", "embedding_pca.png", "accuracy_vs_theta.csv",
                 "predictions.csv", "resolved_config.json"):
        assert (out / name).exists()
    rows = (out / "accuracy_vs_theta.csv").read_text().splitlines()
    assert rows[0] == "theta,closed_acc,open_reject" and len(rows) == 4


def test_rerun_from_resolved_config_is_byte_identical(project, tmp_path):
    resolved = project / "run" / "resolved_config.json"
    first = tmp_path / "first"
    assert cli.main(["eval", "--config", str(resolved), "--out", str(first)]) == 0
    second_run = tmp_path / "rerun"
    assert cli.main(["train", "--config", str(resolved), "--run-dir", str(second_run)]) == 0
    assert cli.main(["eval", "--config", str(resolved), "--run-dir", str(second_run), "--out",
                     str(tmp_path / "second")]) == 0
    assert (first / "metrics.json").read_bytes() == (tmp_path / "second" / "metrics.json").read_bytes()


def test_cluster_output(project, tmp_path):
    out = tmp_path / "c"
    assert cli.main(["cluster", "--config", str(project / "cfg.json"), "--k", "4", "--out", str(out)]) == 0
    result = json.loads((out / "cluster_metrics.json").read_text())
    assert set(result) == {"k", "purity", "nmi", "ari"}
    assert 0 <= result["purity"] <= 1


def test_spectrum_command(project, tmp_path):
    imgs = project / "bench" / "images"
    out = tmp_path / "s"
    argv = ["spectrum", str(imgs / "m1"), str(imgs / "m2"), "--out", str(out)]
    assert cli.main(argv) == 0
    summary = json.loads((out / "spectrum_summary.json").read_text())
    assert summary["profile_distance"] > 0
    assert (out / "profile_a.csv").exists() and (out / "spectrum.png").exists()


def test_spectrum_fit(project, tmp_path):
    imgs = project / "bench" / "images"
    cfg = tmp_path / "fit.json"
    cfg.write_text(json.dumps({"feasibility": {"steps": 20, "batch_size": 8}}))
    out = tmp_path / "fit"
    argv = ["spectrum", str(imgs / "m1"), str(imgs / "m2"), "--fit", "--out", str(out), "--config", str(cfg)]
    assert cli.main(argv) == 0
    report = json.loads((out / "spectrum_summary.json").read_text())["feasibility"]
    assert {"initial_distance", "final_distance", "final_pixel_mse"} <= set(report)
    assert (out / "profile_a_fitted.csv").exists()


def test_spectrum_resolution_mismatch(project, tmp_path, capsys):
    small = tmp_path / "small"
    small.mkdir()
    bench.save_png(small / "a.png", np.zeros((3, 8, 8)))
    argv = ["spectrum", str(project / "bench" / "images" / "m1"), str(small), "--out", str(tmp_path / "o")]
    assert cli.main(argv) != 0
    assert "resolution mismatch" in capsys.readouterr().err


def test_robustness_with_immunized(project, tmp_path):
    out = tmp_path / "r"
    argv = ["robustness", "--config", str(project / "cfg.json"), "--kind", "blur", "--strengths", "0,1,2",
            "--immunized", "--out", str(out)]
    assert cli.main(argv) == 0
    result = json.loads((out / "robustness.json").read_text())
    assert [r["strength"] for r in result["original"]] == [0.0, 1.0, 2.0]
    assert len(result["immunized"]) == 3
    assert isinstance(result["original_monotone"], bool)
    assert (out / "robustness.csv").exists()


def test_robustness_rejects_out_of_range_strength(project, tmp_path):
    argv = ["robustness", "--config", str(project / "cfg.json"), "--kind", "noise", "--strengths", "0,5",
            "--out", str(tmp_path / "r")]
    assert cli.main(argv) != 0


def test_schema_command(capsys):
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert schema["additionalProperties"] is False
    assert "train" in schema["properties"]


def test_partial_split_overrides_default(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = cli.load_config(cli.build_parser().parse_args(["bench-gen", "--out", "b", "--input-size", "24"]))
    assert cfg.split.input_size == 24
    assert cfg.split.seen == bench.default_split_spec().seen
