"""Command-line entry point: ``osma <command> [options]``.

Every command accepts ``--config FILE`` (a JSON RunConfig document; print the
schema with ``osma schema``). Values given as flags override the file, which
overrides the defaults. Relative input paths in a config file are resolved
against the file's directory; relative output paths against
``$OSMA_OUTPUT_ROOT`` when set, else the same directory. Each command writes a
``resolved_config.json`` with every default spelled out next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import bench, evalkit, trainer
from .bench import SplitSpec, default_split_spec
from .data import load_split
from .models import load_checkpoint
from .trainer import FeasibilityConfig, TrainConfig

log = logging.getLogger("osma")

OUTPUT_ROOT_ENV = "OSMA_OUTPUT_ROOT"


class RunConfig(BaseModel):
    """Configuration document shared by all commands; each uses its own subset."""

    model_config = ConfigDict(extra="forbid")

    manifest: str | None = None
    run_dir: str | None = None
    out_dir: str | None = None
    split: SplitSpec = Field(default_factory=default_split_spec)
    train: TrainConfig = TrainConfig()
    feasibility: FeasibilityConfig = FeasibilityConfig()
    theta: float = Field(0.5, ge=0, le=1)
    theta_sweep: list[float] | None = None
    epoch: int | None = None
    k: int | None = None
    cluster_seed: int = 0
    corpus_a: str | None = None
    corpus_b: str | None = None
    perturb_kind: str | None = None
    strengths: list[float] | None = None


class CLIError(Exception):
    pass


# config plumbing --------------------------------------------------------------------

INPUT_PATHS = ("manifest", "corpus_a", "corpus_b")
OUTPUT_PATHS = ("run_dir", "out_dir")


def _resolve(value, base: Path):
    if value is None:
        return None
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else (base / p).resolve())


def load_config(args) -> RunConfig:
    data = {}
    base = Path.cwd()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except OSError as e:
            raise CLIError(f"cannot read config {path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise CLIError(f"config {path} is not valid JSON: {e}") from e
        base = path.resolve().parent
    out_base = Path(os.environ[OUTPUT_ROOT_ENV]) if os.environ.get(OUTPUT_ROOT_ENV) else base
    for key in INPUT_PATHS:
        if data.get(key) is not None:
            data[key] = _resolve(data[key], base)
    for key in OUTPUT_PATHS:
        if data.get(key) is not None:
            data[key] = _resolve(data[key], out_base)
    # flags win over the file; flag paths are relative to the working directory
    flag_out_base = Path(os.environ[OUTPUT_ROOT_ENV]) if os.environ.get(OUTPUT_ROOT_ENV) else Path.cwd()
    for key, value in _flag_values(args).items():
        if key in INPUT_PATHS:
            value = _resolve(value, Path.cwd())
        elif key in OUTPUT_PATHS:
            value = _resolve(value, flag_out_base)
        if key.startswith("train.") or key.startswith("split."):
            section, field = key.split(".", 1)
            data.setdefault(section, {})
            if not isinstance(data[section], dict):
                data[section] = dict(data[section])
            data[section][field] = value
        else:
            data[key] = value
    # a partial split document overrides fields of the default split
    if isinstance(data.get("split"), dict):
        data["split"] = {**default_split_spec().model_dump(), **data["split"]}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise CLIError(f"invalid configuration:\n{e}") from e


# flag name -> config key
FLAG_KEYS = {
    "manifest": "manifest",
    "run_dir": "run_dir",
    "out": "out_dir",
    "theta": "theta",
    "epoch": "epoch",
    "k": "k",
    "cluster_seed": "cluster_seed",
    "corpus_a": "corpus_a",
    "corpus_b": "corpus_b",
    "kind": "perturb_kind",
    "mode": "train.mode",
    "epochs": "train.epochs",
    "seed": "train.seed",
    "aug_steps": "train.aug_steps_per_epoch",
    "global_seed": "split.global_seed",
    "input_size": "split.input_size",
    "train_per_class": "split.train_per_class",
    "test_per_class": "split.test_per_class",
    "amplitude": "split.amplitude",
}


def _flag_values(args) -> dict:
    out = {}
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    if getattr(args, "theta_sweep", None):
        out["theta_sweep"] = [float(t) for t in args.theta_sweep.split(",")]
    if getattr(args, "strengths", None):
        out["strengths"] = [float(t) for t in args.strengths.split(",")]
    return out


def write_resolved(cfg: RunConfig, directory: Path, name="resolved_config.json"):
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(cfg.model_dump_json(indent=2) + "\n")
    return path


def _require(cfg, *keys):
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise CLIError("missing required setting(s): " + ", ".join(missing))


def _writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".osma_write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CLIError(f"cannot write to {path}: {e.strerror}") from e
    return path


def _checkpoint(run_dir, epoch=None):
    ckpt = Path(run_dir) / "checkpoints"
    try:
        return load_checkpoint(ckpt, epoch)
    except FileNotFoundError as e:
        raise CLIError(str(e)) from e


# plotting ----------------------------------------------------------------------------


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    # fixed metadata keeps reruns byte-comparable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _plt().close(fig)


def plot_histograms(hist, out: Path):
    plt = _plt()
    edges = np.array(hist["edges"])
    centers = (edges[:-1] + edges[1:]) / 2
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, counts in hist["counts"].items():
        counts = np.array(counts, dtype=float)
        if counts.sum():
            ax.plot(centers, counts / counts.sum(), marker="o", label=name)
    ax.set_xlabel("max softmax confidence")
    ax.set_ylabel("fraction of group")
    ax.legend()
    _save(fig, out / "confidence_hist.png")


def plot_ccr_fpr(closed, opened, out: Path):
    plt = _plt()
    _, ccr, fpr = evalkit.ccr_fpr_curve(closed, opened)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(fpr, ccr)
    ax.set_xscale("symlog", linthresh=1e-2)
    ax.set_xlabel("false positive rate (open accepted)")
    ax.set_ylabel("correct classification rate")
    _save(fig, out / "ccr_fpr.png")


def plot_pca(features, is_open, out: Path):
    plt = _plt()
    f = features - features.mean(0)
    _, _, vt = np.linalg.svd(f, full_matrices=False)
    xy = f @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(*xy[~is_open].T, s=4, label="closed", alpha=0.6)
    ax.scatter(*xy[is_open].T, s=4, label="open", alpha=0.6)
    ax.legend()
    _save(fig, out / "embedding_pca.png")


# commands ---------------------------------------------------------------------------


def cmd_bench_gen(cfg: RunConfig):
    _require(cfg, "out_dir")
    out = _writable_dir(cfg.out_dir)
    previous = bench.manifest_checksum(out) if (out / "manifest.jsonl").exists() else None
    try:
        manifest = bench.build_benchmark(cfg.split, out)
    except PermissionError as e:
        raise CLIError(f"cannot write to {e.filename or out}") from e
    write_resolved(cfg, out)
    checksum = bench.manifest_checksum(out)
    summary = manifest.summary()
    print(f"manifest: {out / 'manifest.jsonl'}")
    print(f"classes (K={summary['num_known']}): {', '.join(summary['classes'])}")
    for group, counts in summary["groups"].items():
        detail = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
        print(f"  {group}: {detail}")
    print(f"checksum: {checksum}")
    if previous == checksum:
        print("identical checksum to the existing benchmark")
    elif previous is not None:
        print("checksum differs from the previous contents")
    return out / "manifest.jsonl"


def _load_manifest(cfg):
    _require(cfg, "manifest")
    try:
        return bench.load_manifest(cfg.manifest)
    except FileNotFoundError as e:
        raise CLIError(f"manifest not found: {cfg.manifest}") from e


def cmd_train(cfg: RunConfig):
    _require(cfg, "run_dir")
    manifest = _load_manifest(cfg)
    run_dir = _writable_dir(cfg.run_dir)
    write_resolved(cfg, run_dir)
    data = load_split(manifest, "train")
    state = trainer.train_pose(data, cfg.train, run_dir=run_dir)
    last = [e for e in state.log if e["phase"] == "epoch"][-1]
    print(f"trained {cfg.train.mode}: {state.epochs_completed} epochs, pool of {len(state.pool)} "
          f"augmentation models, train accuracy {last['train_accuracy']:.4f}")
    print(f"run directory: {run_dir}")
    return run_dir


def _records(task, data):
    scores = evalkit.softmax_scores(task, data.images)
    return evalkit.make_records(scores, data.labels, data.unseen_types)


def cmd_eval(cfg: RunConfig):
    _require(cfg, "run_dir")
    manifest = _load_manifest(cfg)
    task, pool, rec = _checkpoint(cfg.run_dir, cfg.epoch)
    out = _writable_dir(cfg.out_dir or Path(cfg.run_dir) / "eval")
    write_resolved(cfg, out)
    test = load_split(manifest, "test")
    records = _records(task, test)
    report = evalkit.metrics_report(records, manifest.num_known)
    (out / "metrics.json").write_text(report.to_json())
    closed = [r for r in records if not r.is_open]
    opened = [r for r in records if r.is_open]
    at_theta = evalkit.accuracy_vs_theta(records, [cfg.theta])[0]
    (out / "theta_summary.json").write_text(json.dumps({**at_theta, "checkpoint_epoch": rec["epoch"],
                                                        "confusion": report.confusion}, indent=2) + "\n")
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "class_name", "true_label", "unseen_type", "confidence", "predicted", "decision"])
        for i, (r, name) in enumerate(zip(records, test.names)):
            w.writerow([i, name, r.true_label, r.unseen_type, f"{r.confidence:.10f}", r.predicted,
                        evalkit.decide(r.scores, cfg.theta)])
    hist = evalkit.confidence_histogram(records)
    evalkit.write_histogram_csv(hist, out)
    plot_histograms(hist, out)
    plot_ccr_fpr(closed, opened, out)
    feats = evalkit.embeddings(task, test.images)
    plot_pca(feats, np.array([r.is_open for r in records]), out)
    if cfg.theta_sweep:
        rows = evalkit.accuracy_vs_theta(records, cfg.theta_sweep)
        with (out / "accuracy_vs_theta.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["theta", "closed_acc", "open_reject"])
            w.writeheader()
            for row in rows:
                w.writerow({k: f"{v:.6f}" for k, v in row.items()})
        print("theta      closed_acc  open_reject")
        for row in rows:
            print(f"{row['theta']:<10.4f} {row['closed_acc']:<11.4f} {row['open_reject']:.4f}")
    print(report.to_json(), end="")
    print(f"outputs: {out}")
    return out


def _corpus(path, size=None):
    try:
        return bench.load_image_folder(path, size)
    except (FileNotFoundError, NotADirectoryError) as e:
        raise CLIError(f"cannot read corpus {path}") from e


def cmd_spectrum(cfg: RunConfig, fit=False):
    from .spectrum import mean_profile, profile_distance

    _require(cfg, "corpus_a", "corpus_b", "out_dir")
    a = _corpus(cfg.corpus_a)
    b = _corpus(cfg.corpus_b)
    if a.shape[1:] != b.shape[1:]:
        raise CLIError(f"resolution mismatch: {a.shape[-1]}px vs {b.shape[-1]}px")
    out = _writable_dir(cfg.out_dir)
    write_resolved(cfg, out)
    fcfg = cfg.feasibility
    pa = mean_profile(a, normalize=fcfg.normalize, log_power=fcfg.log_power)
    pb = mean_profile(b, normalize=fcfg.normalize, log_power=fcfg.log_power)
    pa.to_csv(out / "profile_a.csv")
    pb.to_csv(out / "profile_b.csv")
    summary = {"profile_distance": profile_distance(pa, pb), "log_power": fcfg.log_power,
               "normalized": fcfg.normalize, "images_a": len(a), "images_b": len(b)}
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(pa.values, label="corpus A")
    ax.plot(pb.values, label="corpus B")
    if fit:
        model, report = trainer.spectral_feasibility(a, b, fcfg)
        summary["feasibility"] = report
        from .trainer import _profile_of

        pf = _profile_of(a, model, fcfg.normalize, fcfg.log_power)
        pf.to_csv(out / "profile_a_fitted.csv")
        ax.plot(pf.values, "--", label="A after fitted augmentation")
    ax.set_xlabel("spatial frequency (ring index)")
    ax.set_ylabel("log power" if fcfg.log_power else "power")
    ax.legend()
    _save(fig, out / "spectrum.png")
    (out / "spectrum_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return out


def cmd_cluster(cfg: RunConfig):
    _require(cfg, "run_dir", "k")
    manifest = _load_manifest(cfg)
    task, _, _ = _checkpoint(cfg.run_dir, cfg.epoch)
    test = load_split(manifest, "test")
    if not 2 <= cfg.k <= len(test):
        raise CLIError(f"k must lie in [2, {len(test)}], got {cfg.k}")
    feats = evalkit.embeddings(task, test.images)
    purity, nmi, ari = evalkit.cluster_metrics(feats, test.names, cfg.k, seed=cfg.cluster_seed)
    result = {"k": cfg.k, "purity": round(purity, 10), "nmi": round(nmi, 10), "ari": round(ari, 10)}
    out = _writable_dir(cfg.out_dir or Path(cfg.run_dir) / "cluster")
    write_resolved(cfg, out)
    (out / "cluster_metrics.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))
    return out


def _oscr_table(task, test, kind, strengths):
    rows = []
    for s in strengths:
        images = np.stack([bench.perturb(x, kind, s, seed=i) for i, x in enumerate(test.images)])
        recs = evalkit.make_records(evalkit.softmax_scores(task, images), test.labels, test.unseen_types)
        closed = [r for r in recs if not r.is_open]
        opened = [r for r in recs if r.is_open]
        rows.append({"strength": s, "oscr": evalkit.oscr(closed, opened),
                     "accuracy": evalkit.closed_set_accuracy(closed)})
    return rows


def _monotone(rows, kind):
    # order from mildest to harshest; for jpeg and crop the larger number is milder
    if kind in ("jpeg", "crop_resize"):
        rows = rows[::-1]
    elif kind == "lighting":
        rows = sorted(rows, key=lambda r: abs(r["strength"]))
    vals = [r["oscr"] for r in rows]
    return all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def cmd_robustness(cfg: RunConfig, immunized=False):
    _require(cfg, "run_dir", "perturb_kind", "strengths")
    if cfg.perturb_kind not in bench.PERTURB_RANGES:
        raise CLIError(f"unknown perturbation {cfg.perturb_kind!r}; choose from {', '.join(bench.PERTURBATIONS)}")
    manifest = _load_manifest(cfg)
    task, _, _ = _checkpoint(cfg.run_dir, cfg.epoch)
    out = _writable_dir(cfg.out_dir or Path(cfg.run_dir) / f"robustness_{cfg.perturb_kind}")
    write_resolved(cfg, out)
    test = load_split(manifest, "test")
    strengths = sorted(cfg.strengths)
    result = {"kind": cfg.perturb_kind, "original": _oscr_table(task, test, cfg.perturb_kind, strengths)}
    result["original_monotone"] = _monotone(result["original"], cfg.perturb_kind)
    if immunized:
        resolved = Path(cfg.run_dir) / "resolved_config.json"
        base_cfg = RunConfig.model_validate_json(resolved.read_text()).train if resolved.exists() else cfg.train
        if cfg.perturb_kind in ("jpeg", "crop_resize"):
            worst = min(strengths)
        else:
            worst = max(strengths, key=abs)
        imm_cfg = base_cfg.model_copy(update={"perturb_kind": cfg.perturb_kind, "perturb_max": worst})
        imm_dir = out / "immunized_run"
        state = trainer.train_pose(load_split(manifest, "train"), imm_cfg, run_dir=imm_dir)
        result["immunized"] = _oscr_table(state.task, test, cfg.perturb_kind, strengths)
        result["immunized_monotone"] = _monotone(result["immunized"], cfg.perturb_kind)
    with (out / "robustness.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "strength", "oscr", "accuracy"])
        for model in ("original", "immunized"):
            for row in result.get(model, []):
                w.writerow([model, row["strength"], f"{row['oscr']:.6f}", f"{row['accuracy']:.6f}"])
    (out / "robustness.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"{'model':<10} {'strength':>9} {'oscr':>8} {'acc':>8}")
    for model in ("original", "immunized"):
        for row in result.get(model, []):
            print(f"{model:<10} {row['strength']:>9.4g} {row['oscr']:>8.4f} {row['accuracy']:>8.4f}")
    print(f"monotone degradation (original): {result['original_monotone']}")
    return out


def cmd_schema(_cfg=None):
    print(json.dumps(RunConfig.model_json_schema(), indent=2))


# argument parsing ----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="osma", description="Open-set model attribution toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON RunConfig document")
        return sp

    sp = command("bench-gen", "generate the synthetic benchmark")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--global-seed", type=int)
    sp.add_argument("--input-size", type=int)
    sp.add_argument("--train-per-class", type=int)
    sp.add_argument("--test-per-class", type=int)
    sp.add_argument("--amplitude", type=float)

    sp = command("train", "train a task model (and augmentation pool)")
    sp.add_argument("--manifest")
    sp.add_argument("--run-dir")
    sp.add_argument("--mode", choices=trainer.MODES)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--aug-steps", type=int)

    sp = command("eval", "open-set evaluation of a trained run")
    sp.add_argument("--run-dir")
    sp.add_argument("--manifest")
    sp.add_argument("--theta", type=float)
    sp.add_argument("--theta-sweep", help="comma-separated thresholds")
    sp.add_argument("--epoch", type=int)
    sp.add_argument("--out")

    sp = command("spectrum", "compare mean spectrum profiles of two image folders")
    sp.add_argument("corpus_a", nargs="?")
    sp.add_argument("corpus_b", nargs="?")
    sp.add_argument("--fit", action="store_true", help="fit an augmentation model from A toward B")
    sp.add_argument("--out")

    sp = command("cluster", "k-means on embeddings of all test images")
    sp.add_argument("--run-dir")
    sp.add_argument("--manifest")
    sp.add_argument("--k", type=int)
    sp.add_argument("--cluster-seed", type=int)
    sp.add_argument("--epoch", type=int)
    sp.add_argument("--out")

    sp = command("robustness", "OSCR under test-time perturbations")
    sp.add_argument("--run-dir")
    sp.add_argument("--manifest")
    sp.add_argument("--kind", choices=bench.PERTURBATIONS)
    sp.add_argument("--strengths", help="comma-separated strengths")
    sp.add_argument("--immunized", action="store_true", help="also retrain with the perturbation as augmentation")
    sp.add_argument("--epoch", type=int)
    sp.add_argument("--out")

    command("schema", "print the RunConfig JSON schema")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        if args.command == "bench-gen":
            cmd_bench_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "spectrum":
            cmd_spectrum(cfg, fit=args.fit)
        elif args.command == "cluster":
            cmd_cluster(cfg)
        elif args.command == "robustness":
            cmd_robustness(cfg, immunized=args.immunized)
        else:
            cmd_schema(cfg)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
