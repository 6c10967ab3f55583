"""``adlda`` command line: train, eval, cam, gradcheck, synth-demo.

Exit codes: 0 success, 1 verification failure, 2 invalid input,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import adlda
from adlda.attribution import box_mass_fraction, grad_cam, heatmap_to_ppm
from adlda.config import (
    ConfigError,
    RunConfig,
    load_cam_config,
    load_config,
    load_datasets,
    parse_config,
    parse_seeds,
    run_id,
)
from adlda.datasets import DatasetFormatError
from adlda.model import CheckpointError, build_model, load_checkpoint, save_checkpoint
from adlda.tensor import ShapeError
from adlda.trainer import TrainingDivergence, evaluate, fit, format_float

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_OUT = "runs"
THREADS_ENV = "ADLDA_THREADS"

DEFAULT_DEMO_CONFIG = {
    "version": 1,
    "seed": 0,
    "dataset": {"name": "synthetic", "synthetic": {"image_shape": [1, 8, 8], "n_train": 1000, "n_test": 2000}},
    "model": {"extractor": "conv", "conv_filters": [8, 16], "domain_hidden": [32]},
    "augment": {"families": [{"kind": k} for k in ("identity", "geometric", "color", "noise", "cutout")]},
    "train": {"eta": 0.01, "momentum": 0.9, "epochs": 15, "batch_size": 64, "eval_every": 15,
              "lambda_schedule": "constant", "lambda_max": 0.0},
    "demo": {"seeds": list(range(20)), "adlda_lambda": 0.05},
}


class InputError(Exception):
    """Bad user input detected outside config parsing."""


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn: Callable, items: Sequence, workers: int) -> List:
    """Order-preserving map; a process pool when more than one worker is allowed."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# train


def train_run(raw: bytes, seed: int, out_dir: str) -> dict:
    """One complete training run; returns the manifest."""
    cfg = parse_config(raw)
    rid = run_id(raw, seed)
    run_dir = os.path.join(out_dir, rid)
    os.makedirs(run_dir, exist_ok=True)
    started = _now()
    train, test = load_datasets(cfg, seed)
    spec = cfg.model_spec(train.input_shape, train.class_count)
    model = build_model(spec, seed)
    tc = cfg.train_config(seed)
    metrics = fit(model, train, test, cfg.augment.families, cfg.augment.resolved_probabilities(), tc)
    test_acc, test_loss = evaluate(model, test)
    metrics.write_csv(os.path.join(run_dir, "metrics.csv"))
    save_checkpoint(os.path.join(run_dir, "checkpoint.adlda"), model,
                    {"seed": seed, "epoch": tc.epochs, "runid": rid})
    final = metrics.final
    manifest = {
        "runid": rid,
        "seed": seed,
        "code_version": adlda.__version__,
        "config": cfg.resolved(),
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "started": started,
        "finished": _now(),
        "metrics": {
            "epoch": final.epoch,
            "train_ly": format_float(final.train_ly),
            "train_ld": format_float(final.train_ld),
            "test_acc": format_float(test_acc),
            "test_loss": format_float(test_loss),
            "test_domain_acc": format_float(final.test_domain_acc),
        },
        "timing": {"epoch_wall_ms": metrics.epoch_wall_ms},
        "artifacts": ["metrics.csv", "checkpoint.adlda", "manifest.json"],
    }
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump_json(manifest))
    return manifest


def _train_job(args):
    return train_run(*args)


SUMMARY_FIELDS = ("test_acc", "test_loss", "train_ly", "train_ld")


def summary_csv(manifests: Sequence[dict]) -> str:
    """One row per run, then mean and std rows (std with ddof=1, nan for one run)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("seed", "runid") + SUMMARY_FIELDS)
    values = {k: [float(m["metrics"][k]) for m in manifests] for k in SUMMARY_FIELDS}
    for i, m in enumerate(manifests):
        w.writerow([m["seed"], m["runid"]] + [format_float(values[k][i]) for k in SUMMARY_FIELDS])
    n = len(manifests)
    w.writerow(["mean", f"n={n}"] + [format_float(float(np.mean(values[k]))) for k in SUMMARY_FIELDS])
    std = [float(np.std(values[k], ddof=1)) if n > 1 else float("nan") for k in SUMMARY_FIELDS]
    w.writerow(["std", f"n={n}"] + [format_float(s) for s in std])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds) if args.seeds is not None else [cfg.seed]
    out_dir = args.out or cfg.out_dir or DEFAULT_OUT
    manifests = parallel_map(_train_job, [(cfg.raw, s, out_dir) for s in seeds], worker_count())
    for m in manifests:
        print(f"run {m['runid']} seed={m['seed']} test_acc={m['metrics']['test_acc']} "
              f"test_loss={m['metrics']['test_loss']}")
    if args.seeds is not None:
        text = summary_csv(manifests)
        path = os.path.join(out_dir, f"summary_{run_id(cfg.raw, -1)}.csv")
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        accs = [float(m["metrics"]["test_acc"]) for m in manifests]
        sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else float("nan")
        print(f"summary over {len(accs)} runs: test_acc {np.mean(accs):.4f} +/- {sd:.4f} -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model, manifest = load_checkpoint(args.checkpoint, class_path_only=True)
    seed = manifest.get("seed", cfg.seed)
    _, test = load_datasets(cfg, seed)
    spec = model.spec
    if tuple(test.input_shape) != spec.input_shape or test.class_count != spec.class_count:
        raise InputError(f"checkpoint expects {spec.input_shape} inputs with {spec.class_count} classes; "
                         f"dataset has {test.input_shape} with {test.class_count}")
    acc, loss = evaluate(model, test)
    print(f"accuracy={format_float(acc)} mean_loss={format_float(loss)} n={len(test)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# cam


def cmd_cam(args) -> int:
    cam = load_cam_config(args.config)
    _, test = load_datasets(cam.run)
    for i in cam.images:
        if not 0 <= i < len(test):
            raise InputError(f"image index {i} outside the test split of size {len(test)}")
    out_dir = os.path.join(args.out or cam.out_dir or DEFAULT_OUT, run_id(cam.run.raw, cam.run.seed))
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for d in cam.darates:
        path = cam.checkpoints[d]
        with open(path, "rb") as fh:
            tag = hashlib.sha256(fh.read() + f"|{d!r}".encode()).hexdigest()[:12]
        model, _ = load_checkpoint(path, class_path_only=True)
        if model.spec.input_shape != tuple(test.input_shape):
            raise InputError(f"checkpoint {path} expects {model.spec.input_shape} inputs, data is {test.input_shape}")
        for j, i in enumerate(cam.images):
            target = cam.classes[j] if cam.classes is not None else int(test.labels[i])
            heat = grad_cam(model, test.images[i], target)
            name = f"cam_{tag}_{i}.ppm"
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(heatmap_to_ppm(heat, test.images[i], cam.alpha))
            mass = box_mass_fraction(heat, cam.box) if cam.box is not None else float("nan")
            rows.append((format_float(d), i, target, format_float(mass), name))
    with open(os.path.join(out_dir, "cam_index.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("darate", "image", "class", "box_mass", "file"))
        w.writerows(rows)
    print(f"wrote {len(rows)} overlays to {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from adlda.gradcheck import run_layer_suite, run_op_suite
    from adlda.oracles import run_oracles

    failed = []
    for r in run_op_suite(points=args.points) + run_layer_suite():
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:32s} worst_rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e} {status}")
        if not r.passed:
            failed.append(r.name)
    for name, res in run_oracles():
        status = "PASS" if res.passed else "FAIL"
        print(f"{'oracle: ' + name:32s} max_abs_err={res.max_abs_error:.3e} tol={res.tolerance:.0e} {status}")
        if not res.passed:
            failed.append(name)
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print("gradcheck passed")
    return EXIT_OK


# --------------------------------------------------------------------------
# synth-demo

CONDITIONS = ("a_clean", "b_augmented", "c_adlda")


def demo_run(raw: bytes, seed: int) -> List[tuple]:
    """Clean-test loss and accuracy of the three conditions for one seed."""
    cfg = parse_config(raw)
    train, test = load_datasets(cfg, seed)
    spec = cfg.model_spec(train.input_shape, train.class_count)
    families = cfg.augment.families
    clean = [1.0] + [0.0] * (len(families) - 1)
    augmented = cfg.augment.resolved_probabilities()
    rows = []
    for cond, probs, lam in ((CONDITIONS[0], clean, 0.0), (CONDITIONS[1], augmented, 0.0),
                             (CONDITIONS[2], augmented, cfg.demo.adlda_lambda)):
        model = build_model(spec, seed)
        fit(model, train, test, families, probs, cfg.train_config(seed, lambda_max=lam))
        acc, loss = evaluate(model, test)
        rows.append((cond, seed, loss, acc))
    return rows


def _demo_job(args):
    return demo_run(*args)


def paired_stats(x: Sequence[float], y: Sequence[float]):
    """Mean and standard error of the paired difference y - x."""
    d = np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    se = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else float("nan")
    return float(d.mean()), se


def demo_summary(rows: Sequence[tuple]) -> dict:
    loss = {c: [r[2] for r in rows if r[0] == c] for c in CONDITIONS}
    ba, ba_se = paired_stats(loss[CONDITIONS[0]], loss[CONDITIONS[1]])
    cb, cb_se = paired_stats(loss[CONDITIONS[1]], loss[CONDITIONS[2]])
    return {
        "mean_loss": {c: float(np.mean(v)) for c, v in loss.items()},
        "b_minus_a": {"mean": ba, "se": ba_se},
        "c_minus_b": {"mean": cb, "se": cb_se},
        "seeds": len(loss[CONDITIONS[0]]),
    }


def run_demo(cfg: RunConfig, seeds: Sequence[int], workers: int = 1) -> List[tuple]:
    per_seed = parallel_map(_demo_job, [(cfg.raw, s) for s in seeds], workers)
    rows = [r for group in per_seed for r in group]
    return sorted(rows, key=lambda r: (CONDITIONS.index(r[0]), list(seeds).index(r[1])))


def demo_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("condition", "seed", "clean_test_loss", "clean_test_acc"))
    for cond, seed, loss, acc in rows:
        w.writerow((cond, seed, format_float(loss), format_float(acc)))
    return buf.getvalue()


def cmd_synth_demo(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config(json.dumps(DEFAULT_DEMO_CONFIG, sort_keys=True).encode())
    if cfg.dataset.name != "synthetic":
        raise ConfigError(["dataset.name: synth-demo needs the synthetic dataset"])
    if cfg.demo is None:
        raise ConfigError(["demo: required section for synth-demo"])
    seeds = parse_seeds(args.seeds) if args.seeds is not None else list(cfg.demo.seeds)
    if len(seeds) < 5:
        raise ConfigError([f"--seeds: synth-demo needs at least 5 seeds, got {len(seeds)}"])
    out_dir = os.path.join(args.out or cfg.out_dir or DEFAULT_OUT, run_id(cfg.raw, cfg.seed))
    os.makedirs(out_dir, exist_ok=True)
    rows = run_demo(cfg, seeds, worker_count())
    with open(os.path.join(out_dir, "synth_demo.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(demo_csv(rows))
    summary = demo_summary(rows)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump_json(summary))
    for c, v in summary["mean_loss"].items():
        print(f"{c:12s} mean clean-test loss {v:.5f}")
    for key in ("b_minus_a", "c_minus_b"):
        s = summary[key]
        z = s["mean"] / s["se"] if s["se"] > 0 else float("nan")
        print(f"{key:12s} paired diff {s['mean']:+.5f} (se {s['se']:.5f}, {z:+.2f} se)")
    print(f"wrote {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adlda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"adlda {adlda.__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model per seed")
    t.add_argument("--config", required=True, metavar="PATH")
    t.add_argument("--seeds", metavar="LIST", help="comma-separated replicate seeds, e.g. 1,2,3")
    t.add_argument("--out", metavar="DIR")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's test split")
    e.add_argument("--config", required=True, metavar="PATH")
    e.add_argument("--checkpoint", required=True, metavar="PATH")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cam", help="Grad-CAM overlays per image and DArate")
    c.add_argument("--config", required=True, metavar="PATH")
    c.add_argument("--out", metavar="DIR")
    c.set_defaults(func=cmd_cam)

    g = sub.add_parser("gradcheck", help="finite-difference and single-step oracle checks")
    g.add_argument("--points", type=int, default=10, help="random points per op (default 10)")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth-demo", help="clean vs augmented vs ADLDA on synthetic data")
    s.add_argument("--config", metavar="PATH", help="defaults to the built-in demo config")
    s.add_argument("--seeds", metavar="LIST")
    s.add_argument("--out", metavar="DIR")
    s.set_defaults(func=cmd_synth_demo)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
    except (InputError, CheckpointError, DatasetFormatError, ShapeError) as exc:
        _err(str(exc))
    except OSError as exc:
        _err(f"{exc.filename or ''}: {exc.strerror or exc}")
    except TrainingDivergence as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
