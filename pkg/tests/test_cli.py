import csv
import json
from pathlib import Path

import pytest

from adlda import cli
from adlda.config import run_id
from adlda.model import strip_domain_head

TINY = {
    "version": 1,
    "seed": 3,
    "dataset": {"name": "synthetic", "synthetic": {"image_shape": [1, 8, 8], "n_train": 128, "n_test": 64}},
    "model": {"extractor": "conv", "conv_filters": [4, 8], "domain_hidden": [16]},
    "train": {"epochs": 1, "eta": 0.01, "batch_size": 32, "lambda_max": 0.1},
}


def write_config(tmp_path, obj, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return path


def with_train(**changes):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"].update(changes)
    return cfg


@pytest.fixture
def trained(tmp_path):
    """One finished tiny run: (config path, run dir, stdout)."""
    cfg = write_config(tmp_path, TINY)
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out / run_id(cfg.read_bytes(), 3)


def test_train_writes_run_directory(trained):
    _, run_dir = trained
    assert sorted(p.name for p in run_dir.iterdir()) == ["checkpoint.adlda", "manifest.json", "metrics.csv"]
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["runid"] == run_dir.name and manifest["seed"] == 3
    assert set(manifest) >= {"config", "config_sha256", "code_version", "started", "finished", "metrics", "timing"}
    assert len(manifest["timing"]["epoch_wall_ms"]) == 1


def test_rerun_is_byte_identical(tmp_path, trained):
    cfg, run_dir = trained
    first = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    metrics_before = json.loads(first["manifest.json"])["metrics"]
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    second = tmp_path / "again" / run_dir.name
    assert (second / "metrics.csv").read_bytes() == first["metrics.csv"]
    assert (second / "checkpoint.adlda").read_bytes() == first["checkpoint.adlda"]
    assert json.loads((second / "manifest.json").read_text())["metrics"] == metrics_before


def test_eval_matches_training_metrics(capsys, trained):
    cfg, run_dir = trained
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(run_dir / "checkpoint.adlda")]) == 0
    line = capsys.readouterr().out.strip()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    final_row = (run_dir / "metrics.csv").read_text().splitlines()[-1].split(",")
    fields = dict(kv.split("=") for kv in line.split())
    assert fields["accuracy"] == manifest["metrics"]["test_acc"] == final_row[3]
    assert fields["mean_loss"] == manifest["metrics"]["test_loss"]
    assert fields["n"] == "64"


def test_eval_stripped_checkpoint_identical(capsys, tmp_path, trained):
    cfg, run_dir = trained
    strip_domain_head(run_dir / "checkpoint.adlda", tmp_path / "stripped.adlda")
    outs = []
    for ckpt in (run_dir / "checkpoint.adlda", tmp_path / "stripped.adlda"):
        capsys.readouterr()
        assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_eval_truncated_checkpoint(capsys, tmp_path, trained):
    cfg, run_dir = trained
    raw = (run_dir / "checkpoint.adlda").read_bytes()
    (tmp_path / "t.adlda").write_bytes(raw[: len(raw) // 2])
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "t.adlda")]) == 2
    assert "t.adlda" in capsys.readouterr().err


def test_eval_architecture_mismatch(tmp_path, trained):
    _, run_dir = trained
    other = json.loads(json.dumps(TINY))
    other["dataset"]["synthetic"]["image_shape"] = [1, 16, 16]
    cfg = write_config(tmp_path, other, "other.json")
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(run_dir / "checkpoint.adlda")]) == 2


def test_negative_lambda_rejected(capsys, tmp_path):
    cfg = write_config(tmp_path, with_train(lambda_max=-1))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "train.lambda_max" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize(
    "mutate,needle",
    [
        (lambda c: c.update(colour="red"), "colour"),
        (lambda c: c["train"].update(epochs="ten"), "train.epochs"),
        (lambda c: c.pop("seed"), "seed"),
        (lambda c: c["dataset"].update(name="imagenet"), "dataset.name"),
        (lambda c: c["dataset"].update(name="cifar10", path="/nonexistent"), "dataset.path"),
    ],
)
def test_invalid_configs(capsys, tmp_path, mutate, needle):
    obj = json.loads(json.dumps(TINY))
    mutate(obj)
    cfg = write_config(tmp_path, obj)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


def test_malformed_json_and_missing_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    assert cli.main(["no-such-command"]) == 2


def test_seeds_summary(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    cfg = write_config(tmp_path, TINY)
    out = tmp_path / "runs"
    assert cli.main(["train", "--config", str(cfg), "--seeds", "1,2,3", "--out", str(out)]) == 0
    summary = out / f"summary_{run_id(cfg.read_bytes(), -1)}.csv"
    rows = list(csv.reader(summary.open()))
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "mean", "std"]
    assert rows[4][1] == "n=3"
    accs = [float(r[2]) for r in rows[1:4]]
    assert float(rows[4][2]) == pytest.approx(sum(accs) / 3)
    # parallel results equal a sequential run of the same seed
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli.main(["train", "--config", str(cfg), "--seeds", "2", "--out", str(tmp_path / "seq")]) == 0
    rid = run_id(cfg.read_bytes(), 2)
    assert (tmp_path / "seq" / rid / "metrics.csv").read_bytes() == (out / rid / "metrics.csv").read_bytes()


@pytest.mark.parametrize("seeds", ["1,1", "a,b", ""])
def test_bad_seed_lists(tmp_path, seeds):
    cfg = write_config(tmp_path, TINY)
    assert cli.main(["train", "--config", str(cfg), "--seeds", seeds, "--out", str(tmp_path / "o")]) == 2


def test_invalid_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    cfg = write_config(tmp_path, TINY)
    assert cli.main(["train", "--config", str(cfg), "--seeds", "1,2", "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(capsys, tmp_path):
    cfg = write_config(tmp_path, with_train(eta=1e30, epochs=2))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "non-finite" in capsys.readouterr().err


def cam_config(tmp_path, ckpts, images, **extra):
    obj = {"version": 1, "seed": 3, "dataset": TINY["dataset"], "darates": [float(k) for k in ckpts],
           "checkpoints": {k: str(v) for k, v in ckpts.items()}, "images": images, "box": [2, 2, 4, 4]}
    obj.update(extra)
    return write_config(tmp_path, obj, "cam.json")


@pytest.fixture
def two_checkpoints(tmp_path):
    out = tmp_path / "runs"
    ckpts = {}
    for lam in ("0", "0.5"):
        cfg = write_config(tmp_path, with_train(lambda_max=float(lam)), f"lam{lam}.json")
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        ckpts[lam] = out / run_id(cfg.read_bytes(), 3) / "checkpoint.adlda"
    return ckpts


def test_cam_outputs(tmp_path, two_checkpoints):
    cfg = cam_config(tmp_path, two_checkpoints, [0, 5])
    assert cli.main(["cam", "--config", str(cfg), "--out", str(tmp_path / "cams")]) == 0
    out_dir = tmp_path / "cams" / run_id(cfg.read_bytes(), 3)
    ppms = sorted(out_dir.glob("*.ppm"))
    assert len(ppms) == 4
    assert all(p.read_bytes().startswith(b"P6\n8 8\n255\n") for p in ppms)
    index = list(csv.DictReader((out_dir / "cam_index.csv").open()))
    assert len(index) == 4 and all(0.0 <= float(r["box_mass"]) <= 1.0 for r in index)
    first = {p.name: p.read_bytes() for p in ppms}
    assert cli.main(["cam", "--config", str(cfg), "--out", str(tmp_path / "cams")]) == 0
    assert {p.name: p.read_bytes() for p in sorted(out_dir.glob("*.ppm"))} == first


def test_cam_bad_inputs(capsys, tmp_path, two_checkpoints):
    cfg = cam_config(tmp_path, two_checkpoints, [0, 500])
    assert cli.main(["cam", "--config", str(cfg), "--out", str(tmp_path / "cams")]) == 2
    assert "500" in capsys.readouterr().err
    missing = dict(two_checkpoints, **{"0.5": tmp_path / "gone.adlda"})
    cfg = cam_config(tmp_path, missing, [0])
    assert cli.main(["cam", "--config", str(cfg), "--out", str(tmp_path / "cams")]) == 2
    assert "gone.adlda" in capsys.readouterr().err


def test_gradcheck_passes_and_lists_every_op(capsys):
    from adlda.tensor import OPS

    assert cli.main(["gradcheck", "--points", "2"]) == 0
    out = capsys.readouterr().out
    for name in OPS:
        assert name in out
    assert "gradcheck passed" in out


def test_gradcheck_detects_corrupted_backward(capsys, monkeypatch):
    from adlda.tensor import OPS

    mul = OPS["mul"]
    original = mul.backward

    def wrong(self, g):
        ga, gb = original(self, g)
        return ga * 1.01, gb

    monkeypatch.setattr(mul, "backward", wrong)
    assert cli.main(["gradcheck", "--points", "2"]) == 1
    out = capsys.readouterr().out
    failed_line = [l for l in out.splitlines() if l.startswith("gradcheck FAILED:")][0]
    assert "mul[float64]" in failed_line and "mul[float32]" in failed_line


DEMO = {
    "version": 1,
    "seed": 0,
    "dataset": {"name": "synthetic", "synthetic": {"image_shape": [1, 8, 8], "n_train": 96, "n_test": 64}},
    "model": {"extractor": "conv", "conv_filters": [4, 8], "domain_hidden": [16]},
    "train": {"epochs": 1, "eta": 0.01, "batch_size": 32, "lambda_max": 0.0},
    "demo": {"seeds": [0, 1, 2, 3, 4], "adlda_lambda": 0.1},
}


def test_synth_demo_small(tmp_path):
    cfg = write_config(tmp_path, DEMO)
    assert cli.main(["synth-demo", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    out_dir = tmp_path / "d" / run_id(cfg.read_bytes(), 0)
    rows = list(csv.DictReader((out_dir / "synth_demo.csv").open()))
    assert len(rows) == 15
    assert [r["condition"] for r in rows[::5]] == ["a_clean", "b_augmented", "c_adlda"]
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["seeds"] == 5 and set(summary) >= {"b_minus_a", "c_minus_b", "mean_loss"}


def test_synth_demo_identity_only_gives_matching_conditions(tmp_path):
    obj = json.loads(json.dumps(DEMO))
    obj["augment"] = {"families": [{"kind": k} for k in ("identity", "geometric", "color", "noise", "cutout")],
                      "probabilities": [1, 0, 0, 0, 0]}
    cfg = write_config(tmp_path, obj)
    assert cli.main(["synth-demo", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    summary = json.loads((tmp_path / "d" / run_id(cfg.read_bytes(), 0) / "summary.json").read_text())
    ba = summary["b_minus_a"]
    assert abs(ba["mean"]) <= 2 * ba["se"]


def test_synth_demo_needs_five_seeds(tmp_path):
    cfg = write_config(tmp_path, DEMO)
    assert cli.main(["synth-demo", "--config", str(cfg), "--seeds", "0,1,2", "--out", str(tmp_path / "d")]) == 2


def test_default_demo_config_is_valid():
    from adlda.config import parse_config

    cfg = parse_config(json.dumps(cli.DEFAULT_DEMO_CONFIG).encode())
    assert list(cfg.demo.seeds) == list(range(20))
