import hashlib
import json
import time

import pytest

from occaware import cli
from occaware.data_model import load_dataset
from occaware.errors import FrozenContractViolation
from occaware.evaluation import EvalProtocol, sliced_eval
from occaware.model import load_model


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny dataset, detector and aware backbone built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--subjects", "6", "--test-subjects", "3",
                     "--seqs", "2", "--frames", "12", "--seed", "7"]) == 0
    assert cli.main(["train-detector", "--data", str(root / "data"), "--out", str(root / "det.ckpt"),
                     "--epochs", "1", "--eval-draws", "1"]) == 0
    assert cli.main(["train-backbone", "--data", str(root / "data"), "--out", str(root / "aware.ckpt"),
                     "--variant", "deferred-concat", "--detector", str(root / "det.ckpt"), "--preset", "compact",
                     "--beta-scale", "auto",
                     "--steps", "3", "--batch-subjects", "2", "--clips-per-subject", "2",
                     "--frames-per-clip", "6", "--val-fraction", "0", "--eval-every", "0"]) == 0
    return root


def test_gen_data_rerun_hash_equality(tmp_path):
    args = ["--subjects", "3", "--seqs", "2", "--frames", "8", "--seed", "7"]
    assert cli.main(["gen-data", "--out", str(tmp_path / "a"), *args]) == 0
    assert cli.main(["gen-data", "--out", str(tmp_path / "b"), *args]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "config.json").read_text())["subjects"] == 3


def test_gen_data_minimal_is_fast(tmp_path):
    start = time.perf_counter()
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--subjects", "1", "--seqs", "1",
                     "--frames", "20"]) == 0
    assert time.perf_counter() - start < 5.0


def test_config_errors(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "missing" / "d")]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--subjects", "0"]) == 2
    assert cli.main(["train-backbone", "--data", str(tmp_path), "--out", str(tmp_path / "x"),
                     "--occlusion-classes", "9"]) == 2
    assert cli.main(["no-such-command"]) == 2


def test_refuses_to_clobber_without_overwrite(tmp_path):
    args = ["gen-data", "--out", str(tmp_path / "d"), "--subjects", "1", "--seqs", "1", "--frames", "4"]
    assert cli.main(args) == 0
    before = tree_hash(tmp_path / "d")
    assert cli.main(args) == 2
    assert cli.main([*args, "--overwrite"]) == 0
    assert tree_hash(tmp_path / "d") == before


def test_config_file_with_cli_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"subjects": 2, "seqs": 1, "frames": 4}))
    assert cli.main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d"),
                     "--subjects", "3"]) == 0
    resolved = json.loads((tmp_path / "d" / "config.json").read_text())
    assert resolved["subjects"] == 3 and resolved["frames"] == 4
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    assert cli.main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "e")]) == 2


def test_missing_dataset_is_data_error(tmp_path):
    assert cli.main(["train-detector", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "d")]) == 4


def test_aware_without_detector_is_config_error(pipeline, tmp_path):
    assert cli.main(["train-backbone", "--data", str(pipeline / "data"), "--out", str(tmp_path / "m"),
                     "--variant", "deferred-concat"]) == 2


def test_frozen_contract_exit_code(pipeline, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FrozenContractViolation("checksum changed")

    monkeypatch.setattr(cli, "train_occluded", boom)
    assert cli.main(["train-backbone", "--data", str(pipeline / "data"), "--out", str(tmp_path / "m"),
                     "--steps", "1"]) == 3


def test_backbone_rerun_identical_metrics(pipeline, tmp_path):
    args = ["train-backbone", "--data", str(pipeline / "data"), "--variant", "none", "--occlusion-classes", "0",
            "--preset", "compact", "--steps", "3", "--batch-subjects", "2", "--clips-per-subject", "2",
            "--frames-per-clip", "6", "--val-fraction", "0"]
    assert cli.main([*args, "--out", str(tmp_path / "a.ckpt")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b.ckpt")]) == 0
    a = (tmp_path / "a.ckpt.metrics.ndjson").read_bytes()
    assert a == (tmp_path / "b.ckpt.metrics.ndjson").read_bytes() and len(a.splitlines()) == 3
    model, sidecar = load_model(tmp_path / "a.ckpt")
    assert model.variant == "none" and sidecar["train_config"]["occlusion_classes"] == [0]
    _, aware = load_model(pipeline / "aware.ckpt", cli._load_detector(pipeline / "det.ckpt"))
    assert aware["beta_scale"] != 1.0


def test_evaluate_standard_and_replay(pipeline, tmp_path):
    common = ["evaluate", "--data", str(pipeline / "data"), "--checkpoint", str(pipeline / "aware.ckpt"),
              "--detector", str(pipeline / "det.ckpt"), "--runs", "2"]
    assert cli.main([*common, "--out", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(report["per_run"]["all"]["1"]) == 2 and (tmp_path / "a" / "report.csv").exists()
    assert cli.main([*common, "--out", str(tmp_path / "b"), "--seed", "99",
                     "--replay", str(tmp_path / "a" / "manifests")]) == 0
    replayed = json.loads((tmp_path / "b" / "report.json").read_text())
    assert replayed["per_run"] == report["per_run"]
    assert cli.main([*common, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "c" / "report.json").read_bytes()


def test_evaluate_untrained_single_run(pipeline, tmp_path):
    assert cli.main(["train-backbone", "--data", str(pipeline / "data"), "--out", str(tmp_path / "u.ckpt"),
                     "--preset", "compact", "--steps", "0"]) == 0
    assert cli.main(["evaluate", "--data", str(pipeline / "data"), "--checkpoint", str(tmp_path / "u.ckpt"),
                     "--out", str(tmp_path / "e"), "--runs", "1", "--classes", "0"]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert 0.0 <= report["mean"]["all"]["1"] <= 1.0
    assert all(v == 0.0 for v in report["std"]["all"].values())


def test_evaluate_aware_needs_detector(pipeline, tmp_path):
    assert cli.main(["evaluate", "--data", str(pipeline / "data"), "--checkpoint", str(pipeline / "aware.ckpt"),
                     "--out", str(tmp_path / "e"), "--runs", "1"]) == 2


def test_evaluate_sliced_matches_module(pipeline, tmp_path):
    assert cli.main(["evaluate", "--data", str(pipeline / "data"), "--checkpoint", str(pipeline / "aware.ckpt"),
                     "--detector", str(pipeline / "det.ckpt"), "--runs", "2", "--mode", "sliced",
                     "--out", str(tmp_path / "s")]) == 0
    rows = json.loads((tmp_path / "s" / "report.json").read_text())["rows"]
    assert len(rows) == 3
    assert len((tmp_path / "s" / "report.csv").read_text().splitlines()) == 4
    detector = cli._load_detector(pipeline / "det.ckpt")
    model, _ = load_model(pipeline / "aware.ckpt", detector)
    dataset = load_dataset(pipeline / "data")
    direct = sliced_eval(model, detector, dataset, EvalProtocol.from_dataset(dataset, num_runs=2))
    assert [r["report"]["per_run"] for r in rows] == [r["report"].per_run for r in direct]


def test_evaluate_cross_and_dynamic(pipeline, tmp_path):
    common = ["evaluate", "--data", str(pipeline / "data"), "--checkpoint", str(pipeline / "aware.ckpt"),
              "--detector", str(pipeline / "det.ckpt"), "--runs", "1"]
    assert cli.main([*common, "--mode", "cross", "--out", str(tmp_path / "x")]) == 0
    rows = json.loads((tmp_path / "x" / "report.json").read_text())["rows"]
    assert [r["probe_classes"] for r in rows] == [[5, 6], [7, 8]]
    assert cli.main([*common, "--mode", "dynamic", "--probe-only", "--out", str(tmp_path / "d")]) == 0
