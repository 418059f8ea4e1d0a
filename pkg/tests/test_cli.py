import json

import pytest
import yaml

from tinydistill import corpora
from tinydistill.checkpoint import load_checkpoint, save_checkpoint
from tinydistill.cli import build_parser, main
from tinydistill.data import Vocab
from tinydistill.experiments import write_pipeline
from tinydistill.transformer import TransformerConfig, TransformerModel, parameter_count


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    cmds = write_pipeline(work, seed=0)
    codes = [main(c) for c in cmds]
    return work, cmds, codes


def test_full_pipeline_completes(pipeline):
    work, cmds, codes = pipeline
    assert codes == [0] * len(cmds)
    record = json.loads((work / "runs" / "evaluate" / "metrics.jsonl").read_text())
    assert record["split"] == "dev" and 0.0 <= record["accuracy"] <= 1.0


def test_run_manifest_is_complete(pipeline):
    work, _, _ = pipeline
    m = json.loads((work / "runs" / "general" / "run_manifest.json").read_text())
    assert {"command", "config", "seed", "version", "wall_time_s", "checkpoint"} <= set(m)
    assert m["config"]["stage"] == "general" and m["seed"] == 0


def test_outputs_stay_under_out_dir(pipeline):
    work, _, _ = pipeline
    top = {p.name for p in work.iterdir()}
    assert top == {"data", "configs", "runs"}


def test_inspect_fresh_init(pipeline, capsys):
    work, _, _ = pipeline
    path = work / "runs" / "general" / "init"
    assert main(["inspect-checkpoint", str(path)]) == 0
    out = capsys.readouterr().out
    assert "lineage.parent: root" in out
    cfg = load_checkpoint(path).model.config
    assert f"parameters: {parameter_count(cfg)}" in out


def test_inspect_reports_dev_metric(pipeline, capsys):
    work, _, _ = pipeline
    assert main(["inspect-checkpoint", str(work / "runs" / "teacher-finetune" / "model")]) == 0
    assert "dev_accuracy:" in capsys.readouterr().out


def test_tampered_blob_fails_checksum(tmp_path, capsys):
    model = TransformerModel.create(TransformerConfig())
    save_checkpoint(model, tmp_path / "ck")
    blob = tmp_path / "ck" / "weights.bin"
    raw = bytearray(blob.read_bytes())
    raw[17] ^= 0x01
    blob.write_bytes(bytes(raw))
    assert main(["inspect-checkpoint", str(tmp_path / "ck")]) == 1
    assert "checksum" in capsys.readouterr().err


def test_corrupt_manifest_reports_offset(tmp_path, capsys):
    save_checkpoint(TransformerModel.create(TransformerConfig()), tmp_path / "ck")
    m = tmp_path / "ck" / "manifest.txt"
    m.write_bytes(m.read_bytes().replace(b"config.hidden = 16", b"config.hidden 16", 1))
    assert main(["inspect-checkpoint", str(tmp_path / "ck")]) == 1
    assert "byte offset" in capsys.readouterr().err


def test_evaluate_parses():
    args = build_parser().parse_args(["evaluate", "--config", "c", "--split", "dev"])
    assert args.command == "evaluate" and args.split == "dev" and str(args.config) == "c"


@pytest.mark.parametrize(
    "argv",
    [
        ["frobnicate"],
        ["evaluate", "--bogus-flag"],
        ["augment", "--in", "x.tsv"],
        ["ablate", "--recipe", "nonsense"],
        [],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert "error" in err


def test_unknown_flag_is_named(capsys):
    assert main(["evaluate", "--bogus-flag"]) == 2
    assert "--bogus-flag" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("stage: general\nepochz: 3\n")
    assert main(["general-distill", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2
    assert "epochz" in capsys.readouterr().err
    assert main(["general-distill", "--out-dir", str(tmp_path / "o")]) == 2
    cfg.write_text("stage: teacher-mlm\n")
    assert main(["general-distill", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 2


def test_evaluate_missing_checkpoint_exits_1(tmp_path):
    data = corpora.write_toy_task(tmp_path / "d", 8, 8, 8)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"stage": "task-prediction", "data": {"dev": str(data["dev"])}, "checkpoints": {"init": "nowhere"}}))
    assert main(["evaluate", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1


def test_seed_flag_beats_config(tmp_path):
    data = corpora.write_toy_task(tmp_path / "d", 16, 8, 16)
    raw = {
        "stage": "teacher-mlm",
        "seed": 3,
        "max_steps": 2,
        "batch_size": 8,
        "max_len": 24,
        "model": {"num_layers": 1, "hidden": 8, "ffn": 16, "heads": 2, "max_len": 24, "seed": 3},
        "data": {"corpus": str(data["corpus"])},
    }
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    assert main(["train-teacher", "--config", str(cfg), "--seed", "7", "--out-dir", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["seed"] == 7 and manifest["config"]["model"]["seed"] == 7
    assert main(["train-teacher", "--config", str(cfg), "--out-dir", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "run_manifest.json").read_text())["seed"] == 3


def test_prediction_phase_refuses_wrong_lineage(pipeline, tmp_path, capsys):
    work, _, _ = pipeline
    cfg = yaml.safe_load((work / "configs" / "task-prediction.yaml").read_text())
    cfg["checkpoints"]["init"] = str(work / "runs" / "general" / "model")
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert main(["task-distill", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 1
    assert "task-intermediate" in capsys.readouterr().err


def test_augment_output_must_stay_inside_out_dir(pipeline, tmp_path):
    work, cmds, _ = pipeline
    argv = list(cmds[3])
    argv[argv.index("--out") + 1] = "../escape.tsv"
    argv[argv.index("--out-dir") + 1] = str(tmp_path / "aug")
    assert main(argv) == 2
    assert not (tmp_path / "escape.tsv").exists()


def test_augment_counts(pipeline):
    work, _, _ = pipeline
    rows = (work / "runs" / "augment" / "train_aug.tsv").read_text().splitlines()
    src = (work / "data" / "train.tsv").read_text().splitlines()
    assert len(rows) - 1 == (len(src) - 1) * 3  # originals plus two variants each


def test_vocab_travels_with_checkpoints(pipeline):
    work, _, _ = pipeline
    a = load_checkpoint(work / "runs" / "teacher-mlm" / "model").vocab
    b = load_checkpoint(work / "runs" / "task-prediction" / "model").vocab
    assert a == b and Vocab(a).pieces[:4] == ["[PAD]", "[MASK]", "[CLS]", "[SEP]"]
