"""Command-line entry point: ``tinydistill <command> [flags]``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.  Every output of a run lands under ``--out-dir``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import yaml

from . import __version__
from .augment import AugmentConfig, ModelReplacementSource, augment_dataset, load_glove
from .checkpoint import CheckpointError, load_checkpoint, model_hash, save_checkpoint
from .config import TrainConfig, load_config
from .data import Example, ParseError, Vocab, load_tsv, write_tsv
from .experiments import RECIPES, ToyBudget, run_ablation
from .pipeline import (
    MetricsLog,
    TrainingDiverged,
    distill_intermediate,
    distill_prediction,
    evaluate,
    finetune,
    general_distill,
    train_mlm,
)
from .transformer import CapabilityError, ConfigError, TransformerModel, parameter_count

log = logging.getLogger("tinydistill")

COMMANDS = ("train-teacher", "general-distill", "augment", "task-distill", "evaluate", "ablate", "inspect-checkpoint")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the seed in the config")
    common.add_argument("--out-dir", type=Path, default=Path("runs"), help="directory receiving every output")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="tinydistill", description="Layer-wise transformer distillation at toy scale.")
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train-teacher", parents=[common], help="MLM pre-training or supervised fine-tuning of a teacher")
    sub.add_parser("general-distill", parents=[common], help="intermediate-layer distillation on unlabeled text")
    sub.add_parser("task-distill", parents=[common], help="one task-distillation phase (set by the config stage)")

    aug = sub.add_parser("augment", parents=[common], help="word-replacement augmentation of a TSV file")
    aug.add_argument("--in", dest="input", type=Path, required=True)
    aug.add_argument("--out", type=Path, required=True, help="output TSV, relative to --out-dir")
    aug.add_argument("--glove", type=Path, required=True)
    aug.add_argument("--teacher", type=Path, required=True, help="checkpoint with an MLM head")
    aug.add_argument("--pt", type=float, default=0.4)
    aug.add_argument("--na", type=int, default=20)
    aug.add_argument("--k", type=int, default=15)
    aug.add_argument("--include-original", action=argparse.BooleanOptionalAction, default=True)

    ev = sub.add_parser("evaluate", parents=[common], help="accuracy and Matthews correlation on a split")
    ev.add_argument("--split", choices=["train", "dev"], default="dev")
    ev.add_argument("--checkpoint", type=Path, help="defaults to checkpoints.init from the config")

    ab = sub.add_parser("ablate", parents=[common], help="toy ablation grid and TSV report")
    ab.add_argument("--recipe", required=True, choices=sorted(RECIPES))
    ab.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated student seeds")
    ab.add_argument("--tasks", default="trigger", help="comma-separated toy tasks: trigger, polarity")
    ab.add_argument("--budget", type=Path, help="YAML overriding toy budget fields")

    ins = sub.add_parser("inspect-checkpoint", parents=[common], help="print a checkpoint summary")
    ins.add_argument("path", type=Path)
    return parser


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# config handling


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_run_config(args, stages: tuple[str, ...] | None) -> tuple[TrainConfig, Path]:
    if args.config is None:
        raise UsageError(f"{args.command}: --config is required")
    if not args.config.is_file():
        raise UsageError(f"{args.command}: config file {args.config} not found")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.model is not None:
            cfg.model = cfg.model.replace(seed=args.seed)
    if stages is not None and cfg.stage not in stages:
        raise ConfigError(f"{args.command} runs stages {stages}, config says {cfg.stage!r}")
    return cfg.validate(), args.config.resolve().parent


def _need(cfg: TrainConfig, *dotted: str) -> None:
    for key in dotted:
        section, name = key.split(".")
        if getattr(getattr(cfg, section), name) is None:
            raise ConfigError(f"stage {cfg.stage} needs {key} in the config")


def _out_path(out_dir: Path, rel: Path | str) -> Path:
    p = (out_dir / rel).resolve()
    if out_dir.resolve() not in (p, *p.parents):
        raise UsageError(f"output path {rel} escapes --out-dir {out_dir}")
    return p


def _fresh_model(cfg: TrainConfig, vocab: Vocab, mlm_head: bool | None = None) -> TransformerModel:
    if cfg.model is None:
        raise ConfigError(f"stage {cfg.stage} needs a model section when no init checkpoint is given")
    changes = {"vocab_size": len(vocab), "num_classes": cfg.data.num_classes}
    if mlm_head is not None:
        changes["mlm_head"] = mlm_head
    return TransformerModel.create(cfg.model.replace(**changes).validate())


def _load(path: Path):
    ckpt = load_checkpoint(path)
    if ckpt.vocab is None:
        raise CheckpointError(f"checkpoint {path} carries no vocabulary")
    return ckpt.model, Vocab(ckpt.vocab)


def _examples(path: Path, cfg: TrainConfig, split: str) -> list[Example]:
    out = load_tsv(path, num_classes=cfg.data.num_classes, split=split)
    if not out:
        raise ParseError(f"{path}: no examples")
    return out


def _write_manifest(out_dir: Path, args, cfg_dict: dict | None, seed, started: float, extra: dict | None = None) -> None:
    record = {
        "command": args.command,
        "config": cfg_dict,
        "seed": seed,
        "version": version_string(),
        "wall_time_s": round(time.time() - started, 3),
    }
    record.update(extra or {})
    (out_dir / "run_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(args, out_dir: Path) -> dict:
    cfg, base = _load_run_config(args, ("teacher-mlm", "teacher-finetune"))
    if cfg.stage == "teacher-mlm":
        _need(cfg, "data.corpus")
    else:
        _need(cfg, "data.train")
    init = _resolve(base, cfg.checkpoints.init)

    if init is not None:
        model, vocab = _load(init)
    else:
        texts_path = _resolve(base, cfg.data.corpus if cfg.stage == "teacher-mlm" else cfg.data.train)
        vocab_path = _resolve(base, cfg.data.vocab)
        texts = load_tsv(texts_path)
        vocab = Vocab.load(vocab_path) if vocab_path else Vocab.build([e.text_a for e in texts], cfg.data.vocab_words)
        model = _fresh_model(cfg, vocab, mlm_head=True if cfg.stage == "teacher-mlm" else None)

    with MetricsLog(out_dir / "metrics.jsonl") as sink:
        if cfg.stage == "teacher-mlm":
            corpus = load_tsv(_resolve(base, cfg.data.corpus), split="corpus")
            out = train_mlm(model, corpus, vocab, cfg, sink)
        else:
            train = _examples(_resolve(base, cfg.data.train), cfg, "train")
            dev = _examples(_resolve(base, cfg.data.dev), cfg, "dev") if cfg.data.dev else None
            out = finetune(model, train, dev, vocab, cfg, sink)
    h = save_checkpoint(out, _out_path(out_dir, cfg.checkpoints.out), vocab.pieces)
    return {"config": cfg.to_dict(), "seed": cfg.seed, "checkpoint": h}


def cmd_general_distill(args, out_dir: Path) -> dict:
    cfg, base = _load_run_config(args, ("general",))
    _need(cfg, "data.corpus", "checkpoints.teacher")
    teacher, vocab = _load(_resolve(base, cfg.checkpoints.teacher))
    init = _resolve(base, cfg.checkpoints.init)
    if init is not None:
        student, svocab = _load(init)
        if svocab.pieces != vocab.pieces:
            raise ConfigError("student and teacher checkpoints use different vocabularies")
    else:
        student = _fresh_model(cfg, vocab, mlm_head=False)
        save_checkpoint(student, _out_path(out_dir, "init"), vocab.pieces)
    corpus = load_tsv(_resolve(base, cfg.data.corpus), split="corpus")
    with MetricsLog(out_dir / "metrics.jsonl") as sink:
        out = general_distill(teacher, student, corpus, vocab, cfg, sink)
    h = save_checkpoint(out, _out_path(out_dir, cfg.checkpoints.out), vocab.pieces)
    return {"config": cfg.to_dict(), "seed": cfg.seed, "checkpoint": h}


def cmd_task_distill(args, out_dir: Path) -> dict:
    cfg, base = _load_run_config(args, ("task-intermediate", "task-prediction"))
    _need(cfg, "data.train", "checkpoints.teacher", "checkpoints.init")
    teacher, vocab = _load(_resolve(base, cfg.checkpoints.teacher))
    student, svocab = _load(_resolve(base, cfg.checkpoints.init))
    if svocab.pieces != vocab.pieces:
        raise ConfigError("student and teacher checkpoints use different vocabularies")
    train = _examples(_resolve(base, cfg.data.train), cfg, "train")
    dev = _examples(_resolve(base, cfg.data.dev), cfg, "dev") if cfg.data.dev else None
    with MetricsLog(out_dir / "metrics.jsonl") as sink:
        if cfg.stage == "task-intermediate":
            out = distill_intermediate(student, teacher, train, vocab, cfg, sink)
        else:
            out = distill_prediction(student, teacher, train, dev, vocab, cfg, sink)
    h = save_checkpoint(out, _out_path(out_dir, cfg.checkpoints.out), vocab.pieces)
    return {"config": cfg.to_dict(), "seed": cfg.seed, "checkpoint": h}


def cmd_augment(args, out_dir: Path) -> dict:
    try:
        acfg = AugmentConfig(p_t=args.pt, n_a=args.na, k=args.k, seed=args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    target = _out_path(out_dir, args.out)
    model, vocab = _load(args.teacher)
    source = ModelReplacementSource(model, vocab, load_glove(args.glove))
    examples = load_tsv(args.input)
    out = augment_dataset(examples, acfg, source, include_original=args.include_original)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(target, out)
    knobs = dataclasses.asdict(acfg) | {"include_original": args.include_original, "input": str(args.input), "glove": str(args.glove)}
    knobs["teacher"] = model_hash(model, vocab.pieces)
    with MetricsLog(out_dir / "metrics.jsonl") as sink:
        sink.write({"stage": "augment", "examples_in": len(examples), "examples_out": len(out)})
    return {"config": knobs, "seed": acfg.seed}


def cmd_evaluate(args, out_dir: Path) -> dict:
    cfg, base = _load_run_config(args, None)
    path = args.checkpoint or _resolve(base, cfg.checkpoints.init)
    if path is None:
        raise ConfigError("evaluate needs --checkpoint or checkpoints.init")
    split_path = cfg.data.dev if args.split == "dev" else cfg.data.train
    if split_path is None:
        raise ConfigError(f"config has no data.{args.split} for --split {args.split}")
    model, vocab = _load(path)
    examples = _examples(_resolve(base, split_path), cfg, args.split)
    m = evaluate(model, examples, vocab, min(cfg.max_len, model.config.max_len))
    record = {"split": args.split, "n": m.n, **m.as_dict()}
    with MetricsLog(out_dir / "metrics.jsonl") as sink:
        sink.write({"stage": "evaluate", **record})
    print(json.dumps(record, sort_keys=True))
    return {"config": cfg.to_dict(), "seed": cfg.seed, "metrics": record}


def cmd_ablate(args, out_dir: Path) -> dict:
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    tasks = tuple(t for t in args.tasks.split(",") if t)
    for t in tasks:
        if t not in ("trigger", "polarity"):
            raise UsageError(f"--tasks: unknown toy task {t!r}")
    budget = ToyBudget()
    if args.budget is not None:
        raw = yaml.safe_load(args.budget.read_text(encoding="utf-8")) or {}
        names = {f.name for f in dataclasses.fields(ToyBudget)} - {"augment"}
        unknown = sorted(set(raw) - names - {"augment"})
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]} in budget file")
        aug = raw.pop("augment", None)
        budget = dataclasses.replace(budget, **raw)
        if aug is not None:
            budget = dataclasses.replace(budget, augment=AugmentConfig(**aug))
    if args.seed is not None:
        budget = dataclasses.replace(budget, data_seed=args.seed)
    report = run_ablation(args.recipe, seeds=seeds, budget=budget, task_names=tasks)
    (out_dir / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    sys.stdout.write(report.to_tsv())
    return {"config": {"recipe": args.recipe, "seeds": list(seeds), "tasks": list(tasks), "budget": dataclasses.asdict(budget)}, "seed": budget.data_seed}


def inspect_checkpoint(path) -> str:
    ckpt = load_checkpoint(path)
    model = ckpt.model
    lines = [f"checkpoint: {path}", f"hash: {ckpt.hash}"]
    lines += [f"config.{k}: {v}" for k, v in dataclasses.asdict(model.config).items()]
    lines.append(f"parameters: {parameter_count(model.config)}")
    lines += [f"lineage.{k}: {v}" for k, v in sorted(model.lineage.items())]
    for k in ("dev_accuracy", "dev_mcc", "dev_loss"):
        if k in model.meta:
            lines.append(f"{k}: {model.meta[k]}")
    lines.append(f"vocab: {len(ckpt.vocab) if ckpt.vocab is not None else 'none'}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args, out_dir: Path) -> dict | None:
    sys.stdout.write(inspect_checkpoint(args.path))
    return None


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "general-distill": cmd_general_distill,
    "task-distill": cmd_task_distill,
    "augment": cmd_augment,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out_dir
    try:
        if args.command != "inspect-checkpoint":
            out_dir.mkdir(parents=True, exist_ok=True)
        info = HANDLERS[args.command](args, out_dir)
        if info is not None:
            _write_manifest(out_dir, args, info.pop("config"), info.pop("seed"), started, info)
        return 0
    except (UsageError, ConfigError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDiverged, ParseError, CapabilityError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
