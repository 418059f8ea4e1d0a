"""Toy-scale ablation recipes over procedures, objectives and layer mappings.

One shared setup (vocabulary, teachers, augmented data) serves every variant
and seed; each variant then runs its own student chain and reports dev
accuracy.  Runs are independent and may execute in worker processes.
"""

from __future__ import annotations

import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import corpora
from .augment import AugmentConfig, EmbeddingStore, ModelReplacementSource, augment_dataset
from .config import TrainConfig
from .data import Example, Vocab
from .pipeline import distill_intermediate, distill_prediction, evaluate, finetune, general_distill, train_mlm
from .transformer import TransformerConfig, TransformerModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyBudget:
    """Every size and step count used by the toy experiments."""

    n_train: int = 500
    n_dev: int = 400
    n_corpus: int = 4000
    max_words: int = 40
    max_len: int = 24
    teacher_layers: int = 4
    teacher_hidden: int = 32
    student_layers: int = 2
    student_hidden: int = 16
    heads: int = 2
    teacher_mlm_steps: int = 5000
    teacher_ft_epochs: int = 30
    gd_steps: int = 300
    td1_steps: int = 500
    td2_steps: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(p_t=0.4, n_a=8, k=5, seed=0))
    data_seed: int = 0

    def teacher_config(self, vocab_size: int) -> TransformerConfig:
        h = self.teacher_hidden
        return TransformerConfig(self.teacher_layers, h, 2 * h, self.heads, vocab_size, self.max_len, 2, 0.0, 0, True)

    def student_config(self, vocab_size: int, seed: int) -> TransformerConfig:
        h = self.student_hidden
        return TransformerConfig(self.student_layers, h, 2 * h, self.heads, vocab_size, self.max_len, 2, 0.0, seed, False)

    def train(self, stage: str, seed: int, steps: int | None, **kw) -> TrainConfig:
        base = dict(
            stage=stage,
            epochs=10_000 if steps is not None else self.teacher_ft_epochs,
            max_steps=steps,
            batch_size=self.batch_size,
            learning_rate=self.lr,
            max_len=self.max_len,
            seed=seed,
        )
        base.update(kw)
        return TrainConfig(**base).validate()


@dataclass
class Task:
    name: str
    train: list[Example]
    dev: list[Example]
    augmented: list[Example] | None = None
    teacher: TransformerModel | None = None


@dataclass
class Setup:
    budget: ToyBudget
    vocab: Vocab
    corpus: list[Example]
    mlm_teacher: TransformerModel
    tasks: list[Task]


def _epochs_for(steps: int, n: int, batch_size: int) -> int:
    return max(1, -(-steps * batch_size // max(n, 1)))


def prepare(budget: ToyBudget = ToyBudget(), task_names: Sequence[str] = ("trigger",)) -> Setup:
    """Build the vocabulary, the two teachers per task and the augmented train sets."""
    lex = corpora.make_lexicon()
    corpus = corpora.general_corpus(lex, budget.n_corpus, budget.data_seed)
    tasks = []
    for name in task_names:
        if name == "trigger":
            train = corpora.trigger_examples(lex, budget.n_train, budget.data_seed, "train")
            dev = corpora.trigger_examples(lex, budget.n_dev, budget.data_seed + 10_000, "dev")
        elif name == "polarity":
            train = corpora.polarity_examples(budget.n_train, budget.data_seed, "train")
            dev = corpora.polarity_examples(budget.n_dev, budget.data_seed + 10_000, "dev")
        else:
            raise ValueError(f"unknown toy task {name!r}; choose trigger or polarity")
        tasks.append(Task(name, train, dev))
    texts = [e.text_a for e in corpus] + [e.text_a for t in tasks for e in t.train]
    vocab = Vocab.build(texts, budget.max_words)

    base = TransformerModel.create(budget.teacher_config(len(vocab)))
    mlm_teacher = train_mlm(base, corpus, vocab, budget.train("teacher-mlm", 0, budget.teacher_mlm_steps))

    words, vectors = corpora.toy_embeddings(lex)
    if "polarity" in task_names:
        extra = sorted({w for t in tasks for e in t.train for w in e.text_a.split()} - set(words))
        rng = np.random.default_rng(99)
        words = words + extra
        vectors = np.vstack([vectors, rng.normal(size=(len(extra), vectors.shape[1]))])
    source = ModelReplacementSource(mlm_teacher, vocab, EmbeddingStore(words, vectors))
    for t in tasks:
        t.teacher = finetune(mlm_teacher, t.train, t.dev, vocab, budget.train("teacher-finetune", 0, None))
        t.augmented = augment_dataset(t.train, budget.augment, source)
        log.info("task %s: teacher dev accuracy %.3f, %d augmented examples", t.name, t.teacher.meta.get("dev_accuracy", float("nan")), len(t.augmented))
    return Setup(budget, vocab, corpus, mlm_teacher, tasks)


# ---------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class Variant:
    name: str
    general: bool = True
    gd_objectives: tuple[str, ...] = ("embd", "attn", "hidn")
    task_distill: bool = True
    td1_objectives: tuple[str, ...] | None = ("embd", "attn", "hidn")
    td2: str = "soft"  # soft | hard
    td2_with_embd: bool = False
    augmented: bool = True
    mapping: str = "uniform"
    scratch: bool = False


RECIPES: dict[str, tuple[Variant, ...]] = {
    "procedures": (
        Variant("full"),
        Variant("w/o GD", general=False),
        Variant("w/o TD", task_distill=False),
        Variant("w/o DA", augmented=False),
        Variant("scratch", general=False, task_distill=False, augmented=False, scratch=True),
    ),
    "objectives": (
        Variant("full"),
        Variant("w/o Embd", td1_objectives=("attn", "hidn")),
        Variant("w/o Pred", td2="hard"),
        Variant("w/o Trm", gd_objectives=("embd",), td1_objectives=None, td2_with_embd=True),
        Variant("w/o Attn", td1_objectives=("embd", "hidn")),
        Variant("w/o Hidn", td1_objectives=("embd", "attn")),
    ),
    "mapping": (
        Variant("uniform", mapping="uniform"),
        Variant("top", mapping="top"),
        Variant("bottom", mapping="bottom"),
    ),
}


def _gd_key(v: Variant):
    return (v.general, v.gd_objectives, v.mapping)


def run_variant(setup: Setup, task: Task, variant: Variant, seed: int, general_cache: dict | None = None) -> float:
    """Dev accuracy of one student chain."""
    b = setup.budget
    vocab = setup.vocab
    student = TransformerModel.create(b.student_config(len(vocab), seed))
    train = task.augmented if variant.augmented else task.train

    if variant.scratch:
        steps = b.td1_steps + b.td2_steps
        cfg = b.train("task-prediction", seed, steps, epochs=_epochs_for(steps, len(task.train), b.batch_size))
        return finetune(student, task.train, task.dev, vocab, cfg, stage="task-prediction").meta["dev_accuracy"]

    if variant.general:
        key = _gd_key(variant) + (seed,)
        if general_cache is not None and key in general_cache:
            student = general_cache[key]
        else:
            cfg = b.train("general", seed, b.gd_steps, mapping=variant.mapping, objectives=list(variant.gd_objectives))
            student = general_distill(setup.mlm_teacher, student, setup.corpus, vocab, cfg)
            if general_cache is not None:
                general_cache[key] = student

    if not variant.task_distill:
        steps = b.td1_steps + b.td2_steps
        cfg = b.train("task-prediction", seed, steps)
        return finetune(student, train, task.dev, vocab, cfg, stage="task-prediction").meta["dev_accuracy"]

    if variant.td1_objectives is not None:
        cfg1 = b.train("task-intermediate", seed, b.td1_steps, mapping=variant.mapping, objectives=list(variant.td1_objectives))
        mid = distill_intermediate(student, task.teacher, train, vocab, cfg1)
    else:
        # the intermediate phase is dropped outright; phase 2 keeps its own budget
        mid = student.clone()
        mid.lineage = {**mid.lineage, "stage": "task-intermediate"}
    objectives = ["pred"] + (["embd"] if variant.td2_with_embd else [])
    cfg2 = b.train(
        "task-prediction",
        seed,
        b.td2_steps,
        mapping=variant.mapping,
        objectives=objectives,
        hard_labels=variant.td2 == "hard",
    )
    final = distill_prediction(mid, task.teacher, train, task.dev, vocab, cfg2)
    return final.meta["dev_accuracy"]


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    recipe: str
    seeds: tuple[int, ...]
    tasks: tuple[str, ...]
    variants: tuple[str, ...]
    scores: dict[tuple[str, str], list[float]]  # (variant, task) -> per-seed accuracy

    def mean(self, variant: str, task: str | None = None) -> float:
        tasks = [task] if task else self.tasks
        return float(np.mean([np.mean(self.scores[(variant, t)]) for t in tasks]))

    def to_tsv(self) -> str:
        buf = io.StringIO()
        head = ["variant"] + [f"{t}.mean" for t in self.tasks] + ["avg"]
        head += [f"{t}.seed{s}" for t in self.tasks for s in self.seeds]
        buf.write("\t".join(head) + "\n")
        for v in self.variants:
            row = [v] + [f"{self.mean(v, t):.4f}" for t in self.tasks] + [f"{self.mean(v):.4f}"]
            row += [f"{x:.4f}" for t in self.tasks for x in self.scores[(v, t)]]
            buf.write("\t".join(row) + "\n")
        return buf.getvalue()


_WORKER_SETUP: Setup | None = None


def _init_worker(setup: Setup) -> None:
    global _WORKER_SETUP
    _WORKER_SETUP = setup


def _run_seed(args) -> list[tuple[str, str, float]]:
    recipe, seed = args
    setup = _WORKER_SETUP
    cache: dict = {}
    return [(v.name, t.name, run_variant(setup, t, v, seed, cache)) for t in setup.tasks for v in RECIPES[recipe]]


def thread_cap() -> int:
    raw = os.environ.get("DISTILL_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DISTILL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_ablation(
    recipe: str,
    setup: Setup | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    budget: ToyBudget = ToyBudget(),
    task_names: Sequence[str] = ("trigger",),
    threads: int | None = None,
) -> Report:
    """Run a recipe's grid over seeds; results are gathered in a fixed order."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    setup = setup or prepare(budget, task_names)
    threads = min(thread_cap() if threads is None else threads, len(seeds))
    jobs = [(recipe, s) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(setup,)) as pool:
            results = list(pool.map(_run_seed, jobs))
    else:
        _init_worker(setup)
        results = [_run_seed(j) for j in jobs]
    scores: dict[tuple[str, str], list[float]] = {}
    for per_seed in results:
        for v, t, acc in per_seed:
            scores.setdefault((v, t), []).append(acc)
    return Report(
        recipe,
        tuple(seeds),
        tuple(t.name for t in setup.tasks),
        tuple(v.name for v in RECIPES[recipe]),
        scores,
    )


def with_budget(budget: ToyBudget, **changes) -> ToyBudget:
    return replace(budget, **changes)


# ---------------------------------------------------------------------------
# the end-to-end CLI chain


@dataclass(frozen=True)
class PipelineSteps:
    """Step counts for the CLI chain; the defaults finish in well under a minute."""

    mlm: int = 60
    finetune_epochs: int = 2
    general: int = 30
    intermediate: int = 30
    prediction: int = 20
    n_a: int = 2
    n_train: int = 64
    n_dev: int = 64
    n_corpus: int = 256


def write_pipeline(work_dir, seed: int = 0, steps: PipelineSteps = PipelineSteps()) -> list[list[str]]:
    """Write toy data and one config per stage; return the CLI argv of each stage in order."""
    import yaml
    from pathlib import Path

    work = Path(work_dir)
    data = corpora.write_toy_task(work / "data", steps.n_train, steps.n_dev, steps.n_corpus, seed=0)
    runs = work / "runs"
    teacher_model = {"num_layers": 2, "hidden": 16, "ffn": 32, "heads": 2, "max_len": 24, "mlm_head": True}
    student_model = {"num_layers": 1, "hidden": 8, "ffn": 16, "heads": 2, "max_len": 24}
    common = {"batch_size": 16, "learning_rate": 3e-3, "max_len": 24, "seed": seed}
    configs = {
        "teacher-mlm": {
            **common, "stage": "teacher-mlm", "max_steps": steps.mlm, "epochs": 1000, "model": teacher_model,
            "data": {"corpus": str(data["corpus"])}, "checkpoints": {"out": "model"},
        },
        "teacher-finetune": {
            **common, "stage": "teacher-finetune", "epochs": steps.finetune_epochs,
            "data": {"train": str(data["train"]), "dev": str(data["dev"])},
            "checkpoints": {"init": str(runs / "teacher-mlm" / "model")},
        },
        "general": {
            **common, "stage": "general", "max_steps": steps.general, "epochs": 1000, "model": student_model,
            "data": {"corpus": str(data["corpus"])},
            "checkpoints": {"teacher": str(runs / "teacher-mlm" / "model")},
        },
        "task-intermediate": {
            **common, "stage": "task-intermediate", "max_steps": steps.intermediate, "epochs": 1000,
            "data": {"train": str(runs / "augment" / "train_aug.tsv"), "dev": str(data["dev"])},
            "checkpoints": {"teacher": str(runs / "teacher-finetune" / "model"), "init": str(runs / "general" / "model")},
        },
        "task-prediction": {
            **common, "stage": "task-prediction", "max_steps": steps.prediction, "epochs": 1000,
            "data": {"train": str(runs / "augment" / "train_aug.tsv"), "dev": str(data["dev"])},
            "checkpoints": {
                "teacher": str(runs / "teacher-finetune" / "model"),
                "init": str(runs / "task-intermediate" / "model"),
            },
        },
        "evaluate": {
            **common, "stage": "task-prediction",
            "data": {"dev": str(data["dev"])},
            "checkpoints": {"init": str(runs / "task-prediction" / "model")},
        },
    }
    cfg_dir = work / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    for name, cfg in configs.items():
        (cfg_dir / f"{name}.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")

    def run(cmd, name, *extra):
        return [cmd, "--config", str(cfg_dir / f"{name}.yaml"), "--out-dir", str(runs / name), *extra]

    return [
        run("train-teacher", "teacher-mlm"),
        run("train-teacher", "teacher-finetune"),
        run("general-distill", "general"),
        [
            "augment", "--in", str(data["train"]), "--out", "train_aug.tsv", "--glove", str(data["glove"]),
            "--teacher", str(runs / "teacher-mlm" / "model"), "--na", str(steps.n_a), "--k", "5",
            "--seed", str(seed), "--out-dir", str(runs / "augment"),
        ],
        run("task-distill", "task-intermediate"),
        run("task-distill", "task-prediction"),
        run("evaluate", "evaluate", "--split", "dev"),
    ]
