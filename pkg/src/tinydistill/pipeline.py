"""Teacher preparation, general distillation and two-phase task distillation.

Every stage takes its input models by value (they are cloned), never updates
the teacher, and stamps the output's lineage with the stage name and the
checkpoint hash of the model it started from.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import LineageError, model_hash
from .config import TrainConfig
from .data import MASK, Example, Vocab, batch, encode
from .distill import DistillParams, model_loss
from .mapping import build as build_mapping
from .metrics import accuracy, matthews_corrcoef
from .optim import Adam
from .transformer import ConfigError, TransformerModel, forward, mlm_logits

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class MetricsLog:
    """Line-delimited JSON records, kept in memory and optionally written out."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _emit(sink: MetricsLog | None, record: dict) -> None:
    if sink is not None:
        sink.write(record)


@dataclass
class Metrics:
    accuracy: float
    mcc: float
    loss: float
    n: int

    def as_dict(self, prefix: str = "") -> dict:
        return {f"{prefix}accuracy": self.accuracy, f"{prefix}mcc": self.mcc, f"{prefix}loss": self.loss}


def evaluate(
    model: TransformerModel,
    examples: Sequence[Example],
    vocab: Vocab,
    max_len: int,
    batch_size: int = 64,
    encoded: Sequence[Sequence[int]] | None = None,
) -> Metrics:
    """Accuracy, Matthews correlation and mean hard-label cross-entropy."""
    if not examples:
        raise ValueError("cannot evaluate on an empty split")
    preds, golds, total = [], [], 0.0
    with T.no_grad():
        for b in batch(examples, vocab, max_len, batch_size, encoded=encoded):
            logits = forward(model, b.tokens, b.pad_mask).logits
            total += T.cross_entropy(logits, b.labels).item() * len(b.labels)
            preds.append(logits.data.argmax(axis=-1))
            golds.append(b.labels)
    pred, gold = np.concatenate(preds), np.concatenate(golds)
    mcc = matthews_corrcoef(pred, gold) if model.config.num_classes == 2 else float("nan")
    return Metrics(accuracy(pred, gold), mcc, total / len(pred), len(pred))


def _stamp(out: TransformerModel, stage: str, parent: TransformerModel, vocab: Vocab, teacher=None) -> None:
    out.lineage = {"stage": stage, "parent": model_hash(parent, vocab.pieces)}
    if teacher is not None:
        out.lineage["teacher"] = model_hash(teacher, vocab.pieces)
    out.meta = {}


def _total_steps(cfg: TrainConfig, per_epoch: int) -> int:
    total = cfg.epochs * per_epoch
    return total if cfg.max_steps is None else min(total, cfg.max_steps)


def _epoch_seed(cfg: TrainConfig, epoch: int) -> int:
    return cfg.seed * 100_003 + epoch


def _check(loss: T.Tensor, stage: str, step: int, terms=None) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingDiverged(f"{stage}: loss {loss.item()} at step {step}; terms {terms}")


def _select_better(metrics: Metrics, best: tuple | None) -> bool:
    key = (metrics.accuracy, -metrics.loss)
    return best is None or key > best


def encode_all(vocab: Vocab, examples: Sequence[Example], max_len: int) -> list[list[int]]:
    return [encode(vocab, e, max_len) for e in examples]


def _snapshot(model: TransformerModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state().items()}


# ---------------------------------------------------------------------------
# teacher preparation


def mask_tokens(tokens: np.ndarray, pad_mask: np.ndarray, prob: float, rng: np.random.Generator):
    """Replace a random ``prob`` share of ordinary tokens with [MASK].

    Every row gets at least one masked position.  Returns the corrupted
    tokens and a boolean array marking the masked positions.
    """
    special = (tokens < 4) | ~pad_mask
    chosen = (rng.random(tokens.shape) < prob) & ~special
    for r in range(tokens.shape[0]):
        if not chosen[r].any():
            candidates = np.flatnonzero(~special[r])
            if candidates.size:
                chosen[r, rng.choice(candidates)] = True
    corrupted = np.where(chosen, MASK, tokens)
    return corrupted, chosen


def train_mlm(
    model: TransformerModel,
    texts: Sequence[Example],
    vocab: Vocab,
    cfg: TrainConfig,
    sink: MetricsLog | None = None,
) -> TransformerModel:
    """Masked-language-model pre-training on raw text."""
    if not model.config.mlm_head:
        raise ConfigError("MLM pre-training needs a model with mlm_head enabled")
    out = model.clone()
    per_epoch = math.ceil(len(texts) / cfg.batch_size)
    total = _total_steps(cfg, per_epoch)
    opt = Adam(out.parameters(), cfg.learning_rate, total, cfg.warmup, clip=cfg.clip)
    rng = np.random.default_rng([cfg.seed, 7])
    encoded = encode_all(vocab, texts, cfg.max_len)
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        for b in batch(texts, vocab, cfg.max_len, cfg.batch_size, _epoch_seed(cfg, epoch), encoded):
            if step >= total:
                break
            corrupted, chosen = mask_tokens(b.tokens, b.pad_mask, cfg.mlm_probability, rng)
            if not chosen.any():
                continue
            rows, cols = np.nonzero(chosen)
            try:
                acts = forward(out, corrupted, b.pad_mask, rng=rng)
                logits = mlm_logits(out, acts.hiddens[-1], (rows, cols))
                loss = T.cross_entropy(logits, b.tokens[rows, cols])
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"teacher-mlm: {exc} at step {step}") from exc
            _check(loss, "teacher-mlm", step)
            T.backward(loss)
            lr = opt.current_lr()
            norm = opt.step()
            _emit(sink, {"stage": "teacher-mlm", "epoch": epoch, "step": step, "lr": lr, "loss": loss.item(), "grad_norm": norm})
            step += 1
    _stamp(out, "teacher-mlm", model, vocab)
    return out


def finetune(
    model: TransformerModel,
    train: Sequence[Example],
    dev: Sequence[Example] | None,
    vocab: Vocab,
    cfg: TrainConfig,
    sink: MetricsLog | None = None,
    stage: str = "teacher-finetune",
) -> TransformerModel:
    """Supervised training on gold labels with per-epoch dev model selection."""
    out = model.clone()
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = _total_steps(cfg, per_epoch)
    opt = Adam(out.parameters(), cfg.learning_rate, total, cfg.warmup, clip=cfg.clip)
    rng = np.random.default_rng([cfg.seed, 11])
    encoded = encode_all(vocab, train, cfg.max_len)
    dev_encoded = encode_all(vocab, dev, cfg.max_len) if dev else None
    best, best_state, best_metrics = None, None, None
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        for b in batch(train, vocab, cfg.max_len, cfg.batch_size, _epoch_seed(cfg, epoch), encoded):
            if step >= total:
                break
            try:
                loss = T.cross_entropy(forward(out, b.tokens, b.pad_mask, rng=rng).logits, b.labels)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"{stage}: {exc} at step {step}") from exc
            _check(loss, stage, step)
            T.backward(loss)
            lr = opt.current_lr()
            norm = opt.step()
            _emit(sink, {"stage": stage, "epoch": epoch, "step": step, "lr": lr, "loss": loss.item(), "grad_norm": norm})
            step += 1
        if dev:
            m = evaluate(out, dev, vocab, cfg.max_len, encoded=dev_encoded)
            _emit(sink, {"stage": stage, "epoch": epoch, **m.as_dict("dev_")})
            if _select_better(m, best):
                best, best_state, best_metrics = (m.accuracy, -m.loss), _snapshot(out), m
    if best_state is not None:
        out.load_state(best_state)
    _stamp(out, stage, model, vocab)
    if best_metrics is not None:
        out.meta.update(best_metrics.as_dict("dev_"))
    return out


def train_teacher(model, train, dev, vocab, cfg, sink=None) -> TransformerModel:
    """Supervised fine-tuning of a (usually MLM pre-trained) teacher."""
    return finetune(model, train, dev, vocab, cfg, sink, stage="teacher-finetune")


# ---------------------------------------------------------------------------
# distillation


def make_distill_params(student: TransformerModel, teacher: TransformerModel, cfg: TrainConfig) -> tuple:
    objectives = cfg.active_objectives()
    mapping = build_mapping(cfg.mapping, student.config.num_layers, teacher.config.num_layers)
    if student.config.max_len > teacher.config.max_len:
        raise ConfigError("student max_len exceeds the teacher's; sequences must fit both")
    params = DistillParams.create(
        student.config,
        teacher.config,
        lambdas=cfg.lambdas,
        seed=cfg.seed,
        identity=cfg.identity_projections,
        share_hidden_projection=cfg.share_hidden_projection,
        temperature=cfg.temperature,
        include_prediction="pred" in objectives,
        use_embd="embd" in objectives,
        use_attn="attn" in objectives,
        use_hidn="hidn" in objectives,
    )
    return mapping, params


def _distill_loop(
    student: TransformerModel,
    teacher: TransformerModel,
    examples: Sequence[Example],
    vocab: Vocab,
    cfg: TrainConfig,
    stage: str,
    sink: MetricsLog | None,
    dev: Sequence[Example] | None = None,
) -> TransformerModel:
    if student.config.vocab_size != teacher.config.vocab_size:
        raise ConfigError("student and teacher must share a vocabulary")
    out = student.clone()
    mapping, params = make_distill_params(out, teacher, cfg)
    per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total = _total_steps(cfg, per_epoch)
    opt = Adam(out.parameters() + params.parameters(), cfg.learning_rate, total, cfg.warmup, clip=cfg.clip)
    rng = np.random.default_rng([cfg.seed, 13])
    encoded = encode_all(vocab, examples, cfg.max_len)
    dev_encoded = encode_all(vocab, dev, cfg.max_len) if dev else None
    best, best_state, best_metrics = None, None, None
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        for b in batch(examples, vocab, cfg.max_len, cfg.batch_size, _epoch_seed(cfg, epoch), encoded):
            if step >= total:
                break
            try:
                s_acts = forward(out, b.tokens, b.pad_mask, rng=rng)
                if cfg.hard_labels:
                    loss = T.cross_entropy(s_acts.logits, b.labels)
                    terms, weights = {"ce": loss.item()}, {"ce": 1.0}
                else:
                    with T.no_grad():
                        t_acts = forward(teacher, b.tokens, b.pad_mask)
                    br = model_loss(mapping, s_acts, t_acts, params)
                    loss, terms, weights = br.total, br.terms, br.weights
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"{stage}: {exc} at step {step}") from exc
            _check(loss, stage, step, terms)
            T.backward(loss)
            lr = opt.current_lr()
            norm = opt.step()
            _emit(
                sink,
                {
                    "stage": stage,
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "loss": loss.item(),
                    "terms": terms,
                    "weights": weights,
                    "grad_norm": norm,
                },
            )
            step += 1
        if dev:
            m = evaluate(out, dev, vocab, cfg.max_len, encoded=dev_encoded)
            _emit(sink, {"stage": stage, "epoch": epoch, **m.as_dict("dev_")})
            if _select_better(m, best):
                best, best_state, best_metrics = (m.accuracy, -m.loss), _snapshot(out), m
    if best_state is not None:
        out.load_state(best_state)
    _stamp(out, stage, student, vocab, teacher)
    if best_metrics is not None:
        out.meta.update(best_metrics.as_dict("dev_"))
    return out


def general_distill(
    teacher: TransformerModel,
    student: TransformerModel,
    corpus: Sequence[Example],
    vocab: Vocab,
    cfg: TrainConfig,
    sink: MetricsLog | None = None,
) -> TransformerModel:
    """Intermediate-layer distillation on unlabeled text; prediction loss is never used."""
    if "pred" in cfg.active_objectives():
        raise ConfigError("general distillation does not use the prediction objective")
    return _distill_loop(student, teacher, corpus, vocab, cfg, "general", sink)


def distill_intermediate(
    student: TransformerModel,
    teacher: TransformerModel,
    train: Sequence[Example],
    vocab: Vocab,
    cfg: TrainConfig,
    sink: MetricsLog | None = None,
) -> TransformerModel:
    """Task phase 1: embedding, attention and hidden-state distillation."""
    if "pred" in cfg.active_objectives():
        raise ConfigError("the intermediate phase does not use the prediction objective")
    return _distill_loop(student, teacher, train, vocab, cfg, "task-intermediate", sink)


def distill_prediction(
    student: TransformerModel,
    teacher: TransformerModel,
    train: Sequence[Example],
    dev: Sequence[Example] | None,
    vocab: Vocab,
    cfg: TrainConfig,
    sink: MetricsLog | None = None,
) -> TransformerModel:
    """Task phase 2: soft cross-entropy on teacher logits (or gold labels if ``hard_labels``)."""
    if student.lineage.get("stage") != "task-intermediate":
        raise LineageError(
            f"prediction-layer distillation needs a task-intermediate student, got stage {student.lineage.get('stage')!r}"
        )
    return _distill_loop(student, teacher, train, vocab, cfg, "task-prediction", sink, dev)


def task_distill(
    general_student: TransformerModel,
    teacher: TransformerModel,
    train: Sequence[Example],
    dev: Sequence[Example] | None,
    vocab: Vocab,
    intermediate_cfg: TrainConfig,
    prediction_cfg: TrainConfig,
    sink: MetricsLog | None = None,
) -> TransformerModel:
    mid = distill_intermediate(general_student, teacher, train, vocab, intermediate_cfg, sink)
    return distill_prediction(mid, teacher, train, dev, vocab, prediction_cfg, sink)
