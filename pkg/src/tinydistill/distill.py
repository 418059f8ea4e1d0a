"""Layer-wise distillation objectives.

Student activations keep their tape; teacher activations are always read as
constants.  Padded positions contribute nothing and are excluded from every
mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mapping import LayerMapping
from .tensor import Tensor
from .transformer import ConfigError, ModelActivations, TransformerConfig, truncated_normal


@dataclass
class DistillParams:
    lambdas: list[float]
    hidden_proj: list[Tensor]
    embed_proj: Tensor
    temperature: float = 1.0
    include_prediction: bool = True
    use_embd: bool = True
    use_attn: bool = True
    use_hidn: bool = True
    share_hidden_projection: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError(f"layer weights must be non-negative, got {self.lambdas}")

    @property
    def M(self) -> int:
        return len(self.lambdas) - 2

    def projection(self, m: int) -> Tensor:
        """W_h for interior student layer m (1-based)."""
        return self.hidden_proj[0 if self.share_hidden_projection else m - 1]

    def parameters(self) -> list[Tensor]:
        return [*self.hidden_proj, self.embed_proj]

    @classmethod
    def create(
        cls,
        student: TransformerConfig,
        teacher: TransformerConfig,
        lambdas=None,
        seed: int = 0,
        identity: bool = False,
        share_hidden_projection: bool = False,
        **flags,
    ) -> "DistillParams":
        """Fresh projections [d', d]; ``identity`` requires equal widths."""
        if student.heads != teacher.heads:
            raise ConfigError(f"student and teacher must share head count, got {student.heads} vs {teacher.heads}")
        M = student.num_layers
        lambdas = [1.0] * (M + 2) if lambdas is None else [float(v) for v in lambdas]
        shape = (student.hidden, teacher.hidden)
        rng = np.random.default_rng(seed)

        def proj():
            if identity:
                if shape[0] != shape[1]:
                    raise ConfigError(f"identity projection needs equal widths, got {shape}")
                return T.parameter(np.eye(shape[0]))
            return T.parameter(truncated_normal(rng, shape))

        hidden = [proj() for _ in range(1 if share_hidden_projection else M)]
        params = cls(lambdas, hidden, proj(), share_hidden_projection=share_hidden_projection, **flags)
        if len(params.lambdas) != M + 2:
            raise ValueError(f"need {M + 2} layer weights for M={M}, got {len(params.lambdas)}")
        return params


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _position_mask(pad_mask, shape) -> np.ndarray | None:
    if pad_mask is None:
        return None
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != shape:
        raise T.DimensionError(f"pad_mask {pad_mask.shape} does not match activations {shape}")
    return pad_mask


def attn_loss(student_A: Tensor, teacher_A, pad_mask=None) -> Tensor:
    """Mean over heads of the MSE between pre-softmax score matrices."""
    teacher_A = _const(teacher_A)
    if student_A.ndim != 4 or teacher_A.ndim != 4:
        raise T.DimensionError(f"attention scores must be [b, h, l, l], got {student_A.shape}, {teacher_A.shape}")
    if student_A.shape[1] != teacher_A.shape[1]:
        raise ConfigError(f"head count mismatch: student {student_A.shape[1]} vs teacher {teacher_A.shape[1]}")
    if student_A.shape != teacher_A.shape:
        raise T.DimensionError(f"attention shapes differ: {student_A.shape} vs {teacher_A.shape}")
    pm = _position_mask(pad_mask, (student_A.shape[0], student_A.shape[2]))
    mask = None if pm is None else (pm[:, None, :, None] & pm[:, None, None, :])
    return T.masked_mse(student_A, teacher_A, mask)


def projected_loss(student_X: Tensor, teacher_X, W: Tensor, pad_mask=None) -> Tensor:
    teacher_X = _const(teacher_X)
    if W.shape != (student_X.shape[-1], teacher_X.shape[-1]):
        raise T.DimensionError(
            f"projection {W.shape} does not map width {student_X.shape[-1]} to {teacher_X.shape[-1]}"
        )
    pm = _position_mask(pad_mask, student_X.shape[:2])
    return T.masked_mse(T.matmul(student_X, W), teacher_X, None if pm is None else pm[:, :, None])


def hidn_loss(student_H: Tensor, teacher_H, W_h: Tensor, pad_mask=None) -> Tensor:
    """MSE(H_S W_h, H_T) over real positions."""
    return projected_loss(student_H, teacher_H, W_h, pad_mask)


def embd_loss(student_E: Tensor, teacher_E, W_e: Tensor, pad_mask=None) -> Tensor:
    """MSE(E_S W_e, E_T) over real positions."""
    return projected_loss(student_E, teacher_E, W_e, pad_mask)


def pred_loss(teacher_z, student_z: Tensor, t: float = 1.0) -> Tensor:
    """Soft cross-entropy of student logits against teacher logits at temperature t."""
    return T.soft_cross_entropy(_const(teacher_z), student_z, t)


def layer_terms(
    m: int,
    mapping: LayerMapping,
    student: ModelActivations,
    teacher: ModelActivations,
    params: DistillParams,
) -> dict[str, Tensor]:
    """The named loss terms that make up the layer loss for student layer m."""
    M = mapping.M
    if not 0 <= m <= M + 1:
        raise IndexError(f"student layer index {m} outside 0..{M + 1}")
    n = mapping(m)
    mask = student.pad_mask
    if m == 0:
        return {"embd": embd_loss(student.embeddings, teacher.embeddings, params.embed_proj, mask)} if params.use_embd else {}
    if m == M + 1:
        if not params.include_prediction:
            return {}
        return {"pred": pred_loss(teacher.logits, student.logits, params.temperature)}
    if n > len(teacher.hiddens):
        raise IndexError(f"teacher has no layer {n}")
    terms = {}
    if params.use_attn:
        terms[f"attn.{m}"] = attn_loss(student.attentions[m - 1], teacher.attentions[n - 1], mask)
    if params.use_hidn:
        terms[f"hidn.{m}"] = hidn_loss(student.hiddens[m - 1], teacher.hiddens[n - 1], params.projection(m), mask)
    return terms


def layer_loss(m, mapping, student, teacher, params) -> Tensor:
    """embd at m=0, hidn+attn for 1..M, pred at M+1 (zero when prediction is off)."""
    terms = list(layer_terms(m, mapping, student, teacher, params).values())
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def weighted(self) -> dict[str, float]:
        return {k: self.weights[k] * v for k, v in self.terms.items()}


def _layer_of(term: str, M: int) -> int:
    if term == "embd":
        return 0
    if term == "pred":
        return M + 1
    return int(term.split(".")[1])


def model_loss(mapping, student, teacher, params) -> LossBreakdown:
    """sum over m of lambda_m * layer_loss(m); per-term values kept for logging."""
    M = mapping.M
    if len(params.lambdas) != M + 2:
        raise ValueError(f"need {M + 2} layer weights, got {len(params.lambdas)}")
    out = LossBreakdown(Tensor(0.0))
    total = None
    for m in range(M + 2):
        for name, term in layer_terms(m, mapping, student, teacher, params).items():
            lam = params.lambdas[_layer_of(name, M)]
            out.terms[name] = term.item()
            out.weights[name] = lam
            weighted = T.scale(term, lam)
            total = weighted if total is None else T.add(total, weighted)
    if total is not None:
        out.total = total
    return out
