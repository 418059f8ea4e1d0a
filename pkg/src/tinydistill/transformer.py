"""Post-layer-norm transformer encoder exposing every intermediate behaviour.

A forward pass returns the embedding output, each layer's pre-softmax
attention scores and hidden states, and the classifier logits, so that any
of them can serve as a distillation target.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_BIAS = -1e9
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 2
    hidden: int = 16
    ffn: int = 32
    heads: int = 2
    vocab_size: int = 64
    max_len: int = 32
    num_classes: int = 2
    dropout: float = 0.0
    seed: int = 0
    mlm_head: bool = False

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def validate(self) -> "TransformerConfig":
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.heads < 1 or self.hidden < self.heads:
            raise ConfigError(f"need 1 <= heads <= hidden, got heads={self.heads} hidden={self.hidden}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.ffn < 1:
            raise ConfigError(f"ffn must be >= 1, got {self.ffn}")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be >= 4 (four reserved ids), got {self.vocab_size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be positive, got {self.max_len}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    def replace(self, **changes) -> "TransformerConfig":
        return dataclasses.replace(self, **changes)


def parameter_count(config: TransformerConfig) -> int:
    """Number of learnable scalars; degenerate configs (no layers or classes) allowed."""
    d, di, c = config.hidden, config.ffn, config.num_classes
    per_layer = 4 * d * d + (d * di + di) + (di * d + d) + 2 * (2 * d)
    total = config.vocab_size * d + config.max_len * d + config.num_layers * per_layer
    if c:
        total += d * c + c
    if config.mlm_head:
        total += config.vocab_size
    return total


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: TransformerConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    d, di = config.hidden, config.ffn
    params: dict[str, Tensor] = {}

    def weight(name, shape):
        params[name] = T.parameter(truncated_normal(rng, shape))

    def zeros(name, shape):
        params[name] = T.parameter(np.zeros(shape))

    weight("embeddings.token", (config.vocab_size, d))
    weight("embeddings.position", (config.max_len, d))
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for w in ("query", "key", "value", "output"):
            weight(p + "attn." + w, (d, d))
        params[p + "attn_norm.gain"] = T.parameter(np.ones(d))
        zeros(p + "attn_norm.bias", (d,))
        weight(p + "ffn.w1", (d, di))
        zeros(p + "ffn.b1", (di,))
        weight(p + "ffn.w2", (di, d))
        zeros(p + "ffn.b2", (d,))
        params[p + "ffn_norm.gain"] = T.parameter(np.ones(d))
        zeros(p + "ffn_norm.bias", (d,))
    weight("classifier.weight", (d, config.num_classes))
    zeros("classifier.bias", (config.num_classes,))
    if config.mlm_head:
        zeros("mlm.bias", (config.vocab_size,))
    return params


@dataclass
class TransformerModel:
    config: TransformerConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    # provenance carried into checkpoints: producing stage and parent hash
    lineage: dict = field(default_factory=lambda: {"stage": "init", "parent": "root"})
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: TransformerConfig) -> "TransformerModel":
        config.validate()
        return cls(config, init_params(config))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def layer(self, i: int) -> "LayerWeights":
        return LayerWeights.from_params(self.params, i)

    def clone(self) -> "TransformerModel":
        params = {k: T.parameter(v.data.copy()) for k, v in self.params.items()}
        return TransformerModel(self.config, params, dict(self.lineage), dict(self.meta))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, arr in state.items():
            if k not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            if self.params[k].shape != arr.shape:
                raise T.DimensionError(f"parameter {k!r}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=T.DTYPE, copy=True)


@dataclass
class LayerWeights:
    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    attn_gain: Tensor
    attn_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ffn_gain: Tensor
    ffn_bias: Tensor

    @classmethod
    def from_params(cls, params: dict[str, Tensor], i: int) -> "LayerWeights":
        p = f"layers.{i}."
        return cls(
            params[p + "attn.query"],
            params[p + "attn.key"],
            params[p + "attn.value"],
            params[p + "attn.output"],
            params[p + "attn_norm.gain"],
            params[p + "attn_norm.bias"],
            params[p + "ffn.w1"],
            params[p + "ffn.b1"],
            params[p + "ffn.w2"],
            params[p + "ffn.b2"],
            params[p + "ffn_norm.gain"],
            params[p + "ffn_norm.bias"],
        )


@dataclass
class ModelActivations:
    embeddings: Tensor  # [b, l, d]
    attentions: list[Tensor]  # per layer [b, h, l, l], pre-softmax
    hiddens: list[Tensor]  # per layer [b, l, d]
    logits: Tensor  # [b, c]
    attention_probs: list[Tensor] = field(default_factory=list)
    pad_mask: np.ndarray | None = None


def attention_scores(q: Tensor, k: Tensor, d_k: int) -> Tensor:
    """Scaled dot products q k^T / sqrt(d_k) for [b, h, l, d_k] inputs."""
    if q.shape != k.shape or q.ndim != 4:
        raise T.DimensionError(f"attention_scores: q {q.shape} and k {k.shape} must both be [b, h, l, d_k]")
    return T.scale(T.matmul(q, T.transpose_last_two(k)), 1.0 / math.sqrt(d_k))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dk))


def key_mask_bias(pad_mask: np.ndarray) -> Tensor:
    """Additive bias [b, 1, 1, l]: 0 on real keys, -1e9 on padding."""
    return Tensor(np.where(pad_mask, 0.0, MASK_BIAS)[:, None, None, :])


def mha(x: Tensor, weights: LayerWeights, heads: int, pad_mask: np.ndarray | None = None):
    """Multi-head self-attention; returns (output, pre-softmax scores, probabilities)."""
    d = x.shape[-1]
    if d % heads:
        raise T.DimensionError(f"width {d} not divisible by {heads} heads")
    q = _split_heads(T.matmul(x, weights.query), heads)
    k = _split_heads(T.matmul(x, weights.key), heads)
    v = _split_heads(T.matmul(x, weights.value), heads)
    scores = attention_scores(q, k, d // heads)
    masked = scores if pad_mask is None else T.add(scores, key_mask_bias(pad_mask))
    probs = T.softmax_rows(masked)
    out = T.matmul(_merge_heads(T.matmul(probs, v)), weights.output)
    return out, scores, probs


def ffn(x: Tensor, weights: LayerWeights) -> Tensor:
    """max(0, x W1 + b1) W2 + b2."""
    inner = T.relu(T.add(T.matmul(x, weights.w1), weights.b1))
    return T.add(T.matmul(inner, weights.w2), weights.b2)


def forward(
    model: TransformerModel,
    tokens,
    pad_mask=None,
    rng: np.random.Generator | None = None,
) -> ModelActivations:
    """Run the encoder; ``rng`` enables dropout when the config asks for it."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise T.DimensionError(f"tokens must be [batch, length], got shape {tokens.shape}")
    b, l = tokens.shape
    if l > cfg.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    pad_mask = np.ones((b, l), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != tokens.shape:
        raise T.DimensionError(f"pad_mask {pad_mask.shape} does not match tokens {tokens.shape}")
    p = model.params
    drop = cfg.dropout if rng is not None else 0.0

    emb = T.add(T.gather_rows(p["embeddings.token"], tokens), p["embeddings.position"][:l])
    x = T.dropout(emb, drop, rng)
    attentions, hiddens, probs_all = [], [], []
    for i in range(cfg.num_layers):
        w = model.layer(i)
        attn_out, scores, probs = mha(x, w, cfg.heads, pad_mask)
        x = T.layer_norm(T.add(x, T.dropout(attn_out, drop, rng)), w.attn_gain, w.attn_bias)
        x = T.layer_norm(T.add(x, T.dropout(ffn(x, w), drop, rng)), w.ffn_gain, w.ffn_bias)
        attentions.append(scores)
        hiddens.append(x)
        probs_all.append(probs)
    cls = x[:, 0, :]
    logits = T.add(T.matmul(cls, p["classifier.weight"]), p["classifier.bias"])
    return ModelActivations(emb, attentions, hiddens, logits, probs_all, pad_mask)


def mlm_logits(model: TransformerModel, hidden: Tensor, positions=None) -> Tensor:
    """Vocabulary logits from hidden states via the tied token embedding.

    ``positions`` is an optional pair of index arrays (batch, position) that
    selects rows before projecting, giving [n, V] instead of [b, l, V].
    """
    if not model.config.mlm_head:
        raise CapabilityError("model has no MLM head")
    h = hidden if positions is None else hidden[positions]
    table = model.params["embeddings.token"]
    return T.add(T.matmul(h, T.transpose_last_two(table)), model.params["mlm.bias"])


class CapabilityError(RuntimeError):
    pass


def predict(model: TransformerModel, tokens, pad_mask=None) -> np.ndarray:
    with T.no_grad():
        return forward(model, tokens, pad_mask).logits.data
