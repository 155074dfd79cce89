"""Pre-norm transformer encoder with task heads.

The encoder exposes the per-layer query, key and value projections it used in
attention (:class:`LayerInternals`), which is what relation distillation
consumes. Heads are either sequence classifiers over the CLS position or the
masked-token head, which reuses the input embedding matrix.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from mitkd import ConfigError, ContractError, DimensionError
from mitkd.corpus import CLS_ID, NUM_SPECIAL_TOKENS, PAD_ID, MaskedBatch
from mitkd.numerics import (
    Tensor,
    add,
    cross_entropy_loss,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

logger: logging.Logger = logging.getLogger(__name__)

INIT_STD = 0.02

CLASSIFICATION = "classification"
MASKED_TOKEN = "masked-token"
MLM_HEAD = "mlm"
HEAD_SEPARATOR = "."


@dataclass(frozen=True)
class ModelConfig:
    """Shape of an encoder."""

    num_layers: int = 2
    hidden_size: int = 32
    num_heads: int = 4
    ffn_size: int = 128
    max_seq_len: int = 32
    vocab_size: int = 68
    dropout_rate: float = 0.1

    def __post_init__(self):
        violated = []
        sizes = ("num_layers", "hidden_size", "num_heads", "ffn_size", "max_seq_len")
        for name in sizes:
            if getattr(self, name) < 1:
                violated.append(f"{name} must be positive")
        if self.num_heads >= 1 and self.hidden_size % self.num_heads:
            violated.append(
                f"hidden_size {self.hidden_size} "
                f"not divisible by num_heads {self.num_heads}"
            )
        if self.hidden_size < 2:
            violated.append("hidden_size must be at least 2 for layer norm")
        if self.vocab_size <= NUM_SPECIAL_TOKENS:
            violated.append(
                f"vocab_size {self.vocab_size} must exceed the "
                f"{NUM_SPECIAL_TOKENS} special tokens"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            violated.append(f"dropout_rate {self.dropout_rate!r} not in [0, 1)")
        if violated:
            raise ConfigError("invalid model config: " + "; ".join(violated))

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


TEACHER_CONFIG = ModelConfig(num_layers=4, hidden_size=64, num_heads=4, ffn_size=256)
STUDENT_CONFIG = ModelConfig(num_layers=2, hidden_size=32, num_heads=4, ffn_size=128)
LARGE_TEACHER_CONFIG = ModelConfig(
    num_layers=6, hidden_size=96, num_heads=6, ffn_size=384
)


@dataclass
class LayerInternals:
    """Projections one layer fed into attention, split per attention head.

    Tensors are ``[num_heads × seq_len × head_dim]``, with a leading batch axis
    for batched input. ``attention`` holds the probabilities the layer used.
    """

    layer_index: int
    queries: Tensor
    keys: Tensor
    values: Tensor
    attention: Optional[Tensor] = None


@dataclass
class TaskHead:
    kind: str
    output_dim: int
    weights: Dict[str, Tensor]


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered names and shapes of the encoder parameters."""
    d, f = config.hidden_size, config.ffn_size
    shapes = {
        "embed.tokens": (config.vocab_size, d),
        "embed.positions": (config.max_seq_len, d),
    }
    for index in range(config.num_layers):
        prefix = f"layers.{index}"
        shapes[f"{prefix}.attn_norm.gain"] = (d,)
        shapes[f"{prefix}.attn_norm.bias"] = (d,)
        for proj in ("query", "key", "value", "output"):
            shapes[f"{prefix}.attn.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.attn.{proj}.bias"] = (d,)
        shapes[f"{prefix}.ffn_norm.gain"] = (d,)
        shapes[f"{prefix}.ffn_norm.bias"] = (d,)
        shapes[f"{prefix}.ffn.input.weight"] = (d, f)
        shapes[f"{prefix}.ffn.input.bias"] = (f,)
        shapes[f"{prefix}.ffn.output.weight"] = (f, d)
        shapes[f"{prefix}.ffn.output.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(math.prod(shape) for shape in parameter_shapes(config).values())


def non_embedding_parameter_count(config: ModelConfig) -> int:
    """Parameter count without token and position embeddings."""
    return sum(
        math.prod(shape)
        for name, shape in parameter_shapes(config).items()
        if not name.startswith("embed.")
    )


def _init_tensor(name: str, shape, rng: np.random.Generator) -> Tensor:
    if name.endswith(".gain"):
        data = np.ones(shape)
    elif name.endswith(".bias"):
        data = np.zeros(shape)
    else:
        data = rng.normal(0.0, INIT_STD, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _check_head_name(name: str):
    # head weights are stored as heads.<head>.<weight>
    if not name or HEAD_SEPARATOR in name:
        raise ConfigError(f"head name {name!r} must be non-empty without dots")


class EncoderModel:
    """Encoder parameters plus named task heads."""

    def __init__(
        self,
        config: ModelConfig,
        params: Dict[str, Tensor],
        heads: Optional[Dict[str, TaskHead]] = None,
    ):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter names do not match the model config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        for name in heads or {}:
            _check_head_name(name)
        self.config = config
        self.params = params
        self.heads: Dict[str, TaskHead] = dict(heads or {})
        # header metadata of the checkpoint this model was read from
        self.metadata: Dict = {}

    def head(self, name: str) -> TaskHead:
        try:
            return self.heads[name]
        except KeyError as err:
            raise KeyError(f"model has no head {name!r}") from err

    @staticmethod
    def head_param_name(head: str, weight: str) -> str:
        return HEAD_SEPARATOR.join(("heads", head, weight))

    def parameters(self, head: Optional[str] = None) -> Dict[str, Tensor]:
        """Encoder parameters, plus the weights of ``head`` when given."""
        params = dict(self.params)
        if head is not None:
            for weight, tensor in self.head(head).weights.items():
                params[self.head_param_name(head, weight)] = tensor
        return params

    def all_parameters(self) -> Dict[str, Tensor]:
        params = dict(self.params)
        for head, task_head in self.heads.items():
            for weight, tensor in task_head.weights.items():
                params[self.head_param_name(head, weight)] = tensor
        return params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def add_classification_head(self, name: str, n_classes: int, seed: int) -> TaskHead:
        """Attach a freshly initialised classifier over the CLS position."""
        _check_head_name(name)
        if n_classes < 2:
            raise ConfigError(f"classification head {name!r} needs at least 2 classes")
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        weights = {
            "weight": _init_tensor(
                self.head_param_name(name, "weight"),
                (self.config.hidden_size, n_classes),
                rng,
            ),
            "bias": _init_tensor(self.head_param_name(name, "bias"), (n_classes,), rng),
        }
        self.heads[name] = TaskHead(CLASSIFICATION, n_classes, weights)
        return self.heads[name]

    def add_mlm_head(self) -> TaskHead:
        if MLM_HEAD not in self.heads:
            bias = Tensor(
                np.zeros(self.config.vocab_size),
                requires_grad=True,
                name=self.head_param_name(MLM_HEAD, "bias"),
            )
            self.heads[MLM_HEAD] = TaskHead(
                MASKED_TOKEN, self.config.vocab_size, {"bias": bias}
            )
        return self.heads[MLM_HEAD]

    def without_heads(self) -> "EncoderModel":
        return EncoderModel(self.config, _copy_tensors(self.params))

    def copy(self) -> "EncoderModel":
        heads = {
            name: TaskHead(head.kind, head.output_dim, _copy_tensors(head.weights))
            for name, head in self.heads.items()
        }
        model = EncoderModel(self.config, _copy_tensors(self.params), heads)
        model.metadata = dict(self.metadata)
        return model


def _copy_tensors(tensors: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    return {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
        for name, t in tensors.items()
    }


def init_model(config: ModelConfig, seed: int) -> EncoderModel:
    """Draw a fresh encoder; fully determined by ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    params = {
        name: _init_tensor(name, shape, rng)
        for name, shape in parameter_shapes(config).items()
    }
    logger.debug(
        "initialised encoder %s with %d parameters", config, parameter_count(config)
    )
    return EncoderModel(config, params)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    batch, length, width = x.shape
    heads = reshape(x, (batch, length, num_heads, width // num_heads))
    return transpose(heads, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, num_heads, length, head_dim = x.shape
    merged = transpose(x, (0, 2, 1, 3))
    return reshape(merged, (batch, length, num_heads * head_dim))


def _linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return add(matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _encoder_layer(
    model: EncoderModel,
    index: int,
    x: Tensor,
    key_mask: np.ndarray,
    dropout_rng: Optional[np.random.Generator],
) -> Tuple[Tensor, LayerInternals]:
    p = model.params
    config = model.config
    prefix = f"layers.{index}"

    normed = layer_norm(x, p[f"{prefix}.attn_norm.gain"], p[f"{prefix}.attn_norm.bias"])
    queries = _split_heads(_linear(normed, p, f"{prefix}.attn.query"), config.num_heads)
    keys = _split_heads(_linear(normed, p, f"{prefix}.attn.key"), config.num_heads)
    values = _split_heads(_linear(normed, p, f"{prefix}.attn.value"), config.num_heads)

    scores = scale(matmul(queries, transpose(keys)), 1.0 / math.sqrt(config.head_dim))
    attention = softmax_rows(scores, key_mask)
    context = _merge_heads(matmul(attention, values))
    attended = _linear(context, p, f"{prefix}.attn.output")
    x = add(x, dropout(attended, config.dropout_rate, dropout_rng))

    normed = layer_norm(x, p[f"{prefix}.ffn_norm.gain"], p[f"{prefix}.ffn_norm.bias"])
    inner = gelu(_linear(normed, p, f"{prefix}.ffn.input"))
    outer = _linear(inner, p, f"{prefix}.ffn.output")
    x = add(x, dropout(outer, config.dropout_rate, dropout_rng))
    return x, LayerInternals(index, queries, keys, values, attention)


def _prepare_inputs(
    config: ModelConfig, token_ids, attention_mask
) -> Tuple[np.ndarray, np.ndarray, bool]:
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be 1-d or 2-d, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise ContractError(
            f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if attention_mask is None:
        mask = ids != PAD_ID
    else:
        mask = np.asarray(attention_mask, dtype=bool)
        if single:
            mask = mask[None, :]
        if mask.shape != ids.shape:
            raise DimensionError(
                f"attention mask {mask.shape} does not match token ids {ids.shape}"
            )
    return ids, mask, single


def forward(
    model: EncoderModel,
    token_ids,
    attention_mask=None,
    capture_internals: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, List[LayerInternals]]:
    """Encode ``token_ids`` (one sequence or a batch).

    ``attention_mask`` marks real tokens True; it defaults to ``ids != PAD``.
    Dropout is active only when a ``dropout_rng`` is given.
    """
    config = model.config
    ids, mask, single = _prepare_inputs(config, token_ids, attention_mask)
    length = ids.shape[1]
    p = model.params

    x = add(
        embedding_lookup(p["embed.tokens"], ids),
        embedding_lookup(p["embed.positions"], np.arange(length)),
    )
    x = dropout(x, config.dropout_rate, dropout_rng)
    key_mask = mask[:, None, None, :]

    internals: List[LayerInternals] = []
    for index in range(config.num_layers):
        x, captured = _encoder_layer(model, index, x, key_mask, dropout_rng)
        if capture_internals:
            internals.append(captured)
    hidden = layer_norm(x, p["final_norm.gain"], p["final_norm.bias"])

    if single:
        hidden = reshape(hidden, hidden.shape[1:])
        internals = [
            LayerInternals(
                item.layer_index,
                reshape(item.queries, item.queries.shape[1:]),
                reshape(item.keys, item.keys.shape[1:]),
                reshape(item.values, item.values.shape[1:]),
                reshape(item.attention, item.attention.shape[1:]),
            )
            for item in internals
        ]
    return hidden, internals


def _gather_positions(hidden: Tensor, rows, positions) -> Tensor:
    batch, length, width = hidden.shape
    flat = reshape(hidden, (batch * length, width))
    return embedding_lookup(flat, np.asarray(rows) * length + np.asarray(positions))


def mlm_loss(
    model: EncoderModel,
    masked_batch: MaskedBatch,
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mean cross-entropy over the masked positions of ``masked_batch``."""
    if masked_batch.num_targets == 0:
        raise ContractError("masked batch has no target positions")
    head = model.head(MLM_HEAD)
    hidden, _ = forward(
        model,
        masked_batch.token_ids,
        masked_batch.attention_mask,
        dropout_rng=dropout_rng,
    )
    picked = _gather_positions(
        hidden, masked_batch.target_rows, masked_batch.target_positions
    )
    logits = add(
        matmul(picked, transpose(model.params["embed.tokens"])), head.weights["bias"]
    )
    return cross_entropy_loss(logits, masked_batch.target_ids)


def classification_logits(
    model: EncoderModel,
    head_name: str,
    token_ids,
    attention_mask=None,
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """``[batch × classes]`` logits from the CLS position's final hidden state."""
    head = model.head(head_name)
    if head.kind != CLASSIFICATION:
        raise ContractError(f"head {head_name!r} is not a classification head")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
        if attention_mask is not None:
            attention_mask = np.asarray(attention_mask)[None, :]
    if not np.all(ids[:, 0] == CLS_ID):
        logger.debug("pooling position 0 of sequences that do not start with CLS")
    hidden, _ = forward(model, ids, attention_mask, dropout_rng=dropout_rng)
    batch = ids.shape[0]
    pooled = _gather_positions(
        hidden, np.arange(batch), np.zeros(batch, dtype=np.int64)
    )
    pooled = dropout(pooled, model.config.dropout_rate, dropout_rng)
    return add(matmul(pooled, head.weights["weight"]), head.weights["bias"])


def classification_loss(
    model: EncoderModel,
    head_name: str,
    token_ids,
    attention_mask,
    labels,
    dropout_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    logits = classification_logits(
        model, head_name, token_ids, attention_mask, dropout_rng=dropout_rng
    )
    return cross_entropy_loss(logits, labels)


def classify(model: EncoderModel, head_name: str, token_ids, mask=None) -> np.ndarray:
    """Class probabilities; one vector per sequence."""
    single = np.asarray(token_ids).ndim == 1
    probs = softmax_rows(classification_logits(model, head_name, token_ids, mask)).data
    return probs[0] if single else probs
