"""Task-agnostic distillation by self-attention relation matching.

The per-head queries, keys and values of one teacher layer and one student
layer are concatenated, re-split into a shared number of relation heads and
turned into scaled dot-product distributions over key positions. The student
minimises the teacher-to-student KL divergence of those distributions on raw
corpus sequences. The recipe is identical for every teacher variant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from mitkd import ConfigError, ContractError
from mitkd.corpus import PAD_ID
from mitkd.model import EncoderModel, LayerInternals, ModelConfig, forward, init_model
from mitkd.mtl import (
    BATCH_STREAM,
    StepCallback,
    TeacherVariant,
    TrainBudget,
    run_training,
)
from mitkd.numerics import (
    Tensor,
    add,
    kl_divergence_rows,
    matmul,
    no_tape,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

logger: logging.Logger = logging.getLogger(__name__)

RELATION_TYPES = ("QQ", "KK", "VV")


@dataclass(frozen=True)
class DistillConfig:
    relation_heads: int = 8
    teacher_layer: int = -1
    student_layer: int = -1
    relation_types: Tuple[str, ...] = RELATION_TYPES
    steps: int = 6000
    batch_size: int = 16
    peak_lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "relation_types", tuple(self.relation_types))
        if self.relation_heads < 1:
            raise ConfigError(
                f"relation_heads must be positive, got {self.relation_heads!r}"
            )
        unknown = set(self.relation_types) - set(RELATION_TYPES)
        if unknown or not self.relation_types:
            raise ConfigError(
                f"relation_types must be a non-empty subset of {RELATION_TYPES}, "
                f"got {self.relation_types!r}"
            )
        if len(set(self.relation_types)) != len(self.relation_types):
            raise ConfigError(f"duplicate relation types in {self.relation_types!r}")
        TrainBudget(self.steps, self.batch_size, self.peak_lr)

    @property
    def budget(self) -> TrainBudget:
        return TrainBudget(self.steps, self.batch_size, self.peak_lr)

    def validate_for(self, teacher: ModelConfig, student: ModelConfig) -> None:
        """Check the relation heads and layer indices against both model shapes."""
        violated = []
        for side, config in (("teacher", teacher), ("student", student)):
            if config.hidden_size % self.relation_heads:
                violated.append(
                    f"relation_heads {self.relation_heads} does not divide "
                    f"{side} hidden_size {config.hidden_size}"
                )
        for side, index, config in (
            ("teacher", self.teacher_layer, teacher),
            ("student", self.student_layer, student),
        ):
            if not -config.num_layers <= index < config.num_layers:
                violated.append(
                    f"{side}_layer {index} invalid for {config.num_layers} layers"
                )
        if teacher.vocab_size != student.vocab_size:
            violated.append(
                f"teacher vocab {teacher.vocab_size} "
                f"!= student vocab {student.vocab_size}"
            )
        if violated:
            raise ConfigError("invalid distillation config: " + "; ".join(violated))


@dataclass
class RelationSet:
    """Row-stochastic relations per type, ``[(batch ×) heads × L × L]``.

    ``mask`` marks real (non-PAD) positions, ``[(batch ×) L]``.
    """

    relations: Dict[str, Tensor]
    mask: np.ndarray
    num_heads: int = 0

    def key_mask(self) -> np.ndarray:
        return self.mask[..., None, None, :]

    def query_mask(self) -> np.ndarray:
        return self.mask[..., None, :]


def _relation_heads(x: Tensor, num_relation_heads: int) -> Tensor:
    """Concatenate attention heads, then re-split into relation heads."""
    batched = x.ndim == 4
    if not batched:
        x = reshape(x, (1,) + x.shape)
    batch, num_heads, length, head_dim = x.shape
    width = num_heads * head_dim
    if width % num_relation_heads:
        raise ConfigError(
            f"{num_relation_heads} relation heads do not divide hidden size {width}"
        )
    merged = reshape(transpose(x, (0, 2, 1, 3)), (batch, length, width))
    split = reshape(
        merged, (batch, length, num_relation_heads, width // num_relation_heads)
    )
    heads = transpose(split, (0, 2, 1, 3))
    return heads if batched else reshape(heads, heads.shape[1:])


def relation_matrix(x: Tensor, mask: np.ndarray) -> Tensor:
    """``softmax(X Xᵀ / sqrt(d_r))`` per relation head, PAD keys masked."""
    scores = scale(matmul(x, transpose(x)), 1.0 / math.sqrt(x.shape[-1]))
    return softmax_rows(scores, np.asarray(mask, dtype=bool)[..., None, None, :])


def extract_relations(
    internals: LayerInternals,
    num_relation_heads: int,
    mask=None,
    relation_types=RELATION_TYPES,
) -> RelationSet:
    """Relation distributions of one layer; ``mask`` defaults to all positions."""
    length = internals.queries.shape[-2]
    lead = internals.queries.shape[:-3]
    if mask is None:
        mask = np.ones(lead + (length,), dtype=bool)
    mask = np.asarray(mask, bool)
    if mask.shape != lead + (length,):
        raise ContractError(
            f"mask shape {mask.shape} does not fit internals {internals.queries.shape}"
        )
    sources = {"QQ": internals.queries, "KK": internals.keys, "VV": internals.values}
    relations = {
        kind: relation_matrix(_relation_heads(sources[kind], num_relation_heads), mask)
        for kind in relation_types
    }
    return RelationSet(relations, mask, num_relation_heads)


def relation_kl(teacher: RelationSet, student: RelationSet) -> Tensor:
    """Sum over relation types of the mean row KL(teacher ‖ student).

    Rows at PAD query positions and entries at PAD key positions are excluded.
    """
    if teacher.relations.keys() != student.relations.keys():
        raise ContractError(
            f"relation types differ: {sorted(teacher.relations)} "
            f"vs {sorted(student.relations)}"
        )
    if teacher.mask.shape != student.mask.shape or not np.array_equal(
        teacher.mask, student.mask
    ):
        raise ContractError("teacher and student relations use different masks")
    total: Optional[Tensor] = None
    for kind, target in teacher.relations.items():
        predicted = student.relations[kind]
        if target.shape != predicted.shape:
            raise ContractError(
                f"{kind} relations differ in shape: {target.shape} vs {predicted.shape}"
            )
        loss = kl_divergence_rows(
            target, predicted, mask=teacher.key_mask(), row_mask=teacher.query_mask()
        )
        total = loss if total is None else add(total, loss)
    return total


def distill(
    teacher_variant: TeacherVariant,
    student_config: ModelConfig,
    corpus: np.ndarray,
    config: DistillConfig,
    seed: int,
    student: Optional[EncoderModel] = None,
    on_step: Optional[StepCallback] = None,
) -> EncoderModel:
    """Distil ``teacher_variant`` into a student of ``student_config``.

    The student is drawn from ``seed`` unless a starting ``student`` is given.
    The teacher runs without dropout and outside the tape; it is never
    modified. Returns the student encoder without heads.
    """
    teacher = teacher_variant.model
    config.validate_for(teacher.config, student_config)
    corpus = np.asarray(corpus, dtype=np.int64)
    if len(corpus) < config.batch_size:
        raise ConfigError(
            f"distillation corpus of {len(corpus)} sequences is shorter than "
            f"one batch of {config.batch_size}"
        )
    if student is None:
        student = init_model(student_config, seed)
    else:
        if student.config != student_config:
            raise ConfigError("starting student does not match student_config")
        student = student.without_heads()

    rng = np.random.default_rng([seed, BATCH_STREAM])
    budget = config.budget

    def next_loss(_step):
        ids = corpus[rng.choice(len(corpus), size=config.batch_size, replace=False)]
        mask = ids != PAD_ID
        with no_tape():
            _, teacher_layers = forward(teacher, ids, mask, capture_internals=True)
            target = extract_relations(
                teacher_layers[config.teacher_layer],
                config.relation_heads,
                mask,
                config.relation_types,
            )
        _, student_layers = forward(student, ids, mask, capture_internals=True)
        predicted = extract_relations(
            student_layers[config.student_layer],
            config.relation_heads,
            mask,
            config.relation_types,
        )
        return relation_kl(target, predicted), None

    logger.info(
        "distilling %s teacher into %s over %d steps",
        teacher_variant.name,
        student_config,
        budget.steps,
    )
    return run_training(
        student, f"distill-{teacher_variant.name}", budget, next_loss, on_step
    )
