"""Teacher preparation: MLM pretraining, single-task and multi-task finetuning.

All three paradigms share :func:`run_training`, the optimisation loop that
updates the encoder plus exactly one head per step.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from mitkd import ConfigError, ContractError
from mitkd.corpus import DatasetSplit, TaskSpec, mask_batch
from mitkd.model import EncoderModel, MLM_HEAD, classification_loss, mlm_loss
from mitkd.numerics import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    backward,
    lr_schedule,
    scale,
    zero_grad,
)

logger: logging.Logger = logging.getLogger(__name__)

LOSS_SCALINGS = ("log2-classes", "none")

# Independent generator streams of one training run.
BATCH_STREAM = 0
TASK_STREAM = 1
DROPOUT_STREAM = 2

StepCallback = Callable[[int, float, float], None]
NextLoss = Callable[[int], Tuple[Tensor, Optional[str]]]


class TeacherKind(str, enum.Enum):
    VANILLA = "vanilla"
    SINGLE_TASK = "single-task"
    MULTI_TASK = "mtl"


@dataclass(frozen=True)
class TrainBudget:
    steps: int
    batch_size: int
    peak_lr: float
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size!r}")
        if self.peak_lr < 0.0:
            raise ConfigError(f"peak_lr must not be negative, got {self.peak_lr!r}")


@dataclass(frozen=True)
class MtlConfig:
    tasks: Tuple[TaskSpec, ...]
    sampling_temperature: float = 1.0
    loss_scaling: str = "log2-classes"
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 5e-4

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ConfigError("MTL needs at least one task")
        if self.sampling_temperature <= 0.0:
            raise ConfigError(
                "sampling_temperature must be positive, "
                f"got {self.sampling_temperature!r}"
            )
        if self.loss_scaling not in LOSS_SCALINGS:
            raise ConfigError(
                f"loss_scaling must be one of {LOSS_SCALINGS}, "
                f"got {self.loss_scaling!r}"
            )
        names = [task.name for task in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"MTL task names must be unique, got {names}")

    @property
    def budget(self) -> TrainBudget:
        return TrainBudget(self.steps, self.batch_size, self.peak_lr)


@dataclass
class TeacherVariant:
    """A prepared teacher and how it was prepared.

    ``name`` is the variant label carried into every downstream result; it
    equals ``kind`` unless a configuration declares extra variants of a kind.
    """

    kind: TeacherKind
    model: EncoderModel
    name: str = ""
    task: Optional[TaskSpec] = None
    mtl_config: Optional[MtlConfig] = None
    metrics: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = TeacherKind(self.kind)
        self.name = self.name or self.kind.value
        if self.kind is TeacherKind.SINGLE_TASK and self.task is None:
            raise ConfigError("a single-task teacher needs its task")
        if self.kind is TeacherKind.MULTI_TASK and self.mtl_config is None:
            raise ConfigError("a multi-task teacher needs its MTL config")

    @property
    def provenance(self) -> str:
        return self.name


def task_sampling_distribution(
    train_sizes: Sequence[int], temperature: float
) -> np.ndarray:
    """``p_i`` proportional to ``n_i ** (1 / temperature)``."""
    if temperature <= 0.0:
        raise ConfigError(f"sampling temperature must be positive, got {temperature!r}")
    sizes = np.asarray(train_sizes, dtype=np.float64)
    if sizes.size == 0 or sizes.min() < 1:
        raise ContractError(
            f"train sizes must all be at least 1, got {list(train_sizes)}"
        )
    # log-space keeps large sizes with small temperatures finite
    logits = np.log(sizes) / temperature
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def sample_task_schedule(
    train_sizes: Sequence[int], temperature: float, steps: int, seed: int
) -> np.ndarray:
    """Task index for every step of an MTL run."""
    probs = task_sampling_distribution(train_sizes, temperature)
    rng = np.random.default_rng([seed, TASK_STREAM])
    return rng.choice(len(probs), size=steps, p=probs)


def scale_loss(loss: Tensor, n_classes: int) -> Tensor:
    """Divide a task loss by ``log2(n_classes)``."""
    if n_classes < 2:
        raise ContractError(f"loss scaling needs at least 2 classes, got {n_classes!r}")
    return scale(loss, 1.0 / math.log2(n_classes))


def run_training(
    model: EncoderModel,
    stage: str,
    budget: TrainBudget,
    next_loss: NextLoss,
    on_step: Optional[StepCallback] = None,
) -> EncoderModel:
    """Optimise ``model`` in place for ``budget.steps`` Adam updates.

    ``next_loss(step)`` returns the loss of that step's batch, computed under
    the active tape, and the head it used. Only the encoder and that head move.
    """
    state = AdamState(learning_rate=budget.peak_lr)
    for step in range(budget.steps):
        lr = lr_schedule(step + 1, budget.steps, budget.peak_lr)
        with Tape() as tape:
            loss, head = next_loss(step)
        params = model.parameters(head)
        zero_grad(params)
        backward(loss, tape)
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, learning_rate=lr)
        value = loss.item()
        if on_step is not None:
            on_step(step, value, lr)
        if (step + 1) % budget.log_every == 0 or step + 1 == budget.steps:
            logger.info(
                "%s step %d/%d loss %.5f lr %.2e",
                stage,
                step + 1,
                budget.steps,
                value,
                lr,
            )
        else:
            logger.debug("%s step %d loss %.5f head %s", stage, step + 1, value, head)
    return model


def _draw_indices(rng: np.random.Generator, size: int, batch_size: int) -> np.ndarray:
    return rng.choice(size, size=min(batch_size, size), replace=False)


def pretrain(
    model: EncoderModel,
    corpus: np.ndarray,
    budget: TrainBudget,
    seed: int,
    on_step: Optional[StepCallback] = None,
) -> EncoderModel:
    """Masked-token pretraining on a copy of ``model``; attaches the MLM head."""
    corpus = np.asarray(corpus)
    if len(corpus) < 1:
        raise ConfigError("pretraining corpus is empty")
    teacher = model.copy()
    teacher.add_mlm_head()
    rng = np.random.default_rng([seed, BATCH_STREAM])
    vocab_size = teacher.config.vocab_size

    def next_loss(_step):
        rows = corpus[_draw_indices(rng, len(corpus), budget.batch_size)]
        batch = mask_batch(rows, int(rng.integers(2**31)), vocab_size=vocab_size)
        while batch.num_targets == 0:
            batch = mask_batch(rows, int(rng.integers(2**31)), vocab_size=vocab_size)
        return mlm_loss(teacher, batch), MLM_HEAD

    return run_training(teacher, "pretrain", budget, next_loss, on_step)


def attach_task_heads(
    model: EncoderModel, tasks: Sequence[TaskSpec], seed: int
) -> EncoderModel:
    for task in tasks:
        model.add_classification_head(task.name, task.n_classes, seed)
    return model


def _check_heads(model: EncoderModel, tasks: Sequence[TaskSpec]) -> None:
    for task in tasks:
        if task.name not in model.heads:
            raise ConfigError(f"teacher has no head for task {task.name!r}")
        if model.heads[task.name].output_dim != task.n_classes:
            raise ConfigError(
                f"head {task.name!r} has {model.heads[task.name].output_dim} outputs, "
                f"task has {task.n_classes} classes"
            )


def _check_train_sets(
    tasks: Sequence[TaskSpec], train_sets: Mapping[str, DatasetSplit]
) -> None:
    missing = [task.name for task in tasks if task.name not in train_sets]
    if missing:
        raise ConfigError(f"no training data for tasks {missing}")
    empty = [task.name for task in tasks if len(train_sets[task.name]) == 0]
    if empty:
        raise ConfigError(f"empty training data for tasks {empty}")


def _finetune(
    teacher: EncoderModel,
    tasks: Sequence[TaskSpec],
    schedule: np.ndarray,
    scaled: bool,
    budget: TrainBudget,
    train_sets: Mapping[str, DatasetSplit],
    seed: int,
    stage: str,
    on_step: Optional[StepCallback],
) -> EncoderModel:
    _check_heads(teacher, tasks)
    _check_train_sets(tasks, train_sets)
    model = teacher.copy()
    batch_rng = np.random.default_rng([seed, BATCH_STREAM])
    dropout_rng = np.random.default_rng([seed, DROPOUT_STREAM])

    def next_loss(step):
        task = tasks[schedule[step]]
        split = train_sets[task.name]
        ids, mask, labels = split.batch(
            _draw_indices(batch_rng, len(split), budget.batch_size),
            model.config.max_seq_len,
        )
        loss = classification_loss(model, task.name, ids, mask, labels, dropout_rng)
        if scaled:
            loss = scale_loss(loss, task.n_classes)
        return loss, task.name

    return run_training(model, stage, budget, next_loss, on_step)


def mtl_train(
    teacher: EncoderModel,
    config: MtlConfig,
    train_sets: Mapping[str, DatasetSplit],
    seed: int,
    on_step: Optional[StepCallback] = None,
) -> EncoderModel:
    """Multi-task finetuning; one sampled task per batch. Heads are retained."""
    sizes = []
    for task in config.tasks:
        _check_train_sets([task], train_sets)
        sizes.append(len(train_sets[task.name]))
    schedule = sample_task_schedule(
        sizes, config.sampling_temperature, config.steps, seed
    )
    logger.info(
        "MTL over %d tasks, sampling %s",
        len(config.tasks),
        np.round(task_sampling_distribution(sizes, config.sampling_temperature), 4),
    )
    return _finetune(
        teacher,
        config.tasks,
        schedule,
        config.loss_scaling == "log2-classes",
        config.budget,
        train_sets,
        seed,
        "mtl",
        on_step,
    )


def single_task_train(
    teacher: EncoderModel,
    spec: TaskSpec,
    hparams: TrainBudget,
    train_set: DatasetSplit,
    seed: int,
    on_step: Optional[StepCallback] = None,
) -> EncoderModel:
    """Finetune on one task without loss scaling."""
    schedule = np.zeros(hparams.steps, dtype=np.int64)
    return _finetune(
        teacher,
        [spec],
        schedule,
        False,
        hparams,
        {spec.name: train_set},
        seed,
        "single-task",
        on_step,
    )


def mlm_probe_loss(
    model: EncoderModel, probe: np.ndarray, seed: int, batch_size: int = 64
) -> float:
    """Mean masked-token loss of ``model`` over the ``probe`` sequences."""
    if MLM_HEAD not in model.heads:
        raise ContractError("model has no masked-token head to probe")
    probe = np.asarray(probe)
    total, count = 0.0, 0
    for start in range(0, len(probe), batch_size):
        batch = mask_batch(
            probe[start : start + batch_size],
            seed + start,
            vocab_size=model.config.vocab_size,
        )
        if batch.num_targets:
            total += mlm_loss(model, batch).item() * batch.num_targets
            count += batch.num_targets
    if not count:
        raise ContractError("probe sequences produced no masked positions")
    return total / count


def forgetting_probe(
    before: EncoderModel, after: EncoderModel, probe: np.ndarray, seed: int
) -> Dict[str, float]:
    """MLM loss on the same masked probe before and after finetuning."""
    loss_before = mlm_probe_loss(before, probe, seed)
    loss_after = mlm_probe_loss(after, probe, seed)
    logger.info("MLM probe loss %.4f -> %.4f", loss_before, loss_after)
    return {"mlm_loss_before": loss_before, "mlm_loss_after": loss_after}
