"""Config-driven experiment stages, checkpoints, metrics and the report.

One experiment lives in ``<output_dir>/<config hash>/``:

    config.json              fully defaulted configuration
    metrics.jsonl            one JSON object per line, every stage
    pretrain-<teacher>/      pretrained encoder per teacher shape
    teacher-<variant>/       prepared teacher per variant
    student-<variant>/       distilled student per variant
    evaluate/runs.jsonl      one RunResult per line
    report/runs.csv          all RunResults
    report/summary.txt       variant × protocol table and comparison
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import math
import os
import struct
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mitkd import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    ConfigError,
    ContractError,
    DimensionError,
    MissingPrerequisiteError,
)
from mitkd.corpus import (
    DEFAULT_VOCAB_SIZE,
    DatasetSplit,
    MarkovChain,
    TaskSpec,
    TaskSuite,
    default_suite,
    derive_seed,
    generate_corpus,
    generate_task,
)
from mitkd.distill import DistillConfig, distill
from mitkd.evaluation import (
    DEFAULT_FRACTIONS,
    FinetuneHparams,
    RunResult,
    compare_variants,
    dev_accuracy,
    format_comparison,
    format_summary,
    run_protocol,
    summarize,
)
from mitkd.model import (
    HEAD_SEPARATOR,
    LARGE_TEACHER_CONFIG,
    STUDENT_CONFIG,
    TEACHER_CONFIG,
    EncoderModel,
    ModelConfig,
    TaskHead,
    init_model,
    non_embedding_parameter_count,
    parameter_count,
)
from mitkd.mtl import (
    MtlConfig,
    StepCallback,
    TeacherKind,
    TeacherVariant,
    TrainBudget,
    attach_task_heads,
    forgetting_probe,
    mlm_probe_loss,
    mtl_train,
    pretrain,
    single_task_train,
)
from mitkd.numerics import Tensor

logger: logging.Logger = logging.getLogger(__name__)

OUTPUT_ENV = "MITKD_OUT"
CHECKPOINT_NAME = "model.ckpt"
CHECKPOINT_MAGIC = b"MITK"
CHECKPOINT_VERSION = 1
_HEADER_LENGTH = struct.Struct("<I")
_PREAMBLE = len(CHECKPOINT_MAGIC) + 1 + _HEADER_LENGTH.size
_FLOAT = np.dtype("<f8")

TEACHER_PROVENANCE_PREFIX = "teacher-"


def _canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# Configuration


def _section(cls, data, name: str, **converters):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError(f"section {name!r} must be an object, got {data!r}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    try:
        values = {
            key: converters[key](value) if key in converters else value
            for key, value in data.items()
        }
        return cls(**values)
    except (AttributeError, TypeError, ValueError) as err:
        raise ConfigError(f"invalid section {name!r}: {err}") from err


@dataclass(frozen=True)
class CorpusConfig:
    num_sequences: int = 20000
    seq_len: int = 32
    probe_sequences: int = 256


@dataclass(frozen=True)
class TasksConfig:
    """Generated suite sizes, or explicit task lists when given."""

    num_in_family: int = 8
    num_out_family: int = 4
    train_size: int = 2000
    dev_size: int = 500
    in_family: Tuple[TaskSpec, ...] = ()
    out_family: Tuple[TaskSpec, ...] = ()

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["in_family"] = [spec.to_dict() for spec in self.in_family]
        data["out_family"] = [spec.to_dict() for spec in self.out_family]
        return data


def _task_list(items) -> Tuple[TaskSpec, ...]:
    return tuple(TaskSpec.from_dict(item) for item in items)


@dataclass(frozen=True)
class SingleTaskConfig:
    """Single-task teacher; ``task`` defaults to the first in-family task."""

    task: str = ""
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 5e-4


@dataclass(frozen=True)
class MtlSection:
    """MTL teacher; an empty ``tasks`` list means every in-family task."""

    tasks: Tuple[str, ...] = ()
    sampling_temperature: float = 1.0
    loss_scaling: str = "log2-classes"
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 5e-4


@dataclass(frozen=True)
class VariantConfig:
    name: str
    kind: TeacherKind
    teacher: str = "base"
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", TeacherKind(self.kind))
        except ValueError as err:
            kinds = [k.value for k in TeacherKind]
            raise ConfigError(
                f"variant {self.name!r}: kind {self.kind!r} not in {kinds}"
            ) from err

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "teacher": self.teacher,
            "distill": asdict(self.distill),
        }

    @classmethod
    def from_dict(cls, data) -> "VariantConfig":
        return _section(
            cls,
            data,
            "variants",
            distill=lambda d: _section(
                DistillConfig, d, "distill", relation_types=tuple
            ),
        )


@dataclass(frozen=True)
class EvaluationConfig:
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    seeds: int = 4
    evaluate_teachers: bool = False


DEFAULT_VARIANTS = (
    VariantConfig("vanilla", TeacherKind.VANILLA),
    VariantConfig("single-task", TeacherKind.SINGLE_TASK),
    VariantConfig("mtl", TeacherKind.MULTI_TASK),
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on; every section falls back to the desk defaults."""

    seed: int = 0
    output_dir: str = "runs"
    log_every: int = 100
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)
    teachers: Dict[str, ModelConfig] = field(
        default_factory=lambda: {"base": TEACHER_CONFIG}
    )
    student: ModelConfig = STUDENT_CONFIG
    pretrain: TrainBudget = TrainBudget(4000, 32, 1e-3)
    single_task: SingleTaskConfig = field(default_factory=SingleTaskConfig)
    mtl: MtlSection = field(default_factory=MtlSection)
    variants: Tuple[VariantConfig, ...] = DEFAULT_VARIANTS
    finetune: FinetuneHparams = field(default_factory=FinetuneHparams)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        model = ModelConfig.from_dict
        return _section(
            cls,
            data,
            "experiment",
            corpus=lambda d: _section(CorpusConfig, d, "corpus"),
            tasks=lambda d: _section(
                TasksConfig, d, "tasks", in_family=_task_list, out_family=_task_list
            ),
            teachers=lambda d: {key: model(value) for key, value in d.items()},
            student=model,
            pretrain=lambda d: _section(TrainBudget, d, "pretrain"),
            single_task=lambda d: _section(SingleTaskConfig, d, "single_task"),
            mtl=lambda d: _section(MtlSection, d, "mtl", tasks=tuple),
            variants=lambda items: tuple(VariantConfig.from_dict(v) for v in items),
            finetune=lambda d: _section(
                FinetuneHparams,
                d,
                "finetune",
                epochs=tuple,
                batch_sizes=tuple,
                learning_rates=tuple,
            ),
            evaluation=lambda d: _section(
                EvaluationConfig, d, "evaluation", fractions=tuple
            ),
        )

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "log_every": self.log_every,
            "corpus": asdict(self.corpus),
            "tasks": self.tasks.to_dict(),
            "teachers": {key: cfg.to_dict() for key, cfg in self.teachers.items()},
            "student": self.student.to_dict(),
            "pretrain": asdict(self.pretrain),
            "single_task": asdict(self.single_task),
            "mtl": {**asdict(self.mtl), "tasks": list(self.mtl.tasks)},
            "variants": [variant.to_dict() for variant in self.variants],
            "finetune": {
                "epochs": list(self.finetune.epochs),
                "batch_sizes": list(self.finetune.batch_sizes),
                "learning_rates": list(self.finetune.learning_rates),
            },
            "evaluation": {
                **asdict(self.evaluation),
                "fractions": list(self.evaluation.fractions),
            },
        }

    def config_hash(self) -> str:
        """SHA-256 of the canonical config without ``output_dir``, 16 hex digits."""
        content = self.to_dict()
        del content["output_dir"]
        return hashlib.sha256(_canonical_json(content).encode("utf-8")).hexdigest()[:16]

    def variant(self, name: str) -> VariantConfig:
        for variant in self.variants:
            if variant.name == name:
                return variant
        raise ConfigError(
            f"unknown variant {name!r}, configured: {[v.name for v in self.variants]}"
        )

    def chain(self) -> MarkovChain:
        return MarkovChain.from_seed(derive_seed(self.seed, "chain"))

    def suite(self, chain: Optional[MarkovChain] = None) -> TaskSuite:
        if self.tasks.in_family or self.tasks.out_family:
            return TaskSuite(self.tasks.in_family, self.tasks.out_family)
        return default_suite(
            chain or self.chain(),
            derive_seed(self.seed, "suite"),
            self.tasks.num_in_family,
            self.tasks.num_out_family,
            self.corpus.seq_len,
        )

    def single_task_spec(self, suite: TaskSuite) -> TaskSpec:
        name = self.single_task.task or suite.in_family[0].name
        if not suite.is_in_family(name):
            raise ConfigError(
                f"single-task teacher task {name!r} is not an in-family task"
            )
        return suite.get(name)

    def mtl_config(self, suite: TaskSuite) -> MtlConfig:
        names = self.mtl.tasks or tuple(spec.name for spec in suite.in_family)
        outside = [name for name in names if not suite.is_in_family(name)]
        if outside:
            raise ConfigError(f"MTL tasks {outside} are not in-family tasks")
        return MtlConfig(
            tasks=tuple(suite.get(name) for name in names),
            sampling_temperature=self.mtl.sampling_temperature,
            loss_scaling=self.mtl.loss_scaling,
            steps=self.mtl.steps,
            batch_size=self.mtl.batch_size,
            peak_lr=self.mtl.peak_lr,
        )

    def validate(self) -> TaskSuite:
        """Check every cross-module constraint; returns the task suite."""
        violated = []
        names = [variant.name for variant in self.variants]
        if not names:
            violated.append("at least one variant is required")
        if len(set(names)) != len(names):
            violated.append(f"variant names must be unique, got {names}")
        models = dict(self.teachers, student=self.student)
        for label, model in models.items():
            if model.vocab_size != DEFAULT_VOCAB_SIZE:
                violated.append(f"{label} vocab_size must be {DEFAULT_VOCAB_SIZE}")
            if model.max_seq_len < self.corpus.seq_len:
                violated.append(
                    f"{label} max_seq_len {model.max_seq_len} below "
                    f"corpus seq_len {self.corpus.seq_len}"
                )
        for variant in self.variants:
            if variant.teacher not in self.teachers:
                violated.append(
                    f"variant {variant.name!r} uses unknown teacher {variant.teacher!r}"
                )
                continue
            try:
                variant.distill.validate_for(
                    self.teachers[variant.teacher], self.student
                )
            except ConfigError as err:
                violated.append(f"variant {variant.name!r}: {err}")
            if self.corpus.num_sequences < variant.distill.batch_size:
                violated.append(
                    f"variant {variant.name!r}: "
                    "corpus shorter than one distillation batch"
                )
        if self.corpus.seq_len < 4 or self.corpus.num_sequences < 1:
            violated.append("corpus needs sequences of length at least 4")
        if self.corpus.probe_sequences < 1:
            violated.append("probe_sequences must be positive")
        if any(not 0.0 < f <= 1.0 for f in self.evaluation.fractions):
            violated.append(
                f"fractions must lie in (0, 1], got {self.evaluation.fractions}"
            )
        if not self.evaluation.fractions:
            violated.append("at least one fraction is required")
        if self.evaluation.seeds < 1:
            violated.append("evaluation needs at least one seed")
        if self.log_every < 1:
            violated.append("log_every must be positive")
        if violated:
            raise ConfigError("invalid experiment config: " + "; ".join(violated))

        suite = self.suite()
        largest = max(spec.n_classes for spec in suite.tasks)
        if min(self.tasks.train_size, self.tasks.dev_size) < largest:
            raise ConfigError(
                f"train_size and dev_size must be at least {largest} (most classes)"
            )
        for spec in suite.tasks:
            if HEAD_SEPARATOR in spec.name:
                violated.append(f"task name {spec.name!r} contains {HEAD_SEPARATOR!r}")
            for label, model in models.items():
                if spec.seq_len > model.max_seq_len:
                    violated.append(
                        f"task {spec.name!r} seq_len {spec.seq_len} above "
                        f"{label} max_seq_len {model.max_seq_len}"
                    )
        if violated:
            raise ConfigError("invalid experiment config: " + "; ".join(violated))
        kinds = {variant.kind for variant in self.variants}
        if TeacherKind.SINGLE_TASK in kinds:
            self.single_task_spec(suite)
        if TeacherKind.MULTI_TASK in kinds:
            self.mtl_config(suite)
        return suite


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read a JSON experiment config; ``MITKD_OUT`` overrides ``output_dir``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read config {str(path)!r}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {str(path)!r} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"config {str(path)!r} must hold a JSON object")
    if os.environ.get(OUTPUT_ENV):
        data["output_dir"] = os.environ[OUTPUT_ENV]
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# Checkpoints


def _directory(model: EncoderModel) -> List[Tuple[str, Tensor]]:
    entries = list(model.params.items())
    for head in sorted(model.heads):
        for weight, tensor in sorted(model.heads[head].weights.items()):
            entries.append((model.head_param_name(head, weight), tensor))
    return entries


def save_checkpoint(
    model: EncoderModel, path: Union[str, Path], metadata: Optional[Mapping] = None
) -> Path:
    """Write ``MITK``, version byte, header length, JSON header, float64 payloads.

    Without explicit ``metadata`` the model's own (from a loaded checkpoint) is
    written, so load and save reproduce the file byte for byte.
    """
    path = Path(path)
    entries = _directory(model)
    header = {
        "config": model.config.to_dict(),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in entries],
        "heads": {
            name: {"kind": head.kind, "output_dim": head.output_dim}
            for name, head in sorted(model.heads.items())
        },
        "metadata": dict(model.metadata if metadata is None else metadata),
    }
    blob = _canonical_json(header).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    with partial.open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(bytes([CHECKPOINT_VERSION]))
        handle.write(_HEADER_LENGTH.pack(len(blob)))
        handle.write(blob)
        for _, tensor in entries:
            handle.write(np.ascontiguousarray(tensor.data, dtype=_FLOAT).tobytes())
    os.replace(partial, path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[EncoderModel, Dict]:
    """Load a checkpoint and its metadata."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as err:
        raise MissingPrerequisiteError(
            f"checkpoint {path} does not exist", path
        ) from err
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _PREAMBLE:
        raise CheckpointIntegrityError(f"{path}: truncated preamble")
    if raw[4] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {raw[4]!r}")
    (length,) = _HEADER_LENGTH.unpack_from(raw, 5)
    offset = _PREAMBLE + length
    if offset > len(raw):
        raise CheckpointIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREAMBLE:offset].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        directory = [(e["name"], tuple(e["shape"])) for e in header["tensors"]]
        head_meta = header["heads"]
        metadata = header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise CheckpointFormatError(f"{path}: malformed header: {err!r}") from err
    except ConfigError as err:
        raise CheckpointFormatError(f"{path}: bad model config: {err}") from err

    expected = sum(math.prod(shape) for _, shape in directory) * _FLOAT.itemsize
    available = len(raw) - offset
    if available < expected:
        raise CheckpointIntegrityError(
            f"{path}: payload truncated ({available} of {expected} bytes)"
        )
    if available > expected:
        raise CheckpointIntegrityError(
            f"{path}: {available - expected} trailing bytes after the payload"
        )
    tensors: Dict[str, Tensor] = {}
    for name, shape in directory:
        count = math.prod(shape)
        data = np.frombuffer(raw, dtype=_FLOAT, count=count, offset=offset)
        tensors[name] = Tensor(
            data.reshape(shape).astype(np.float64), requires_grad=True, name=name
        )
        offset += count * _FLOAT.itemsize

    params = {name: t for name, t in tensors.items() if not name.startswith("heads.")}
    heads = {}
    for head, meta in head_meta.items():
        prefix = EncoderModel.head_param_name(head, "")
        weights = {
            name[len(prefix) :]: t
            for name, t in tensors.items()
            if name.startswith(prefix) and HEAD_SEPARATOR not in name[len(prefix) :]
        }
        heads[head] = TaskHead(meta["kind"], meta["output_dim"], weights)
    try:
        model = EncoderModel(config, params, heads)
    except (ConfigError, DimensionError) as err:
        raise CheckpointFormatError(f"{path}: {err}") from err
    model.metadata = dict(metadata)
    return model, metadata


def load_checkpoint(path: Union[str, Path]) -> EncoderModel:
    """Load a checkpoint; its header metadata stays on ``model.metadata``."""
    return read_checkpoint(path)[0]


# --------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsRecord:
    stage: str
    step: int
    metrics: Dict[str, float]
    config_hash: str
    timestamp: float = field(default_factory=time.time)

    def to_json(self) -> str:
        return _canonical_json(asdict(self))


_METRICS_LOCK = threading.Lock()


def emit_metrics(record: MetricsRecord, path: Union[str, Path]) -> None:
    """Append ``record`` as one line to the JSONL file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _METRICS_LOCK, path.open("a", encoding="utf-8") as handle:
        handle.write(record.to_json() + "\n")


def read_jsonl(path: Union[str, Path]) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"{path} does not exist", path)
    with path.open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def _write_jsonl(path: Path, rows: Iterable[Mapping]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(_canonical_json(row) + "\n" for row in rows)
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# Experiment


class Experiment:
    """Stages of one experiment; every stage reads its inputs from disk."""

    def __init__(self, config: ExperimentConfig):
        self.suite = config.validate()
        self.config = config
        self.config_hash = config.config_hash()
        self.directory = Path(config.output_dir) / self.config_hash

    @functools.cached_property
    def chain(self) -> MarkovChain:
        return self.config.chain()

    @functools.cached_property
    def corpus(self) -> np.ndarray:
        cfg = self.config.corpus
        return generate_corpus(
            derive_seed(self.config.seed, "corpus"),
            cfg.num_sequences,
            cfg.seq_len,
            self.chain,
        )

    @functools.cached_property
    def probe(self) -> np.ndarray:
        cfg = self.config.corpus
        return generate_corpus(
            derive_seed(self.config.seed, "probe"),
            cfg.probe_sequences,
            cfg.seq_len,
            self.chain,
        )

    @property
    def probe_seed(self) -> int:
        return derive_seed(self.config.seed, "probe-mask")

    @functools.cached_property
    def datasets(self) -> Dict[str, Tuple[DatasetSplit, DatasetSplit]]:
        sizes = self.config.tasks
        return {
            spec.name: generate_task(spec, sizes.train_size, sizes.dev_size, self.chain)
            for spec in self.suite.tasks
        }

    def pretrain_path(self, teacher: str) -> Path:
        return self.directory / f"pretrain-{teacher}" / CHECKPOINT_NAME

    def teacher_path(self, variant: str) -> Path:
        return self.directory / f"teacher-{variant}" / CHECKPOINT_NAME

    def student_path(self, variant: str) -> Path:
        return self.directory / f"student-{variant}" / CHECKPOINT_NAME

    @property
    def metrics_path(self) -> Path:
        return self.directory / "metrics.jsonl"

    @property
    def runs_path(self) -> Path:
        return self.directory / "evaluate" / "runs.jsonl"

    @property
    def teacher_runs_path(self) -> Path:
        return self.directory / "evaluate" / "teacher_runs.jsonl"

    def prepare_directory(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        (self.directory / "config.json").write_text(
            json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def emit(self, stage: str, step: int, **metrics: float) -> None:
        record = MetricsRecord(stage, step, metrics, self.config_hash)
        emit_metrics(record, self.metrics_path)

    def curve(self, stage: str, steps: int) -> StepCallback:
        """Step callback recording the first, every ``log_every``-th and last step."""

        def on_step(step: int, loss: float, lr: float) -> None:
            last = step + 1 == steps
            if step == 0 or (step + 1) % self.config.log_every == 0 or last:
                self.emit(stage, step, loss=loss, lr=lr)

        return on_step

    @staticmethod
    def _require(path: Path) -> Tuple[EncoderModel, Dict]:
        if not path.exists():
            raise MissingPrerequisiteError(f"missing prerequisite {path}", path)
        return read_checkpoint(path)

    def _size_metrics(self, config: ModelConfig) -> Dict[str, float]:
        return {
            "parameters": parameter_count(config),
            "non_embedding_parameters": non_embedding_parameter_count(config),
        }

    def teacher_keys(self, variants: Optional[Sequence[str]] = None) -> List[str]:
        if variants:
            chosen = [self.config.variant(v) for v in variants]
        else:
            chosen = list(self.config.variants)
        return list(dict.fromkeys(v.teacher for v in chosen))

    # stages

    def run_pretrain(self, teacher: str) -> EncoderModel:
        if teacher not in self.config.teachers:
            raise ConfigError(f"unknown teacher shape {teacher!r}")
        self.prepare_directory()
        stage = f"pretrain-{teacher}"
        budget = self.config.pretrain
        model = init_model(
            self.config.teachers[teacher],
            derive_seed(self.config.seed, "init", teacher),
        )
        trained = pretrain(
            model,
            self.corpus,
            budget,
            derive_seed(self.config.seed, "pretrain", teacher),
            on_step=self.curve(stage, budget.steps),
        )
        probe_loss = mlm_probe_loss(trained, self.probe, self.probe_seed)
        self.emit(
            stage,
            budget.steps,
            mlm_probe_loss=probe_loss,
            **self._size_metrics(trained.config),
        )
        save_checkpoint(trained, self.pretrain_path(teacher), {"stage": stage})
        return trained

    def teacher_variant(self, name: str, model: EncoderModel) -> TeacherVariant:
        variant = self.config.variant(name)
        return TeacherVariant(
            kind=variant.kind,
            model=model,
            name=variant.name,
            task=self.config.single_task_spec(self.suite)
            if variant.kind is TeacherKind.SINGLE_TASK
            else None,
            mtl_config=self.config.mtl_config(self.suite)
            if variant.kind is TeacherKind.MULTI_TASK
            else None,
        )

    def run_prepare_teacher(self, name: str) -> TeacherVariant:
        variant = self.config.variant(name)
        pretrained, _ = self._require(self.pretrain_path(variant.teacher))
        self.prepare_directory()
        stage = f"teacher-{name}"
        seed = derive_seed(self.config.seed, "teacher", name)
        prepared = self.teacher_variant(name, pretrained)

        if variant.kind is TeacherKind.VANILLA:
            tasks: List[TaskSpec] = []
            model = pretrained.copy()
        elif variant.kind is TeacherKind.SINGLE_TASK:
            spec = prepared.task
            tasks = [spec]
            budget = TrainBudget(
                self.config.single_task.steps,
                self.config.single_task.batch_size,
                self.config.single_task.peak_lr,
            )
            model = single_task_train(
                attach_task_heads(pretrained.copy(), tasks, seed),
                spec,
                budget,
                self.datasets[spec.name][0],
                seed,
                on_step=self.curve(stage, budget.steps),
            )
        else:
            mtl = prepared.mtl_config
            tasks = list(mtl.tasks)
            model = mtl_train(
                attach_task_heads(pretrained.copy(), tasks, seed),
                mtl,
                {spec.name: self.datasets[spec.name][0] for spec in tasks},
                seed,
                on_step=self.curve(stage, mtl.steps),
            )
        prepared.model = model

        if tasks:
            prepared.metrics.update(
                forgetting_probe(pretrained, model, self.probe, self.probe_seed)
            )
            for spec in tasks:
                accuracy = dev_accuracy(model, spec.name, self.datasets[spec.name][1])
                prepared.metrics[f"dev_accuracy/{spec.name}"] = accuracy
                logger.info(
                    "teacher %s dev accuracy on %s: %.4f", name, spec.name, accuracy
                )
        self.emit(stage, 0, **prepared.metrics, **self._size_metrics(model.config))
        save_checkpoint(
            model,
            self.teacher_path(name),
            {
                "kind": variant.kind.value,
                "variant": name,
                "tasks": [spec.name for spec in tasks],
            },
        )
        return prepared

    def run_distill(self, name: str) -> EncoderModel:
        variant = self.config.variant(name)
        teacher_model, metadata = self._require(self.teacher_path(name))
        if metadata.get("kind") != variant.kind.value:
            raise ContractError(
                f"teacher checkpoint of {name!r} "
                f"was prepared as {metadata.get('kind')!r}"
            )
        self.prepare_directory()
        stage = f"student-{name}"
        losses: List[float] = []
        record = self.curve(stage, variant.distill.steps)

        def on_step(step: int, loss: float, lr: float) -> None:
            losses.append(loss)
            record(step, loss, lr)

        student = distill(
            self.teacher_variant(name, teacher_model),
            self.config.student,
            self.corpus,
            variant.distill,
            derive_seed(self.config.seed, "distill"),
            on_step=on_step,
        )
        self.emit(
            stage,
            variant.distill.steps,
            initial_loss=losses[0],
            final_loss=losses[-1],
            **self._size_metrics(student.config),
        )
        save_checkpoint(
            student,
            self.student_path(name),
            {"provenance": name, "kind": variant.kind.value},
        )
        return student

    def run_evaluate(self, jobs: int = 1) -> List[RunResult]:
        students = {}
        for variant in self.config.variants:
            model, metadata = self._require(self.student_path(variant.name))
            if metadata.get("provenance") != variant.name:
                raise ContractError(
                    f"student checkpoint of {variant.name!r} records provenance "
                    f"{metadata.get('provenance')!r}"
                )
            students[variant.name] = model
        self.prepare_directory()
        evaluation = self.config.evaluation
        summary = run_protocol(
            students,
            self.suite,
            self.datasets,
            self.config.finetune,
            evaluation.fractions,
            evaluation.seeds,
            jobs=jobs,
        )
        rows = [
            dict(r.to_dict(), config_hash=self.config_hash) for r in summary.results
        ]
        _write_jsonl(self.runs_path, rows)
        for (variant, protocol), stats in sorted(summary.cells.items()):
            metrics = {f"{protocol}/mean": stats.mean, f"{protocol}/sd": stats.sd}
            self.emit(f"evaluate-{variant}", 0, **metrics)

        if evaluation.evaluate_teachers:
            teacher_rows = []
            for variant in self.config.variants:
                teacher, _ = self._require(self.teacher_path(variant.name))
                teacher_summary = run_protocol(
                    {TEACHER_PROVENANCE_PREFIX + variant.name: teacher.without_heads()},
                    self.suite,
                    self.datasets,
                    self.config.finetune,
                    evaluation.fractions,
                    evaluation.seeds,
                    jobs=jobs,
                )
                teacher_rows.extend(
                    dict(r.to_dict(), config_hash=self.config_hash)
                    for r in teacher_summary.results
                )
            _write_jsonl(self.teacher_runs_path, teacher_rows)
        return summary.results

    def run_report(self) -> List[Path]:
        return render_report(self.directory)

    def run_all(self, jobs: int = 1) -> List[Path]:
        for teacher in self.teacher_keys():
            self.run_pretrain(teacher)
        for variant in self.config.variants:
            self.run_prepare_teacher(variant.name)
        for variant in self.config.variants:
            self.run_distill(variant.name)
        self.run_evaluate(jobs)
        return self.run_report()


# --------------------------------------------------------------------------
# Report


CSV_COLUMNS = (
    "provenance",
    "task",
    "protocol",
    "fraction",
    "seed",
    "dev_accuracy",
    "majority_floor",
    "selected_hparams",
)


def _results_from_rows(
    rows: Sequence[Mapping], expected_hash: str, path: Path
) -> List[RunResult]:
    hashes = {row.get("config_hash") for row in rows}
    if hashes != {expected_hash}:
        raise ContractError(
            f"{path}: refusing to aggregate records of config hashes "
            f"{sorted(map(str, hashes))}, expected {expected_hash}"
        )
    return [
        RunResult.from_dict({k: v for k, v in row.items() if k != "config_hash"})
        for row in rows
    ]


def check_protocol(
    config: ExperimentConfig, suite: TaskSuite, results: Sequence[RunResult]
):
    """Re-check suite hygiene, fair comparison and seed accounting."""
    out_family = {spec.name for spec in suite.out_family}
    kinds = {variant.kind for variant in config.variants}
    if TeacherKind.MULTI_TASK in kinds:
        leaked = {spec.name for spec in config.mtl_config(suite).tasks} & out_family
        if leaked:
            raise ContractError(f"out-family tasks {sorted(leaked)} used in MTL")
    if (
        TeacherKind.SINGLE_TASK in kinds
        and config.single_task_spec(suite).name in out_family
    ):
        raise ContractError("single-task teacher trained on an out-family task")
    variants = [variant.name for variant in config.variants]
    found = sorted({r.provenance for r in results})
    if found != sorted(variants):
        raise ContractError(f"results cover variants {found}, configured {variants}")
    expected = (
        len(variants)
        * len(suite.tasks)
        * len(config.evaluation.fractions)
        * config.evaluation.seeds
    )
    if len(results) != expected:
        raise ContractError(
            f"seed accounting: {len(results)} results, expected {expected}"
        )


def _write_csv(path: Path, results: Sequence[RunResult]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for result in results:
            row = result.to_dict()
            row["selected_hparams"] = _canonical_json(row["selected_hparams"])
            writer.writerow({key: row[key] for key in CSV_COLUMNS})


def render_report(experiment_dir: Union[str, Path]) -> List[Path]:
    """Write ``report/runs.csv`` and ``report/summary.txt`` from stored results."""
    directory = Path(experiment_dir)
    config_path = directory / "config.json"
    if not config_path.exists():
        raise MissingPrerequisiteError(
            f"missing prerequisite {config_path}", config_path
        )
    data = json.loads(config_path.read_text(encoding="utf-8"))
    config = ExperimentConfig.from_dict(data)
    config_hash = config.config_hash()
    suite = config.validate()

    runs_path = directory / "evaluate" / "runs.jsonl"
    results = _results_from_rows(read_jsonl(runs_path), config_hash, runs_path)
    check_protocol(config, suite, results)
    summary = summarize(results)

    report_dir = directory / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / "runs.csv"
    _write_csv(csv_path, results)

    sections = [f"experiment {config_hash}", "", format_summary(summary)]
    if len(summary.variants) > 1:
        sections += ["", format_comparison(compare_variants(summary))]
    teacher_runs = directory / "evaluate" / "teacher_runs.jsonl"
    if teacher_runs.exists():
        teachers = _results_from_rows(
            read_jsonl(teacher_runs), config_hash, teacher_runs
        )
        sections += ["", "teacher reference rows", format_summary(summarize(teachers))]
    summary_path = report_dir / "summary.txt"
    summary_path.write_text("\n".join(sections) + "\n", encoding="utf-8")
    logger.info("report written to %s", report_dir)
    return [csv_path, summary_path]


REFERENCE_VARIANTS = DEFAULT_VARIANTS + (
    VariantConfig("vanilla-large", TeacherKind.VANILLA, teacher="large"),
)


def reference_config(**overrides) -> ExperimentConfig:
    """Desk reference: base and large teachers, four variants."""
    values = {
        "teachers": {"base": TEACHER_CONFIG, "large": LARGE_TEACHER_CONFIG},
        "variants": REFERENCE_VARIANTS,
    }
    values.update(overrides)
    return ExperimentConfig(**values)
