"""Student finetuning and the in-domain / out-domain / low-resource protocol."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mitkd import ConfigError, ContractError
from mitkd.corpus import DatasetSplit, TaskSpec, TaskSuite, derive_seed, subsample
from mitkd.model import EncoderModel, classification_loss, classify
from mitkd.mtl import BATCH_STREAM, DROPOUT_STREAM, TrainBudget, run_training

logger: logging.Logger = logging.getLogger(__name__)

IN_DOMAIN = "in-domain"
OUT_DOMAIN = "out-domain"
LOW_RESOURCE = "low-resource"
DEFAULT_FRACTIONS = (0.01, 0.10, 0.50, 1.0)
DEFAULT_SEEDS = 4
EVAL_BATCH = 128


@dataclass(frozen=True)
class FinetuneHparams:
    """Grids searched per finetuning run; selection is by dev accuracy."""

    epochs: Tuple[int, ...] = (3, 5)
    batch_sizes: Tuple[int, ...] = (16, 32)
    learning_rates: Tuple[float, ...] = (1e-4, 3e-4, 1e-3)

    def __post_init__(self):
        for name in ("epochs", "batch_sizes", "learning_rates"):
            grid = tuple(getattr(self, name))
            object.__setattr__(self, name, grid)
            if not grid:
                raise ConfigError(f"finetuning grid {name} is empty")
        if min(self.epochs) < 1 or min(self.batch_sizes) < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if min(self.learning_rates) <= 0.0:
            raise ConfigError("learning rates must be positive")

    def grid(self) -> List[Tuple[int, int, float]]:
        return list(
            itertools.product(self.epochs, self.batch_sizes, self.learning_rates)
        )


@dataclass(frozen=True)
class RunResult:
    provenance: str
    task: str
    protocol: str
    fraction: float
    seed: int
    dev_accuracy: float
    selected_hparams: Dict[str, Union[int, float, str]] = field(default_factory=dict)
    majority_floor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dev_accuracy <= 1.0:
            raise ContractError(f"dev accuracy {self.dev_accuracy!r} outside [0, 1]")

    @property
    def at_floor(self) -> bool:
        return self.dev_accuracy <= self.majority_floor + 1e-12

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunResult":
        return cls(**data)


def protocol_label(in_family: bool, fraction: float) -> str:
    if fraction < 1.0:
        return f"{LOW_RESOURCE}@{fraction:g}"
    return IN_DOMAIN if in_family else OUT_DOMAIN


def dev_accuracy(model: EncoderModel, head: str, split: DatasetSplit) -> float:
    """Fraction of ``split`` whose argmax class equals the label."""
    if not len(split):
        raise ContractError("cannot score an empty split")
    correct = 0
    for start in range(0, len(split), EVAL_BATCH):
        indices = range(start, min(start + EVAL_BATCH, len(split)))
        ids, mask, labels = split.batch(indices, model.config.max_seq_len)
        predicted = classify(model, head, ids, mask).argmax(axis=-1)
        correct += int((predicted == labels).sum())
    return correct / len(split)


def _train_candidate(
    student: EncoderModel,
    task: TaskSpec,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
    train: DatasetSplit,
) -> EncoderModel:
    model = student.without_heads()
    model.add_classification_head(task.name, task.n_classes, seed)
    per_epoch = math.ceil(len(train) / batch_size)
    rng = np.random.default_rng([seed, BATCH_STREAM])
    dropout_rng = np.random.default_rng([seed, DROPOUT_STREAM])
    orders = [rng.permutation(len(train)) for _ in range(epochs)]

    def next_loss(step):
        epoch, offset = divmod(step, per_epoch)
        indices = orders[epoch][offset * batch_size : (offset + 1) * batch_size]
        ids, mask, labels = train.batch(indices, model.config.max_seq_len)
        loss = classification_loss(model, task.name, ids, mask, labels, dropout_rng)
        return loss, task.name

    budget = TrainBudget(epochs * per_epoch, batch_size, learning_rate)
    return run_training(model, f"finetune-{task.name}", budget, next_loss)


def finetune_student(
    student: EncoderModel,
    task: TaskSpec,
    hparams: FinetuneHparams,
    seed: int,
    train: DatasetSplit,
    dev: DatasetSplit,
    provenance: str = "",
    protocol: Optional[str] = None,
    fraction: float = 1.0,
) -> RunResult:
    """Grid-search finetuning of a fresh head on ``task``; best dev accuracy wins.

    Only trained candidates are selected. The dev split's majority-class
    fraction is recorded alongside so reports can flag results at the floor.
    """
    if task.name in student.heads:
        raise ContractError(f"student already has a head for task {task.name!r}")
    if not len(train):
        raise ContractError(f"no training examples for task {task.name!r}")
    floor = dev.majority_fraction()
    best_accuracy = -1.0
    best: Dict[str, Union[int, float, str]] = {}
    for epochs, batch_size, learning_rate in hparams.grid():
        model = _train_candidate(
            student, task, epochs, batch_size, learning_rate, seed, train
        )
        accuracy = dev_accuracy(model, task.name, dev)
        logger.debug(
            "%s %s epochs=%d batch=%d lr=%g: %.4f",
            provenance,
            task.name,
            epochs,
            batch_size,
            learning_rate,
            accuracy,
        )
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best = {
                "epochs": epochs,
                "batch_size": batch_size,
                "learning_rate": learning_rate,
            }
    return RunResult(
        provenance=provenance,
        task=task.name,
        protocol=protocol or protocol_label(True, fraction),
        fraction=fraction,
        seed=seed,
        dev_accuracy=best_accuracy,
        selected_hparams=best,
        majority_floor=floor,
    )


# --------------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True)
class CellStats:
    mean: float
    sd: float
    count: int


@dataclass
class Summary:
    """All run results plus their per (variant, protocol) statistics.

    Means are over every result of a cell. Standard deviations are seed-level:
    the sample deviation of the per-seed means (0 for a single seed).
    """

    results: List[RunResult]
    cells: Dict[Tuple[str, str], CellStats] = field(default_factory=dict)
    ordering: List[str] = field(default_factory=list)

    @property
    def variants(self) -> List[str]:
        return list(dict.fromkeys(variant for variant, _ in self.cells))

    @property
    def protocols(self) -> List[str]:
        found = dict.fromkeys(protocol for _, protocol in self.cells)
        fixed = [p for p in (IN_DOMAIN, OUT_DOMAIN) if p in found]
        low = sorted(
            (p for p in found if p not in fixed), key=lambda p: float(p.split("@")[1])
        )
        return fixed + low

    def mean(self, variant: str, protocol: str) -> float:
        return self.cells[(variant, protocol)].mean


def summarize(results: Sequence[RunResult]) -> Summary:
    """Aggregate results into a :class:`Summary`; a pure function of ``results``."""
    grouped: Dict[Tuple[str, str], List[RunResult]] = {}
    for result in results:
        grouped.setdefault((result.provenance, result.protocol), []).append(result)
    cells = {}
    for key, members in grouped.items():
        per_seed: Dict[int, List[float]] = {}
        for result in members:
            per_seed.setdefault(result.seed, []).append(result.dev_accuracy)
        seed_means = [float(np.mean(v)) for _, v in sorted(per_seed.items())]
        sd = float(np.std(seed_means, ddof=1)) if len(seed_means) > 1 else 0.0
        accuracies = [r.dev_accuracy for r in members]
        mean = math.fsum(accuracies) / len(accuracies)
        cells[key] = CellStats(mean, sd, len(members))
    summary = Summary(list(results), cells)
    summary.ordering = sorted(
        summary.variants,
        key=lambda v: (
            (v, OUT_DOMAIN) not in cells,
            -cells[(v, OUT_DOMAIN)].mean if (v, OUT_DOMAIN) in cells else 0.0,
            v,
        ),
    )
    return summary


def _seed_list(seeds: Union[int, Sequence[int]]) -> List[int]:
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(
            f"seeds must be a non-empty list of distinct values, got {seeds}"
        )
    return seeds


def run_protocol(
    students: Mapping[str, Optional[EncoderModel]],
    suite: TaskSuite,
    datasets: Mapping[str, Tuple[DatasetSplit, DatasetSplit]],
    hparams: FinetuneHparams,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seeds: Union[int, Sequence[int]] = DEFAULT_SEEDS,
    jobs: int = 1,
    on_result: Optional[Callable[[RunResult], None]] = None,
) -> Summary:
    """Finetune every student on every task, fraction and seed.

    Full-data runs of in-family tasks are in-domain, of out-family tasks
    out-domain; smaller fractions of either family are low-resource.
    """
    missing = [name for name, model in students.items() if model is None]
    if missing or not students:
        raise ConfigError(f"no student for variants {missing}")
    configs = {model.config for model in students.values()}
    if len(configs) > 1:
        raise ConfigError(
            "students must share one model config for a fair comparison, got "
            + ", ".join(str(c) for c in configs)
        )
    absent = [task.name for task in suite.tasks if task.name not in datasets]
    if absent:
        raise ConfigError(f"no datasets for tasks {absent}")
    if any(not 0.0 < f <= 1.0 for f in fractions) or not fractions:
        raise ConfigError(f"fractions must lie in (0, 1], got {list(fractions)}")
    seed_list = _seed_list(seeds)

    cells = [
        (variant, task, fraction, seed)
        for variant in students
        for task in suite.tasks
        for fraction in fractions
        for seed in seed_list
    ]

    def run_cell(cell) -> RunResult:
        variant, task, fraction, seed = cell
        train, dev = datasets[task.name]
        subset = subsample(train, fraction, derive_seed(seed, "subsample", task.name))
        result = finetune_student(
            students[variant],
            task,
            hparams,
            derive_seed(seed, "finetune", task.name, fraction),
            subset,
            dev,
            provenance=variant,
            protocol=protocol_label(suite.is_in_family(task.name), fraction),
            fraction=fraction,
        )
        result = dataclasses.replace(result, seed=seed)
        logger.info(
            "%s %s %s seed %d: %.4f",
            variant,
            task.name,
            result.protocol,
            seed,
            result.dev_accuracy,
        )
        if on_result is not None:
            on_result(result)
        return result

    logger.info("running %d protocol cells with %d job(s)", len(cells), jobs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(cell) for cell in cells]

    expected = len(students) * len(suite.tasks) * len(fractions) * len(seed_list)
    if len(results) != expected:
        raise ContractError(
            f"seed accounting: {len(results)} results, expected {expected}"
        )
    return summarize(results)


# --------------------------------------------------------------------------
# Comparison


@dataclass(frozen=True)
class PairComparison:
    first: str
    second: str
    protocol: str
    difference: float
    first_sd: float
    second_sd: float

    @property
    def pooled_sd(self) -> float:
        return math.sqrt((self.first_sd**2 + self.second_sd**2) / 2.0)

    @property
    def inconclusive(self) -> bool:
        return abs(self.difference) <= self.pooled_sd


@dataclass
class ComparisonReport:
    ordering: List[str]
    pairs: List[PairComparison]
    floor_cells: List[Tuple[str, str]]

    def pair(self, first: str, second: str, protocol: str) -> PairComparison:
        for item in self.pairs:
            if (item.first, item.second, item.protocol) == (first, second, protocol):
                return item
        raise KeyError(f"no comparison of {first!r} and {second!r} on {protocol!r}")


def floor_cells(results: Sequence[RunResult]) -> List[Tuple[str, str]]:
    """(protocol, task) cells where every variant and seed sits at the floor."""
    grouped: Dict[Tuple[str, str], List[RunResult]] = {}
    for result in results:
        grouped.setdefault((result.protocol, result.task), []).append(result)
    return sorted(
        key
        for key, members in grouped.items()
        if all(r.at_floor for r in members)
    )


def compare_variants(summary: Summary) -> ComparisonReport:
    """Pairwise mean differences in ordering order, per shared protocol."""
    if len(summary.variants) < 2:
        raise ContractError("comparison needs at least two variants")
    pairs = []
    for first, second in itertools.combinations(summary.ordering, 2):
        for protocol in summary.protocols:
            if (first, protocol) not in summary.cells or (
                second,
                protocol,
            ) not in summary.cells:
                continue
            a, b = summary.cells[(first, protocol)], summary.cells[(second, protocol)]
            difference = a.mean - b.mean
            pairs.append(
                PairComparison(first, second, protocol, difference, a.sd, b.sd)
            )
    return ComparisonReport(list(summary.ordering), pairs, floor_cells(summary.results))


def format_summary(summary: Summary) -> str:
    """Plain-text table of variant × protocol means (± seed-level sd)."""
    protocols = summary.protocols
    width = max([len("variant")] + [len(v) for v in summary.variants]) + 2
    header = "variant".ljust(width) + "".join(p.rjust(20) for p in protocols)
    lines = [header, "-" * len(header)]
    for variant in summary.ordering:
        row = variant.ljust(width)
        for protocol in protocols:
            stats = summary.cells.get((variant, protocol))
            text = "-"
            if stats is not None:
                text = f"{100 * stats.mean:.1f} ± {100 * stats.sd:.1f}"
            row += text.rjust(20)
        lines.append(row)
    return "\n".join(lines)


def format_comparison(report: ComparisonReport) -> str:
    lines = ["ordering (out-domain mean): " + " > ".join(report.ordering), ""]
    for pair in report.pairs:
        flag = "inconclusive" if pair.inconclusive else "conclusive"
        lines.append(
            f"{pair.first} vs {pair.second} [{pair.protocol}]: "
            f"{100 * pair.difference:+.2f} "
            f"(pooled sd {100 * pair.pooled_sd:.2f}) {flag}"
        )
    if report.floor_cells:
        lines.append("")
        lines.append("cells where every variant is at the majority-class floor:")
        lines.extend(f"  {protocol} {task}" for protocol, task in report.floor_cells)
    return "\n".join(lines)
