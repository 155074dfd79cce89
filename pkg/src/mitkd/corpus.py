"""Deterministic synthetic corpus and classification tasks.

Unlabeled sequences come from a first-order Markov chain over 64 content
symbols whose transition matrix is derived from a seed. Classification tasks
draw sequences from the same chain and label them by a family rule. Every
generator here is a pure function of its seeds and parameters.
"""

from __future__ import annotations

import enum
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mitkd import ConfigError, ContractError, GenerationError

logger: logging.Logger = logging.getLogger(__name__)

# Special token ids, stable across the whole package.
PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
NUM_SPECIAL_TOKENS = 4
NUM_CONTENT_SYMBOLS = 64
DEFAULT_VOCAB_SIZE = NUM_SPECIAL_TOKENS + NUM_CONTENT_SYMBOLS

MASK_RATE = 0.15
CHAIN_CONCENTRATION = 0.2
CHAIN_UNIFORM_MIX = 0.1
MAX_DRAWS_PER_EXAMPLE = 200
DRAW_CHUNK = 256

TRAIN = "train"
DEV = "dev"

Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class Vocab:
    """Token id layout: ids 0-3 are PAD, CLS, SEP, MASK; content follows."""

    size: int = DEFAULT_VOCAB_SIZE

    pad: int = PAD_ID
    cls: int = CLS_ID
    sep: int = SEP_ID
    mask: int = MASK_ID

    def __post_init__(self):
        if self.size <= NUM_SPECIAL_TOKENS:
            raise ConfigError(
                f"vocab_size {self.size} leaves no room for content symbols"
            )

    @property
    def content_ids(self) -> range:
        return range(NUM_SPECIAL_TOKENS, self.size)

    @staticmethod
    def is_special(token_ids) -> np.ndarray:
        return np.asarray(token_ids) < NUM_SPECIAL_TOKENS


VOCAB = Vocab()


class MarkovChain:
    """First-order chain over content symbols (indices 0..n-1, not token ids)."""

    def __init__(self, transition: np.ndarray):
        transition = np.asarray(transition, dtype=np.float64)
        if transition.ndim != 2 or transition.shape[0] != transition.shape[1]:
            raise ConfigError(
                f"transition matrix must be square, got {transition.shape}"
            )
        if not np.allclose(transition.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError("transition matrix rows must sum to 1")
        self.transition = transition
        self._cdf = np.cumsum(transition, axis=1)
        self._stationary: Optional[np.ndarray] = None

    @classmethod
    def from_seed(
        cls, seed: int, num_symbols: int = NUM_CONTENT_SYMBOLS
    ) -> "MarkovChain":
        rng = np.random.default_rng(seed)
        peaked = rng.dirichlet(
            np.full(num_symbols, CHAIN_CONCENTRATION), size=num_symbols
        )
        mixed = (1.0 - CHAIN_UNIFORM_MIX) * peaked + CHAIN_UNIFORM_MIX / num_symbols
        return cls(mixed / mixed.sum(axis=1, keepdims=True))

    @property
    def num_symbols(self) -> int:
        return self.transition.shape[0]

    def stationary(
        self, tolerance: float = 1e-15, max_iter: int = 100_000
    ) -> np.ndarray:
        """Stationary distribution by power iteration."""
        if self._stationary is None:
            dist = np.full(self.num_symbols, 1.0 / self.num_symbols)
            for _ in range(max_iter):
                updated = dist @ self.transition
                if np.abs(updated - dist).max() < tolerance:
                    dist = updated
                    break
                dist = updated
            self._stationary = dist / dist.sum()
        return self._stationary

    def sample(
        self, rng: np.random.Generator, num_sequences: int, length: int
    ) -> np.ndarray:
        """``[num_sequences × length]`` content token ids, started in stationarity."""
        last = self.num_symbols - 1
        start_cdf = np.cumsum(self.stationary())
        states = np.minimum(np.searchsorted(start_cdf, rng.random(num_sequences)), last)
        out = np.empty((num_sequences, length), dtype=np.int64)
        out[:, 0] = states
        for position in range(1, length):
            draws = rng.random(num_sequences)
            states = np.minimum((self._cdf[states] < draws[:, None]).sum(axis=1), last)
            out[:, position] = states
        return out + VOCAB.content_ids.start


def frame(content: Sequence[int]) -> Tuple[int, ...]:
    return (CLS_ID, *(int(t) for t in content), SEP_ID)


def generate_corpus(
    seed: int,
    num_sequences: int,
    seq_len: int,
    chain: Optional[MarkovChain] = None,
) -> np.ndarray:
    """``[num_sequences × seq_len]`` framed sequences (CLS, content, SEP).

    Without ``chain`` the transition matrix is derived from ``seed`` as well.
    """
    if num_sequences < 1:
        raise ContractError(f"num_sequences must be at least 1, got {num_sequences}")
    if seq_len < 3:
        raise ContractError(f"seq_len must leave room for content, got {seq_len}")
    chain = chain or MarkovChain.from_seed(seed)
    rng = np.random.default_rng([seed, 0])
    content = chain.sample(rng, num_sequences, seq_len - 2)
    corpus = np.empty((num_sequences, seq_len), dtype=np.int64)
    corpus[:, 0] = CLS_ID
    corpus[:, 1:-1] = content
    corpus[:, -1] = SEP_ID
    return corpus


# --------------------------------------------------------------------------
# Tasks


class TaskFamily(str, enum.Enum):
    PATTERN_PRESENCE = "pattern-presence"
    SYMBOL_PARITY = "symbol-parity"
    LEXICON_MAJORITY = "lexicon-majority"
    PAIR_SUBSEQUENCE = "pair-subsequence"


@dataclass(frozen=True)
class TaskSpec:
    """A parameterised classification task.

    ``params`` per family (all content token ids):
    pattern-presence ``(s1, s2, ...)``; symbol-parity ``(s,)``;
    lexicon-majority ``((a, b, ...), (c, d, ...), ...)`` one lexicon per class;
    pair-subsequence ``(a, b)``.
    """

    name: str
    family: TaskFamily
    params: Tuple
    n_classes: int
    domain_tag: str
    seed: int
    seq_len: int = 32

    def __post_init__(self):
        object.__setattr__(self, "family", TaskFamily(self.family))
        object.__setattr__(self, "params", _freeze(self.params))
        problem = self._problem()
        if problem:
            raise ConfigError(f"invalid task {self.name!r}: {problem}")

    def _problem(self) -> Optional[str]:
        if self.n_classes < 2:
            return "n_classes must be at least 2"
        if self.seq_len < 4:
            return "seq_len must be at least 4"
        symbols = list(_flatten(self.params))
        if not symbols or VOCAB.is_special(symbols).any():
            return "params must be non-empty content token ids"
        if self.family is TaskFamily.PATTERN_PRESENCE:
            if self.n_classes != 2 or len(self.params) > self.seq_len - 2:
                return "pattern-presence is binary with a pattern that fits a sequence"
        elif self.family is TaskFamily.SYMBOL_PARITY:
            if self.n_classes != 2 or len(self.params) != 1:
                return "symbol-parity is binary over exactly one symbol"
        elif self.family is TaskFamily.LEXICON_MAJORITY:
            if len(self.params) != self.n_classes:
                return "lexicon-majority needs one lexicon per class"
            if len(set(symbols)) != len(symbols):
                return "lexicons must be disjoint"
        elif self.family is TaskFamily.PAIR_SUBSEQUENCE:
            if (
                self.n_classes != 2
                or len(self.params) != 2
                or len(set(self.params)) != 2
            ):
                return "pair-subsequence is binary over two distinct symbols"
        return None

    @property
    def param_key(self) -> Tuple:
        return (self.family.value, self.params)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "family": self.family.value,
            "params": _thaw(self.params),
            "n_classes": self.n_classes,
            "domain_tag": self.domain_tag,
            "seed": self.seed,
            "seq_len": self.seq_len,
        }

    @classmethod
    def from_dict(cls, data) -> "TaskSpec":
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(f"invalid task entry {data!r}: {err}") from err


def _freeze(value):
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return int(value)


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


def _flatten(value) -> Iterable[int]:
    if isinstance(value, tuple):
        for item in value:
            yield from _flatten(item)
    else:
        yield value


def label_for(spec: TaskSpec, content: Sequence[int]) -> int:
    """Apply the family rule to a content sequence (no CLS/SEP/PAD)."""
    tokens = [int(t) for t in content]
    if spec.family is TaskFamily.PATTERN_PRESENCE:
        width = len(spec.params)
        return int(
            any(
                tuple(tokens[i : i + width]) == spec.params
                for i in range(len(tokens) - width + 1)
            )
        )
    if spec.family is TaskFamily.SYMBOL_PARITY:
        return tokens.count(spec.params[0]) % 2
    if spec.family is TaskFamily.LEXICON_MAJORITY:
        counts = [sum(tokens.count(s) for s in lexicon) for lexicon in spec.params]
        return int(np.argmax(counts))
    first, second = spec.params
    if first not in tokens:
        return 0
    return int(second in tokens[tokens.index(first) + 1 :])


@dataclass(frozen=True)
class Example:
    token_ids: Tuple[int, ...]
    label: int


@dataclass(frozen=True)
class DatasetSplit:
    examples: Tuple[Example, ...]
    role: str = TRAIN

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    def majority_fraction(self) -> float:
        """Accuracy of always predicting the most frequent label."""
        if not self.examples:
            return 0.0
        return float(np.bincount(self.labels()).max() / len(self.examples))

    def batch(
        self, indices: Sequence[int], seq_len: int
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded ``(token_ids, attention_mask, labels)`` for ``indices``."""
        chosen = [self.examples[i] for i in indices]
        ids, mask = pad_batch([e.token_ids for e in chosen], seq_len)
        return ids, mask, np.array([e.label for e in chosen], dtype=np.int64)


def pad_batch(sequences: Sequence[Sequence[int]], seq_len: Optional[int] = None):
    """Right-pad sequences with PAD; returns ``(ids, attention_mask)``."""
    longest = max(len(s) for s in sequences)
    width = longest if seq_len is None else seq_len
    if longest > width:
        raise ContractError(f"sequence of length {longest} exceeds {width}")
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
    return ids, ids != PAD_ID


def _balanced_examples(
    spec: TaskSpec, chain: MarkovChain, size: int, stream: int
) -> List[Example]:
    rng = np.random.default_rng([spec.seed, stream])
    quotas = _initial_quotas(spec, size)
    max_content = spec.seq_len - 2
    min_content = max(2, max_content // 2)
    accepted: List[Example] = []
    draws = 0
    budget = MAX_DRAWS_PER_EXAMPLE * size
    while len(accepted) < size:
        if draws >= budget:
            raise GenerationError(
                f"task {spec.name!r}: could not balance {spec.n_classes} classes "
                f"after {draws} draws (accepted per class: "
                f"{[q0 - q for q0, q in zip(_initial_quotas(spec, size), quotas)]})"
            )
        lengths = rng.integers(min_content, max_content + 1, size=DRAW_CHUNK)
        contents = chain.sample(rng, DRAW_CHUNK, max_content)
        for length, content in zip(lengths, contents):
            draws += 1
            content = content[:length]
            label = label_for(spec, content)
            if quotas[label] > 0:
                quotas[label] -= 1
                accepted.append(Example(frame(content), label))
                if len(accepted) == size:
                    break
    order = rng.permutation(size)
    return [accepted[i] for i in order]


def _initial_quotas(spec: TaskSpec, size: int) -> List[int]:
    return [
        size // spec.n_classes + (c < size % spec.n_classes)
        for c in range(spec.n_classes)
    ]


def generate_task(
    spec: TaskSpec,
    train_size: int,
    dev_size: int,
    chain: Optional[MarkovChain] = None,
) -> Tuple[DatasetSplit, DatasetSplit]:
    """Label-balanced train and dev splits drawn from disjoint generator streams."""
    if min(train_size, dev_size) < spec.n_classes:
        raise ContractError(
            f"split sizes ({train_size}, {dev_size}) must be at least "
            f"n_classes={spec.n_classes}"
        )
    chain = chain or MarkovChain.from_seed(spec.seed)
    train = DatasetSplit(tuple(_balanced_examples(spec, chain, train_size, 0)), TRAIN)
    dev = DatasetSplit(tuple(_balanced_examples(spec, chain, dev_size, 1)), DEV)
    logger.debug(
        "generated task %s: %d train / %d dev", spec.name, train_size, dev_size
    )
    return train, dev


def subsample(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Seeded shuffle, then the first ``max(1, floor(n * fraction))`` examples.

    With one seed the smaller fractions are prefixes of the larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction!r}")
    count = max(1, math.floor(len(split) * fraction + 1e-9))
    order = np.random.default_rng(seed).permutation(len(split))
    return DatasetSplit(tuple(split.examples[i] for i in order[:count]), split.role)


# --------------------------------------------------------------------------
# Masked language modelling


@dataclass(frozen=True)
class MaskedBatch:
    """Padded masked sequences and the positions to predict."""

    token_ids: np.ndarray
    attention_mask: np.ndarray
    target_rows: np.ndarray
    target_positions: np.ndarray
    target_ids: np.ndarray

    @property
    def num_targets(self) -> int:
        return int(self.target_ids.size)


def mask_tokens(
    sequence: Sequence[int],
    seed: Seed,
    rate: float = MASK_RATE,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style masking of content positions.

    Each content position is selected with probability ``rate``; selected
    positions become MASK (80%), a random content symbol (10%) or stay (10%).
    Returns ``(masked_sequence, target_positions, target_ids)``.
    """
    tokens = np.asarray(sequence, dtype=np.int64)
    framed = tokens.ndim == 1 and tokens.size >= 2 and tokens[0] == CLS_ID
    if not framed or SEP_ID not in tokens:
        raise ContractError("sequence must be framed with CLS ... SEP")
    content = Vocab(vocab_size).content_ids
    rng = np.random.default_rng(seed)
    selection = rng.random(tokens.shape)
    action = rng.random(tokens.shape)
    replacement = rng.integers(content.start, content.stop, size=tokens.shape)

    selected = ~Vocab.is_special(tokens) & (selection < rate)
    masked = tokens.copy()
    masked[selected & (action < 0.8)] = MASK_ID
    swapped = selected & (action >= 0.8) & (action < 0.9)
    masked[swapped] = replacement[swapped]
    positions = np.flatnonzero(selected)
    return masked, positions, tokens[positions]


def mask_batch(
    sequences: Sequence[Sequence[int]],
    seed: int,
    rate: float = MASK_RATE,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> MaskedBatch:
    """Mask every sequence with its own stream ``(seed, row)`` and pad the batch."""
    masked_rows, rows, positions, targets = [], [], [], []
    for row, sequence in enumerate(sequences):
        masked, where, ids = mask_tokens(sequence, [seed, row], rate, vocab_size)
        masked_rows.append(masked)
        rows.append(np.full(where.size, row, dtype=np.int64))
        positions.append(where)
        targets.append(ids)
    token_ids, attention_mask = pad_batch(masked_rows)
    return MaskedBatch(
        token_ids,
        attention_mask,
        np.concatenate(rows),
        np.concatenate(positions),
        np.concatenate(targets),
    )


# --------------------------------------------------------------------------
# Task suites


@dataclass(frozen=True)
class TaskSuite:
    """In-family tasks (used in MTL) and held-out out-family tasks."""

    in_family: Tuple[TaskSpec, ...]
    out_family: Tuple[TaskSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "in_family", tuple(self.in_family))
        object.__setattr__(self, "out_family", tuple(self.out_family))
        names = [spec.name for spec in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"task names must be unique, got {names}")
        shared = {s.param_key for s in self.in_family} & {
            s.param_key for s in self.out_family
        }
        if shared:
            raise ConfigError(
                "suite hygiene violated: out-family params reused in-family: "
                f"{sorted(shared)}"
            )

    @property
    def tasks(self) -> Tuple[TaskSpec, ...]:
        return self.in_family + self.out_family

    def get(self, name: str) -> TaskSpec:
        for spec in self.tasks:
            if spec.name == name:
                return spec
        raise KeyError(f"suite has no task {name!r}")

    def is_in_family(self, name: str) -> bool:
        return any(spec.name == name for spec in self.in_family)


FAMILY_ORDER = (
    TaskFamily.PATTERN_PRESENCE,
    TaskFamily.SYMBOL_PARITY,
    TaskFamily.LEXICON_MAJORITY,
    TaskFamily.PAIR_SUBSEQUENCE,
)
OUT_DOMAIN_TAGS = ("biology", "law", "science", "finance", "news", "review")
LEXICON_CLASSES = 3
LEXICON_SIZE = 6


def _draw_params(
    family: TaskFamily, chain: MarkovChain, rng: np.random.Generator
) -> Tuple[Tuple, int]:
    stationary = chain.stationary()
    frequent = np.flatnonzero(stationary >= np.median(stationary))
    if family is TaskFamily.PATTERN_PRESENCE:
        first = int(rng.choice(frequent))
        likely_next = np.argsort(chain.transition[first])[::-1][:4]
        second = int(rng.choice(likely_next))
        return (first + NUM_SPECIAL_TOKENS, second + NUM_SPECIAL_TOKENS), 2
    if family is TaskFamily.SYMBOL_PARITY:
        return (int(rng.choice(frequent)) + NUM_SPECIAL_TOKENS,), 2
    if family is TaskFamily.LEXICON_MAJORITY:
        picked = rng.choice(
            frequent, size=LEXICON_CLASSES * LEXICON_SIZE, replace=False
        )
        lexicons = tuple(
            tuple(sorted(int(s) + NUM_SPECIAL_TOKENS for s in group))
            for group in np.split(picked, LEXICON_CLASSES)
        )
        return lexicons, LEXICON_CLASSES
    pair = rng.choice(frequent, size=2, replace=False)
    return tuple(int(s) + NUM_SPECIAL_TOKENS for s in pair), 2


def default_suite(
    chain: MarkovChain,
    seed: int,
    num_in_family: int = 8,
    num_out_family: int = 4,
    seq_len: int = 32,
) -> TaskSuite:
    """Suite cycling through the four families; params never repeat."""
    rng = np.random.default_rng(seed)
    used = set()
    in_family, out_family = [], []
    for index in range(num_in_family + num_out_family):
        family = FAMILY_ORDER[index % len(FAMILY_ORDER)]
        while True:
            params, n_classes = _draw_params(family, chain, rng)
            if (family.value, params) not in used:
                used.add((family.value, params))
                break
        held_out = index >= num_in_family
        position = index - num_in_family if held_out else index
        spec = TaskSpec(
            name=f"{'out' if held_out else 'in'}{position}-{family.value}",
            family=family,
            params=params,
            n_classes=n_classes,
            domain_tag=OUT_DOMAIN_TAGS[position % len(OUT_DOMAIN_TAGS)]
            if held_out
            else "general",
            seed=int(rng.integers(2**31)),
            seq_len=seq_len,
        )
        (out_family if held_out else in_family).append(spec)
    return TaskSuite(tuple(in_family), tuple(out_family))


# --------------------------------------------------------------------------
# Export


def export_split(split: DatasetSplit, path: Union[str, Path]) -> None:
    """One example per line: space-separated token ids, a TAB, the label."""
    lines = (
        " ".join(str(t) for t in example.token_ids) + f"\t{example.label}\n"
        for example in split
    )
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_split(path: Union[str, Path], role: str = TRAIN) -> DatasetSplit:
    examples = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for number, line in enumerate(lines, 1):
        try:
            tokens, label = line.split("\t")
            examples.append(Example(tuple(int(t) for t in tokens.split()), int(label)))
        except ValueError as err:
            raise ContractError(f"{path}:{number}: malformed example {line!r}") from err
    return DatasetSplit(tuple(examples), role)


def derive_seed(seed: int, *labels) -> int:
    """Stable 31-bit seed for a named sub-stream of ``seed``."""
    key = ":".join([str(seed), *(str(label) for label in labels)])
    return zlib.crc32(key.encode("utf-8")) & 0x7FFFFFFF
