"""Dataset ingestion, hashed n-gram featurization and few-shot subsampling.

Featurization uses a signed hashing trick over lowercase whitespace tokens.
The hash is 64-bit FNV-1a computed over ``seed.to_bytes(8, "little") +
ngram.encode("utf-8")`` where ``seed`` is taken modulo 2**64 and an n-gram is
its tokens joined by a single ASCII space.  The bucket is ``hash % dimension``
and the sign is ``+1`` when bit 63 of the hash is clear, ``-1`` otherwise.
The accumulated vector is divided by ``max(1, token_count)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._streams import SAMPLING, substream

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    """Raised for malformed or unusable dataset files."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    id: int
    text: str
    label: int


@dataclass
class Dataset:
    examples: list[Example]
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        for ex in self.examples:
            if not 0 <= ex.label < self.num_classes:
                raise DatasetError(
                    f"example {ex.id}: label {ex.label} outside [0, {self.num_classes})"
                )

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def texts(self) -> list[str]:
        return [ex.text for ex in self.examples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


@dataclass(frozen=True)
class FeaturizerConfig:
    dimension: int = 1024
    ngram_orders: tuple[int, ...] = field(default=(1, 2))
    hash_seed: int = 0

    def __post_init__(self):
        if self.dimension < 2:
            raise ValueError(f"featurizer dimension must be >= 2, got {self.dimension}")
        orders = tuple(sorted(set(int(n) for n in self.ngram_orders)))
        if not orders or orders[0] < 1:
            raise ValueError(f"ngram orders must be positive integers, got {self.ngram_orders}")
        object.__setattr__(self, "ngram_orders", orders)


def load_dataset(path, num_classes: int) -> Dataset:
    """Read a ``<label>\\t<text>`` TSV file.

    Blank lines are skipped, but ids still count only the parsed examples so
    they run 0..n-1 in file order.
    """
    path = Path(path)
    examples: list[Example] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            label_str, sep, text = line.partition("\t")
            if not sep:
                raise DatasetError(f"{path}:{lineno}: expected '<label>\\t<text>'")
            try:
                label = int(label_str)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: label {label_str!r} is not an integer") from None
            if not 0 <= label < num_classes:
                raise DatasetError(
                    f"{path}:{lineno}: label {label} outside [0, {num_classes})"
                )
            examples.append(Example(id=len(examples), text=text, label=label))
    if not examples:
        raise DatasetError(f"{path}: dataset is empty")
    return Dataset(examples, num_classes)


def save_dataset(dataset: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset.examples:
            if "\t" in ex.text or "\n" in ex.text:
                raise DatasetError(f"example {ex.id}: text contains a tab or newline")
            fh.write(f"{ex.label}\t{ex.text}\n")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def fnv1a_64(data: bytes, h: int = FNV_OFFSET_BASIS) -> int:
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def hash_ngram(ngram: str, seed: int) -> int:
    return fnv1a_64((seed & _MASK64).to_bytes(8, "little") + ngram.encode("utf-8"))


def iter_ngrams(tokens: list[str], orders) -> list[str]:
    grams = []
    for n in orders:
        for i in range(len(tokens) - n + 1):
            grams.append(" ".join(tokens[i : i + n]))
    return grams


def featurize(text: str, config: FeaturizerConfig) -> np.ndarray:
    tokens = tokenize(text)
    values = np.zeros(config.dimension, dtype=np.float64)
    for gram in iter_ngrams(tokens, config.ngram_orders):
        h = hash_ngram(gram, config.hash_seed)
        values[h % config.dimension] += -1.0 if h >> 63 else 1.0
    return values / max(1, len(tokens))


def featurize_many(texts, config: FeaturizerConfig) -> np.ndarray:
    if not texts:
        return np.zeros((0, config.dimension))
    return np.stack([featurize(t, config) for t in texts])


def few_shot_sample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Draw ``n`` examples class-balanced.

    Each class gets ``n // C`` examples and the remainder goes one apiece to
    the lowest class indices.  Within a class, examples are taken from a
    seeded permutation.  The result keeps class-major order (class 0 draws
    first) and original example ids.
    """
    if not 0 < n <= len(dataset):
        raise ValueError(f"n must be in (0, {len(dataset)}], got {n}")
    C = dataset.num_classes
    quota = [n // C + (1 if c < n % C else 0) for c in range(C)]
    by_class: list[list[Example]] = [[] for _ in range(C)]
    for ex in dataset.examples:
        by_class[ex.label].append(ex)
    rng = substream(seed, SAMPLING)
    chosen: list[Example] = []
    for c in range(C):
        pool = by_class[c]
        if len(pool) < quota[c]:
            raise InsufficientDataError(
                f"class {c} has {len(pool)} examples, quota is {quota[c]}"
            )
        order = rng.permutation(len(pool))
        chosen.extend(pool[i] for i in order[: quota[c]])
    return Dataset(chosen, C)
