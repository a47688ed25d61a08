"""Seeded, platform-stable randomness plus splitting, balancing and batching."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .data import ABSENT, PRESENT, Item, LabeledDataset
from .errors import ClassTooSmall, ConfigError, DegenerateDataset

RNG_VERSION = "pcg64-sha256/v1"


class SeededRng:
    """Deterministic random stream identified by a seed and a key path.

    Only the raw PCG64 output is used; uniforms, normals and permutations are
    derived here so streams do not depend on NumPy's sampling algorithms.
    Child streams (``rng.child("region", "center")``) are independent of how
    much the parent has been consumed.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        key = "|".join([RNG_VERSION, str(self.seed), *map(repr, self.path)]).encode()
        entropy = int.from_bytes(hashlib.sha256(key).digest()[:16], "little")
        self._bitgen = np.random.PCG64(entropy)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path!r})"

    def child(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, self.path + keys)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, size=None) -> np.ndarray | float:
        """Doubles in [0, 1) with 53 random bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u1 = 1.0 - self.uniform(n)
        u2 = self.uniform(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        u = self.uniform(size)
        return np.floor(u * (high - low)).astype(np.int64) + low if size is not None else int(u * (high - low)) + low

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise ConfigError(f"split fractions must lie in (0, 1): {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1: {fracs}")


@dataclass(frozen=True)
class DatasetSplit:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset

    def __post_init__(self):
        a, b, c = (set(part.ids) for part in (self.train, self.val, self.test))
        if a & b or a & c or b & c:
            raise ValueError("split parts overlap")

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def _floor_count(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 1e-9))


def _by_class(dataset: LabeledDataset) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {ABSENT: [], PRESENT: []}
    for idx, item in enumerate(dataset.items):
        groups[item.label].append(idx)
    return groups


def stratified_split(dataset: LabeledDataset, spec: SplitSpec, rng: SeededRng) -> DatasetSplit:
    """Per-class shuffle, then floor(n*val) to val, floor(n*test) to test, rest to train.

    Parts keep the input ordering.
    """
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for label, idxs in _by_class(dataset).items():
        if not idxs:
            continue
        if len(idxs) < 3:
            raise ClassTooSmall(f"class {label} has {len(idxs)} item(s); at least 3 are needed to split")
        perm = [idxs[i] for i in rng.permutation(len(idxs))]
        n_val = _floor_count(len(idxs), spec.val_fraction)
        n_test = _floor_count(len(idxs), spec.test_fraction)
        parts["val"] += perm[:n_val]
        parts["test"] += perm[n_val : n_val + n_test]
        parts["train"] += perm[n_val + n_test :]
    items = dataset.items
    return DatasetSplit(
        *(dataset.subset([items[i] for i in sorted(parts[k])], f"{dataset.name}:{k}") for k in ("train", "val", "test"))
    )


def balance_classes(dataset: LabeledDataset, rng: SeededRng) -> LabeledDataset:
    """Subsample every class without replacement down to the minority count."""
    groups = _by_class(dataset)
    m = min(len(v) for v in groups.values())
    if m == 0:
        raise DegenerateDataset(f"{dataset.name}: cannot balance, a class has no items")
    keep: list[int] = []
    for label in (ABSENT, PRESENT):
        idxs = groups[label]
        if len(idxs) == m:
            keep += idxs
        else:
            keep += [idxs[i] for i in rng.permutation(len(idxs))[:m]]
    return dataset.subset([dataset.items[i] for i in sorted(keep)])


def epoch_permutation(n: int, rng: SeededRng, epoch: int) -> np.ndarray:
    return rng.child("epoch", int(epoch)).permutation(n)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def epoch_batches(dataset: LabeledDataset, batch_size: int, rng: SeededRng, epoch: int) -> list[tuple[Item, ...]]:
    """Shuffled batches for one epoch; the last partial batch is kept."""
    perm = epoch_permutation(len(dataset), rng, epoch)
    items = dataset.items
    return [tuple(items[i] for i in perm[s]) for s in batch_slices(len(dataset), batch_size)]
