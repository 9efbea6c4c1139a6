"""Dataset loading, splitting and the samplers used by tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dpopt.templates import TaskSpec

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownLabelError(DatasetError):
    pass


class InsufficientExamplesError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    text: str
    label: str


Dataset = list  # list[Example]


def load_dataset(path, task: TaskSpec) -> list[Example]:
    """Read a JSON-lines file of ``{"text": ..., "label": ...}`` records.

    Blank lines are skipped. Labels must belong to ``task.classes``.
    """
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str) \
                    or not isinstance(rec.get("label"), str):
                raise DatasetError("record needs string fields 'text' and 'label'", lineno)
            if rec["label"] not in task.classes:
                raise UnknownLabelError(
                    f"label {rec['label']!r} not in {list(task.classes)} for task {task.name}",
                    lineno)
            out.append(Example(rec["text"], rec["label"]))
    if not out:
        logger.warning("dataset %s is empty", path)
    return out


def write_dataset(path, examples: Sequence[Example]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"text": ex.text, "label": ex.label}) + "\n")


def split_validation(dataset: Sequence, fraction: float, rng: np.random.Generator):
    """Hold out ``round(fraction * n)`` records (half rounds up) for validation.

    Both sides keep the original record order.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = int(math.floor(fraction * n + 0.5))
    if n_val == 0 or n_val == n:
        raise ValueError(f"degenerate split: {n - n_val} train / {n_val} validation")
    val_idx = np.zeros(n, dtype=bool)
    val_idx[rng.permutation(n)[:n_val]] = True
    train = [ex for ex, v in zip(dataset, val_idx) if not v]
    val = [ex for ex, v in zip(dataset, val_idx) if v]
    return train, val


def poisson_sample(records: Sequence, q: float, rng: np.random.Generator) -> list:
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate must lie in [0, 1], got {q}")
    keep = rng.random(len(records)) < q
    return [r for r, k in zip(records, keep) if k]


@dataclass
class PartitionedBatch:
    partitions: list = field(default_factory=list)
    dropped: int = 0

    @property
    def num_partitions(self) -> int:
        return len(self.partitions)


def partition(batch: Sequence, demos_per_subset: int, rng: np.random.Generator) -> PartitionedBatch:
    """Shuffle and cut into disjoint blocks of ``demos_per_subset``; leftovers are dropped."""
    if demos_per_subset < 1:
        raise ValueError("demos_per_subset must be >= 1")
    perm = rng.permutation(len(batch))
    J = len(batch) // demos_per_subset
    parts = [[batch[i] for i in perm[j * demos_per_subset:(j + 1) * demos_per_subset]]
             for j in range(J)]
    return PartitionedBatch(parts, len(batch) - J * demos_per_subset)


def balanced_demos(train: Sequence[Example], k: int, classes: Sequence[str],
                   rng: np.random.Generator) -> list[Example]:
    """Draw ``k`` demonstrations with per-class counts differing by at most one.

    Which classes receive the extra demonstrations is random.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    by_class = {c: [ex for ex in train if ex.label == c] for c in classes}
    need = math.ceil(k / len(classes)) if k else 0
    short = [c for c, exs in by_class.items() if len(exs) < need]
    if short:
        raise InsufficientExamplesError(
            f"classes {short} have fewer than {need} examples for {k} balanced demos")
    base, extra = divmod(k, len(classes))
    bonus = set(rng.permutation(len(classes))[:extra].tolist())
    demos = []
    for i, c in enumerate(classes):
        n = base + (1 if i in bonus else 0)
        pick = rng.permutation(len(by_class[c]))[:n]
        demos += [by_class[c][j] for j in pick]
    return [demos[i] for i in rng.permutation(len(demos))]
