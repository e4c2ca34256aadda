"""Response-log and Q-matrix ingestion, record splitting, and the student-level
partition that drives unlearning and membership-inference evaluation.

File formats
------------
``responses.csv``
    Header ``student_id,item_id,score``, one record per row. Scores are binary.
    Ids may be any nonnegative integers; they are remapped to dense 0-based
    indices (sorted original-id order) so that embedding tables stay compact.

``qmatrix.csv``
    No header. J rows of K comma-separated 0/1 values; row j lists the
    knowledge components required by item j. When a Q-matrix is attached to a
    dataset, row j must correspond to the j-th smallest original item id.

All functions here are pure: given the same inputs and seed they return the
same value, and nothing is mutated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "DataFormatError",
    "DataValidationError",
    "ResponseRecord",
    "QMatrix",
    "Dataset",
    "RecordSplit",
    "StudentPartition",
    "MiaSplits",
    "load_responses",
    "load_qmatrix",
    "split_records",
    "partition_students",
    "derive_mia_subsets",
    "records_to_arrays",
]


class DataFormatError(ValueError):
    """A file could not be parsed (bad header, wrong column count, non-integer)."""


class DataValidationError(ValueError):
    """A parsed value violates a domain constraint (score range, zero Q-row, ...)."""


class ResponseRecord(NamedTuple):
    """One graded interaction: student ``student_id`` answered item ``item_id``
    and scored 0 (incorrect) or 1 (correct)."""

    student_id: int
    item_id: int
    score: int


@dataclass(frozen=True)
class QMatrix:
    """Expert item-to-knowledge-component binary matrix, shape (n_items, n_kcs)."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DataValidationError("Q-matrix must be a nonempty 2-d array")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise DataValidationError("Q-matrix entries must all be 0 or 1")
        zero_rows = np.flatnonzero(arr.sum(axis=1) == 0)
        if zero_rows.size:
            raise DataValidationError(
                f"Q-matrix row(s) {zero_rows.tolist()} have no knowledge component"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def n_items(self) -> int:
        return self.entries.shape[0]

    @property
    def n_kcs(self) -> int:
        return self.entries.shape[1]

    def row(self, item_id: int) -> np.ndarray:
        return self.entries[item_id]


@dataclass(frozen=True)
class Dataset:
    """A full response log with its dimensions and (optionally) its Q-matrix."""

    records: tuple[ResponseRecord, ...]
    n_students: int
    n_items: int
    qmatrix: QMatrix | None = None

    def with_qmatrix(self, qmatrix: QMatrix) -> "Dataset":
        """Attach a Q-matrix; its row count must match this dataset's item count."""
        if qmatrix.n_items != self.n_items:
            raise DataValidationError(
                f"Q-matrix has {qmatrix.n_items} rows but dataset has "
                f"{self.n_items} items"
            )
        return replace(self, qmatrix=qmatrix)


@dataclass(frozen=True)
class RecordSplit:
    """Disjoint train/valid/test record lists whose union is the input records."""

    train: tuple[ResponseRecord, ...]
    valid: tuple[ResponseRecord, ...]
    test: tuple[ResponseRecord, ...]


@dataclass(frozen=True)
class StudentPartition:
    """Student-level grouping: three equal-size random draws (forget,
    non-member-train, non-member-eval) and the remaining retain students."""

    forget: frozenset[int]
    nm_train: frozenset[int]
    nm_eval: frozenset[int]
    retain: frozenset[int]
    ratio: float
    n_students: int


@dataclass(frozen=True)
class MiaSplits:
    """Record lists per (student group, record split) cell.

    Every record of the originating dataset lands in exactly one field.
    """

    forget_train: tuple[ResponseRecord, ...]
    forget_valid: tuple[ResponseRecord, ...]
    forget_test: tuple[ResponseRecord, ...]
    nm_train_train: tuple[ResponseRecord, ...]
    nm_train_valid: tuple[ResponseRecord, ...]
    nm_train_test: tuple[ResponseRecord, ...]
    nm_eval_train: tuple[ResponseRecord, ...]
    nm_eval_valid: tuple[ResponseRecord, ...]
    nm_eval_test: tuple[ResponseRecord, ...]
    retain_train: tuple[ResponseRecord, ...]
    retain_valid: tuple[ResponseRecord, ...]
    retain_test: tuple[ResponseRecord, ...]

    @property
    def forget_train_valid(self) -> tuple[ResponseRecord, ...]:
        """Everything the original model saw from the forget students."""
        return self.forget_train + self.forget_valid

    @property
    def retain_train_valid(self) -> tuple[ResponseRecord, ...]:
        """Everything the retrained model is allowed to see."""
        return self.retain_train + self.retain_valid


def load_responses(path: str) -> Dataset:
    """Parse a response CSV into a :class:`Dataset` with dense 0-based ids.

    Record order follows file order. Raises :class:`DataFormatError` with the
    offending line number on parse failures and :class:`DataValidationError`
    for out-of-range scores or negative ids.
    """
    expected = ["student_id", "item_id", "score"]
    raw: list[tuple[int, int, int]] = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if [c.strip().lower() for c in header] != expected:
            raise DataFormatError(
                f"{path}: line 1: expected header {','.join(expected)!r}, "
                f"got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected 3 columns, got {len(row)}"
                )
            try:
                sid, iid, score = (int(c.strip()) for c in row)
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: non-integer value in {row!r}"
                ) from None
            if sid < 0 or iid < 0:
                raise DataValidationError(
                    f"{path}: line {lineno}: ids must be nonnegative"
                )
            if score not in (0, 1):
                raise DataValidationError(
                    f"{path}: line {lineno}: score must be 0 or 1, got {score}"
                )
            raw.append((sid, iid, score))
    if not raw:
        raise DataValidationError(f"{path}: no records")

    student_ids = sorted({r[0] for r in raw})
    item_ids = sorted({r[1] for r in raw})
    student_map = {orig: dense for dense, orig in enumerate(student_ids)}
    item_map = {orig: dense for dense, orig in enumerate(item_ids)}
    records = tuple(
        ResponseRecord(student_map[sid], item_map[iid], score)
        for sid, iid, score in raw
    )
    return Dataset(records=records, n_students=len(student_ids), n_items=len(item_ids))


def load_qmatrix(path: str) -> QMatrix:
    """Parse a headerless binary CSV into a validated :class:`QMatrix`."""
    rows: list[list[float]] = []
    with open(path, newline="") as handle:
        for lineno, row in enumerate(csv.reader(handle), start=1):
            if not row:
                continue
            try:
                values = [int(c.strip()) for c in row]
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: non-integer value in {row!r}"
                ) from None
            if any(v not in (0, 1) for v in values):
                raise DataValidationError(
                    f"{path}: line {lineno}: entries must be 0 or 1"
                )
            if rows and len(values) != len(rows[0]):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(rows[0])} columns, "
                    f"got {len(values)}"
                )
            if sum(values) == 0:
                raise DataValidationError(
                    f"{path}: line {lineno}: item row has no knowledge component"
                )
            rows.append([float(v) for v in values])
    if not rows:
        raise DataValidationError(f"{path}: empty Q-matrix")
    return QMatrix(np.array(rows, dtype=np.float64))


def _floor_share(n: int, ratio: float) -> int:
    # The 1e-9 guard keeps decimal ratios (0.2, 0.1, ...) at their intended
    # integer shares despite binary representation error.
    return int(math.floor(n * ratio + 1e-9))


def split_records(
    dataset: Dataset,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> RecordSplit:
    """Shuffle and split records into train/valid/test.

    Valid and test sizes are floor allocations of their ratios; leftover rows
    go to train. Deterministic for a fixed (dataset, seed).
    """
    if not dataset.records:
        raise DataValidationError("cannot split an empty dataset")
    if any(r <= 0 for r in ratios):
        raise DataValidationError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationError(f"ratios must sum to 1, got {ratios}")
    n = len(dataset.records)
    n_valid = _floor_share(n, ratios[1])
    n_test = _floor_share(n, ratios[2])
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [dataset.records[i] for i in perm]
    return RecordSplit(
        train=tuple(shuffled[:n_train]),
        valid=tuple(shuffled[n_train : n_train + n_valid]),
        test=tuple(shuffled[n_train + n_valid :]),
    )


def partition_students(dataset: Dataset, ratio: float, seed: int = 0) -> StudentPartition:
    """Draw three disjoint equal-size student groups of ``floor(ratio * I)``
    students each (forget, non-member-train, non-member-eval); the rest retain.

    ``ratio`` must lie in (0, 1/3] so that the three draws fit.
    """
    if not (0.0 < ratio <= 1.0 / 3.0 + 1e-12):
        raise DataValidationError(f"ratio must be in (0, 1/3], got {ratio}")
    size = _floor_share(dataset.n_students, ratio)
    if size < 1:
        raise DataValidationError(
            f"ratio {ratio} selects zero students out of {dataset.n_students}"
        )
    perm = np.random.default_rng(seed).permutation(dataset.n_students)
    forget = frozenset(int(s) for s in perm[:size])
    nm_train = frozenset(int(s) for s in perm[size : 2 * size])
    nm_eval = frozenset(int(s) for s in perm[2 * size : 3 * size])
    retain = frozenset(int(s) for s in perm[3 * size :])
    return StudentPartition(
        forget=forget,
        nm_train=nm_train,
        nm_eval=nm_eval,
        retain=retain,
        ratio=ratio,
        n_students=dataset.n_students,
    )


_GROUPS = ("forget", "nm_train", "nm_eval", "retain")


def derive_mia_subsets(partition: StudentPartition, split: RecordSplit) -> MiaSplits:
    """Bucket every record of ``split`` by its student's group.

    Raises if the split references students outside the partition (the two must
    come from the same dataset).
    """
    group_of = np.full(partition.n_students, -1, dtype=np.int64)
    for gi, name in enumerate(_GROUPS):
        for sid in getattr(partition, name):
            group_of[sid] = gi

    seen: set[int] = set()
    buckets: dict[str, list[ResponseRecord]] = {
        f"{g}_{s}": [] for g in _GROUPS for s in ("train", "valid", "test")
    }
    for split_name in ("train", "valid", "test"):
        for rec in getattr(split, split_name):
            if rec.student_id >= partition.n_students:
                raise DataValidationError(
                    f"record student {rec.student_id} outside partition of "
                    f"{partition.n_students} students; mismatched dataset?"
                )
            buckets[f"{_GROUPS[group_of[rec.student_id]]}_{split_name}"].append(rec)
            seen.add(rec.student_id)
    if len(seen) != partition.n_students:
        raise DataValidationError(
            f"split covers {len(seen)} students but partition has "
            f"{partition.n_students}; mismatched dataset?"
        )
    return MiaSplits(**{name: tuple(recs) for name, recs in buckets.items()})


def records_to_arrays(
    records: Sequence[ResponseRecord] | Iterable[ResponseRecord],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columnize records into (student, item, score) arrays for vectorized math."""
    recs = records if isinstance(records, (list, tuple)) else list(records)
    if len(recs) == 0:
        return (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
        )
    arr = np.asarray(recs, dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2].astype(np.float64)
