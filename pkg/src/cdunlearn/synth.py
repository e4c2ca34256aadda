"""Synthetic response-log generator.

Produces datasets with a planted skill structure: each student has a latent
per-KC mastery level, each item a per-KC difficulty, and the correctness
probability is a sigmoid of the mean mastery-minus-difficulty over the item's
required KCs. Useful for tests and for exercising the full pipeline without
shipping any real student data.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .data import Dataset, QMatrix, ResponseRecord


def generate_qmatrix(
    n_items: int, n_kcs: int, rng: np.random.Generator, max_kcs_per_item: int = 4
) -> QMatrix:
    """Random binary item-KC matrix with 1..max_kcs_per_item KCs per item,
    covering every KC at least once when n_items >= n_kcs."""
    entries = np.zeros((n_items, n_kcs))
    for j in range(n_items):
        count = int(rng.integers(1, min(max_kcs_per_item, n_kcs) + 1))
        cols = rng.choice(n_kcs, size=count, replace=False)
        entries[j, cols] = 1.0
    # Make sure no KC is dead weight.
    for k in range(n_kcs):
        if entries[:, k].sum() == 0:
            entries[int(rng.integers(0, n_items)), k] = 1.0
    return QMatrix(entries)


def generate_dataset(
    n_students: int = 536,
    n_items: int = 20,
    n_kcs: int = 8,
    seed: int = 0,
    student_scale: float = 4.4,
    item_scale: float = 2.6,
    complete: bool = True,
    density: float = 1.0,
) -> Dataset:
    """Planted-model response log.

    The correctness logit of (student, item) is
    ``student_scale * mean(mastery over required KCs) - item_scale *
    mean(difficulty over required KCs)``. A large ``student_scale`` relative
    to ``item_scale`` makes responses strongly student-specific: a model that
    has learned a student's latent skills predicts them far better than one
    that only knows the items. With ``complete=True`` every student answers
    every item (n_students * n_items records), matching the shape of classic
    assessment matrices; otherwise each pair is kept with probability
    ``density``.
    """
    rng = np.random.default_rng(seed)
    qmatrix = generate_qmatrix(n_items, n_kcs, rng)
    mastery = rng.standard_normal((n_students, n_kcs))
    difficulty = rng.standard_normal((n_items, n_kcs))
    qrows = qmatrix.entries
    kc_counts = qrows.sum(axis=1)

    student_part = mastery @ qrows.T / kc_counts  # (I, J)
    item_part = (difficulty * qrows).sum(axis=1) / kc_counts  # (J,)
    logits = student_scale * student_part - item_scale * item_part
    probs = 1.0 / (1.0 + np.exp(-logits))
    scores = (rng.random((n_students, n_items)) < probs).astype(np.int64)

    if complete:
        keep = np.ones((n_students, n_items), dtype=bool)
    else:
        keep = rng.random((n_students, n_items)) < density
        keep[np.flatnonzero(keep.sum(axis=1) == 0), 0] = True  # no orphan students
    records = tuple(
        ResponseRecord(int(s), int(j), int(scores[s, j]))
        for s in range(n_students)
        for j in range(n_items)
        if keep[s, j]
    )
    return Dataset(
        records=records, n_students=n_students, n_items=n_items, qmatrix=qmatrix
    )


def write_dataset_csv(dataset: Dataset, responses_path: str, qmatrix_path: str) -> None:
    """Write a dataset in the CSV formats the loaders expect."""
    os.makedirs(os.path.dirname(os.path.abspath(responses_path)), exist_ok=True)
    with open(responses_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["student_id", "item_id", "score"])
        for rec in dataset.records:
            writer.writerow([rec.student_id, rec.item_id, rec.score])
    if dataset.qmatrix is None:
        raise ValueError("dataset has no Q-matrix to write")
    with open(qmatrix_path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in dataset.qmatrix.entries:
            writer.writerow([int(v) for v in row])
