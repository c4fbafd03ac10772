"""Interaction logs: loading, filtering, student-level splits and windowing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

HEADER = ("student_id", "concept_id", "correct", "timestamp")
MS_PER_HOUR = 3_600_000.0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    student_id: str
    concept_id: int
    correct: int
    timestamp: int  # milliseconds since epoch


@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    interactions: tuple

    def __len__(self):
        return len(self.interactions)

    @property
    def concepts(self) -> np.ndarray:
        return np.array([i.concept_id for i in self.interactions], dtype=np.int64)

    @property
    def corrects(self) -> np.ndarray:
        return np.array([i.correct for i in self.interactions], dtype=np.int64)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([i.timestamp for i in self.interactions], dtype=np.int64)


@dataclass(frozen=True)
class Dataset:
    sequences: tuple
    num_concepts: int

    def __post_init__(self):
        ids = [s.student_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate student ids")
        for s in self.sequences:
            for it in s.interactions:
                if not 0 <= it.concept_id < self.num_concepts:
                    raise DataError(f"concept {it.concept_id} outside [0, {self.num_concepts})")

    def __len__(self):
        return len(self.sequences)

    @property
    def student_ids(self) -> list:
        return [s.student_id for s in self.sequences]

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def subset(self, indices) -> Dataset:
        return replace(self, sequences=tuple(self.sequences[i] for i in indices))

    def manifest(self) -> dict:
        stamps = [it.timestamp for s in self.sequences for it in s.interactions]
        return {
            "num_concepts": self.num_concepts,
            "num_students": len(self.sequences),
            "num_interactions": self.num_interactions,
            "min_timestamp": min(stamps) if stamps else None,
            "max_timestamp": max(stamps) if stamps else None,
        }


def _parse_int(text: str, what: str, lineno: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise DataError(f"line {lineno}: {what} {text!r} is not an integer") from None


def load_interactions(path, num_concepts: int | None = None) -> Dataset:
    """Read a ``student_id,concept_id,correct,timestamp`` CSV.

    Rows are grouped by student in order of first appearance and stably sorted
    by timestamp, so ties keep file order. ``num_concepts`` defaults to the
    largest concept id plus one.
    """
    path = Path(path)
    groups: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != HEADER:
            raise DataError(f"line 1: expected header {','.join(HEADER)}, got {','.join(header)}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise DataError(f"line {lineno}: empty student_id")
            concept = _parse_int(row[1], "concept_id", lineno)
            correct = _parse_int(row[2], "correct", lineno)
            stamp = _parse_int(row[3], "timestamp", lineno)
            if correct not in (0, 1):
                raise DataError(f"line {lineno}: correct must be 0 or 1, got {correct}")
            if concept < 0:
                raise DataError(f"line {lineno}: negative concept_id {concept}")
            if stamp < 0:
                raise DataError(f"line {lineno}: negative timestamp {stamp}")
            if num_concepts is not None and concept >= num_concepts:
                raise DataError(f"line {lineno}: concept_id {concept} >= num_concepts {num_concepts}")
            groups.setdefault(sid, []).append(Interaction(sid, concept, correct, stamp))
    if not groups:
        raise DataError(f"{path}: no interactions")
    seqs = tuple(StudentSequence(sid, tuple(sorted(rows, key=lambda it: it.timestamp)))
                 for sid, rows in groups.items())
    if num_concepts is None:
        num_concepts = 1 + max(it.concept_id for s in seqs for it in s.interactions)
    return Dataset(seqs, num_concepts)


def write_interactions(d: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for s in d.sequences:
            for it in s.interactions:
                w.writerow((it.student_id, it.concept_id, it.correct, it.timestamp))


def write_manifest(d: Dataset, path) -> None:
    Path(path).write_text(json.dumps(d.manifest(), indent=2) + "\n")


def filter_short(d: Dataset, min_len: int = 3) -> Dataset:
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    return replace(d, sequences=tuple(s for s in d.sequences if len(s) >= min_len))


def split_train_test(d: Dataset, test_frac: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Split by student; the test part holds ``round(test_frac * n)`` students.

    Python's round-half-to-even applies, so 0.5 of 5 students gives 2 test
    students. Both parts keep at least one student.
    """
    if not 0 < test_frac < 1:
        raise ValueError("test_frac must lie in (0, 1)")
    n = len(d)
    if n < 2:
        raise DataError("need at least 2 students to split")
    n_test = min(max(round(test_frac * n), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return d.subset(train_idx), d.subset(test_idx)


def kfold(d: Dataset, k: int = 5, seed: int = 0) -> list[tuple[Dataset, Dataset]]:
    """Student-level folds; validation parts differ in size by at most one."""
    n = len(d)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise DataError(f"cannot make {k} folds from {n} students")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, k)
    folds = []
    for i in range(k):
        valid = np.sort(parts[i])
        train = np.sort(np.concatenate([parts[j] for j in range(k) if j != i]))
        folds.append((d.subset(train), d.subset(valid)))
    return folds


class ForgettingAnnotator(Protocol):
    def annotate_sequence(self, seq: StudentSequence) -> np.ndarray: ...


@dataclass
class SequenceBatch:
    """Fixed-length windows; rows with ``mask == 0`` are zero padding."""

    concept: np.ndarray
    correct: np.ndarray
    delta_t: np.ndarray  # hours since the student's previous interaction
    forget_level: np.ndarray
    mask: np.ndarray
    student: np.ndarray = field(default=None)  # index into the source Dataset, per row

    def __len__(self):
        return self.concept.shape[0]

    @property
    def window(self) -> int:
        return self.concept.shape[1]

    def rows(self, idx) -> SequenceBatch:
        return SequenceBatch(self.concept[idx], self.correct[idx], self.delta_t[idx],
                             self.forget_level[idx], self.mask[idx], self.student[idx])


def window_sequences(d: Dataset, window: int = 50,
                     forgetting: ForgettingAnnotator | None = None) -> SequenceBatch:
    """Chunk every sequence into consecutive non-overlapping windows.

    Without an annotator every forget level is 5 (the constant used when the
    forgetting input is switched off).
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    n_rows = sum(-(-len(s) // window) for s in d.sequences)
    shape = (n_rows, window)
    concept = np.zeros(shape, dtype=np.int64)
    correct = np.zeros(shape, dtype=np.int64)
    delta = np.zeros(shape, dtype=np.float64)
    level = np.zeros(shape, dtype=np.int64)
    mask = np.zeros(shape, dtype=np.int64)
    student = np.zeros(n_rows, dtype=np.int64)
    row = 0
    for si, s in enumerate(d.sequences):
        c, r, ts = s.concepts, s.corrects, s.timestamps
        dt = np.diff(ts, prepend=ts[0]) / MS_PER_HOUR
        lv = forgetting.annotate_sequence(s) if forgetting is not None else np.full(len(s), 5)
        for lo in range(0, len(s), window):
            hi = min(lo + window, len(s))
            n = hi - lo
            concept[row, :n] = c[lo:hi]
            correct[row, :n] = r[lo:hi]
            delta[row, :n] = dt[lo:hi]
            level[row, :n] = lv[lo:hi]
            mask[row, :n] = 1
            student[row] = si
            row += 1
    return SequenceBatch(concept, correct, delta, level, mask, student)
