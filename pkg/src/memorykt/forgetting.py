"""Personalized forgetting scores and cohort-relative forgetting levels.

A student's score moves after every response: correct answers raise it
(more after long gaps on the concept and on hard concepts), wrong answers
lower it (more after short gaps, on easy concepts, and when the previous
attempt at the concept was correct). Each change is divided by the length
of the sequence. The running score is turned into a level 1..10 by its
midrank percentile inside the training cohort's final scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import MS_PER_HOUR, Dataset, StudentSequence

NUM_LEVELS = 10


@dataclass(frozen=True)
class ScoreRule:
    cap_hours: float = 720.0  # time weight saturates at 30 days
    base: float = 0.5
    penalty: float = 1.5  # wrong after a correct previous attempt


DEFAULT_RULE = ScoreRule()


def time_weight(delta_t: float, cap_hours: float = DEFAULT_RULE.cap_hours) -> float:
    return min(1.0, math.log1p(delta_t) / math.log1p(cap_hours))


def score_change(r: int, d: float, delta_t: float, r_prev: int | None, total_T: int,
                 rule: ScoreRule = DEFAULT_RULE) -> float:
    if not 0.0 < d < 1.0:
        raise ValueError(f"difficulty must lie in (0, 1), got {d}")
    if delta_t < 0:
        raise ValueError(f"delta_t must be >= 0, got {delta_t}")
    if total_T < 1:
        raise ValueError(f"total_T must be >= 1, got {total_T}")
    w = time_weight(delta_t, rule.cap_hours)
    if r:
        return d * (rule.base + w) / total_T
    pen = rule.penalty if r_prev == 1 else 1.0
    return -(1.0 - d) * (rule.base + (1.0 - w)) * pen / total_T


def concept_difficulty(train: Dataset) -> np.ndarray:
    """Laplace-smoothed error rate per concept; unseen concepts get 0.5."""
    if len(train) == 0:
        raise ValueError("empty training set")
    wrong = np.zeros(train.num_concepts)
    attempts = np.zeros(train.num_concepts)
    for s in train.sequences:
        c, r = s.concepts, s.corrects
        np.add.at(attempts, c, 1)
        np.add.at(wrong, c, 1 - r)
    return (wrong + 1.0) / (attempts + 2.0)


@dataclass
class ForgettingState:
    stu_score: float
    total_T: int
    last_interaction: dict = field(default_factory=dict)  # concept -> (timestamp ms, correct)

    def update(self, it, difficulty: np.ndarray, rule: ScoreRule) -> float:
        t_prev, r_prev = self.last_interaction.get(it.concept_id, (it.timestamp, None))
        dt = (it.timestamp - t_prev) / MS_PER_HOUR
        self.stu_score += score_change(it.correct, difficulty[it.concept_id], dt, r_prev,
                                       self.total_T, rule)
        self.last_interaction[it.concept_id] = (it.timestamp, it.correct)
        return self.stu_score


def run_scores(seq: StudentSequence, difficulty: np.ndarray, start: float = 0.0,
               rule: ScoreRule = DEFAULT_RULE) -> np.ndarray:
    """Score after each interaction, starting from ``start``."""
    state = ForgettingState(start, max(len(seq), 1))
    return np.array([state.update(it, difficulty, rule) for it in seq.interactions])


@dataclass
class PopulationScores:
    scores: np.ndarray  # sorted ascending

    def __post_init__(self):
        self.scores = np.sort(np.asarray(self.scores, dtype=np.float64))
        if self.scores.size == 0:
            raise ValueError("empty population")

    @property
    def mean(self) -> float:
        return float(self.scores.mean())

    def __len__(self):
        return self.scores.size


def population_scores(train: Dataset, difficulty: np.ndarray,
                      rule: ScoreRule = DEFAULT_RULE) -> PopulationScores:
    """Final score of each training student, each scored from 0."""
    if len(train) == 0:
        raise ValueError("empty training set")
    return PopulationScores([run_scores(s, difficulty, 0.0, rule)[-1] for s in train.sequences])


def percentile(score: float, pop: PopulationScores) -> float:
    below = np.searchsorted(pop.scores, score, side="left")
    upto = np.searchsorted(pop.scores, score, side="right")
    return (below + 0.5 * (upto - below)) / len(pop)


def forget_level(score: float, pop: PopulationScores) -> int:
    p = percentile(score, pop)
    return int(min(max(1 + math.floor(p * NUM_LEVELS), 1), NUM_LEVELS))


@dataclass
class Forgetting:
    """Fitted difficulty table and cohort scores; annotates sequences with levels."""

    difficulty: np.ndarray
    population: PopulationScores
    rule: ScoreRule = DEFAULT_RULE

    @classmethod
    def fit(cls, train: Dataset, rule: ScoreRule = DEFAULT_RULE) -> Forgetting:
        diff = concept_difficulty(train)
        return cls(diff, population_scores(train, diff, rule), rule)

    def _difficulty_for(self, seq: StudentSequence) -> np.ndarray:
        need = 1 + max(it.concept_id for it in seq.interactions)
        if need <= self.difficulty.size:
            return self.difficulty
        return np.concatenate([self.difficulty, np.full(need - self.difficulty.size, 0.5)])

    def scores(self, seq: StudentSequence) -> np.ndarray:
        """Running score per step, cold-started from the cohort mean."""
        return run_scores(seq, self._difficulty_for(seq), self.population.mean, self.rule)

    def final_score(self, seq: StudentSequence) -> float:
        return float(self.scores(seq)[-1])

    def annotate_sequence(self, seq: StudentSequence) -> np.ndarray:
        return np.array([forget_level(s, self.population) for s in self.scores(seq)],
                        dtype=np.int64)

    def to_json(self) -> dict:
        return {"difficulty": self.difficulty.tolist(),
                "population_scores": self.population.scores.tolist(),
                "rule": asdict(self.rule)}

    @classmethod
    def from_json(cls, obj: dict) -> Forgetting:
        return cls(np.asarray(obj["difficulty"], dtype=np.float64),
                   PopulationScores(obj["population_scores"]), ScoreRule(**obj["rule"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> Forgetting:
        return cls.from_json(json.loads(Path(path).read_text()))
