"""Simulated students with known per-student memory half-lives.

Each student has a half-life ``tau`` (hours) and an ability. Per-concept
mastery decays as ``2 ** (-gap / tau)`` between interactions and grows by
a fixed gain after each practice; the answer is correct with probability
``sigmoid(ability + mastery[c] - difficulty[c])``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import MS_PER_HOUR, Dataset, Interaction, StudentSequence


@dataclass(frozen=True)
class SimParams:
    tau_min: float = 2.0
    tau_max: float = 500.0
    ability_sd: float = 0.3
    difficulty_mean: float = 0.5
    difficulty_sd: float = 0.8
    gain: float = 2.0
    mastery_max: float = 3.0
    gap_median_hours: float = 24.0
    gap_sigma: float = 1.0
    repeat_prob: float = 0.6  # chance of revisiting one of the last few concepts
    start_ms: int = 1_600_000_000_000


@dataclass
class GroundTruth:
    student_ids: list
    tau: np.ndarray
    ability: np.ndarray
    difficulty: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["student_id", "tau", "ability"])
            for sid, t, a in zip(self.student_ids, self.tau, self.ability):
                w.writerow([sid, f"{t:.10g}", f"{a:.10g}"])


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def simulate_student(rng: np.random.Generator, sid: str, tau: float, ability: float,
                     difficulty: np.ndarray, steps: int, params: SimParams) -> StudentSequence:
    K = difficulty.size
    mastery = np.zeros(K)
    last_seen = np.zeros(K)  # hours
    clock = 0.0
    recent: list = []
    rows = []
    for i in range(steps):
        if i:
            clock += float(rng.lognormal(np.log(params.gap_median_hours), params.gap_sigma))
        if recent and rng.random() < params.repeat_prob:
            c = int(recent[rng.integers(len(recent))])
        else:
            c = int(rng.integers(K))
        mastery[c] *= 2.0 ** (-(clock - last_seen[c]) / tau)
        p = _sigmoid(ability + mastery[c] - difficulty[c])
        r = int(rng.random() < p)
        mastery[c] = min(params.mastery_max, mastery[c] + params.gain)
        last_seen[c] = clock
        recent = (recent + [c])[-5:]
        stamp = params.start_ms + int(round(clock * MS_PER_HOUR))
        rows.append(Interaction(sid, c, r, stamp))
    return StudentSequence(sid, tuple(rows))


def generate(n_students: int, num_concepts: int, steps: int, seed: int = 0,
             params: SimParams = SimParams()) -> tuple[Dataset, GroundTruth]:
    if n_students < 2 or num_concepts < 2 or steps < 3:
        raise ValueError("need n_students >= 2, num_concepts >= 2 and steps >= 3")
    if not 0 < params.tau_min <= params.tau_max:
        raise ValueError("need 0 < tau_min <= tau_max")
    rng = np.random.default_rng(seed)
    difficulty = rng.normal(params.difficulty_mean, params.difficulty_sd, num_concepts)
    tau = np.exp(rng.uniform(np.log(params.tau_min), np.log(params.tau_max), n_students))
    ability = rng.normal(0.0, params.ability_sd, n_students)
    width = len(str(n_students - 1))
    ids = [f"s{i:0{width}d}" for i in range(n_students)]
    seqs = tuple(simulate_student(np.random.default_rng([seed, i]), ids[i], tau[i], ability[i],
                                  difficulty, steps, params)
                 for i in range(n_students))
    return Dataset(seqs, num_concepts), GroundTruth(ids, tau, ability, difficulty)
