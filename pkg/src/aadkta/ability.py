"""Ability attributes built from correct-answer response times.

A correct answer contributes the ratio of the student's response time to the
average correct response time for that (skill, exercise) pair; an incorrect
answer contributes nothing. Contributions are accumulated per skill over
fixed windows of the interaction sequence.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import InteractionRecord, Segment, StudentSequence, segment_sequence

DEFAULT_C_MAX = 5.0


class AbilityError(ValueError):
    pass


@dataclass
class ResponseTimeStats:
    mean_correct_time: dict[tuple[int, int], float]
    correct_count: dict[tuple[int, int], int]
    global_mean: float

    def average_time(self, skill_id: int, exercise_id: int) -> float:
        return self.mean_correct_time.get((skill_id, exercise_id), self.global_mean)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "global_mean": self.global_mean,
            "entries": {
                f"{i}:{j}": {"mean": mean, "count": self.correct_count[(i, j)]}
                for (i, j), mean in sorted(self.mean_correct_time.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResponseTimeStats":
        means, counts = {}, {}
        for key, entry in obj["entries"].items():
            i, j = (int(x) for x in key.split(":"))
            means[(i, j)] = float(entry["mean"])
            counts[(i, j)] = int(entry["count"])
        return cls(means, counts, float(obj["global_mean"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ResponseTimeStats":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class AbilityVector:
    values: np.ndarray
    segment_range: tuple[int, int]


@dataclass
class AbilityTimeline:
    student_id: str
    per_segment: list[AbilityVector] = field(default_factory=list)
    cumulative: list[AbilityVector] = field(default_factory=list)

    def to_csv_rows(self) -> list[list]:
        rows = []
        for s, (seg, cum) in enumerate(zip(self.per_segment, self.cumulative)):
            for k, (a, c) in enumerate(zip(seg.values, cum.values)):
                rows.append([self.student_id, s, seg.segment_range[0], seg.segment_range[1], k, a, c])
        return rows


TIMELINE_CSV_HEADER = ["student_id", "segment", "start", "stop", "skill_id", "segment_ability", "cumulative_ability"]


def fit_response_time_stats(train_records: Sequence[InteractionRecord]) -> ResponseTimeStats:
    """Average correct response time per (skill, exercise) over the training records.

    Records whose response time was imputed are left out of the averages.
    """
    sums: dict[tuple[int, int], float] = defaultdict(float)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    total, n = 0.0, 0
    for r in train_records:
        if not r.correct or r.rt_imputed:
            continue
        key = (r.skill_id, r.exercise_id)
        sums[key] += r.response_time
        counts[key] += 1
        total += r.response_time
        n += 1
    if n == 0 or total <= 0:
        raise AbilityError("cannot fit timing statistics: no correct answers with positive response time")
    means = {}
    kept = {}
    for key, c in counts.items():
        if sums[key] > 0:
            means[key] = sums[key] / c
            kept[key] = c
    return ResponseTimeStats(means, kept, total / n)


def ability_increment(record: InteractionRecord, stats: ResponseTimeStats, c_max: float = DEFAULT_C_MAX,
                      *, invert_ratio: bool = False) -> float:
    if not record.correct:
        return 0.0
    avg = stats.average_time(record.skill_id, record.exercise_id)
    if invert_ratio:
        ratio = avg / record.response_time if record.response_time > 0 else c_max
    else:
        ratio = record.response_time / avg
    return min(ratio, c_max)


def ability_vector(segment: Segment, stats: ResponseTimeStats, skill_count: int,
                   c_max: float = DEFAULT_C_MAX, *, agg: str = "sum",
                   invert_ratio: bool = False) -> AbilityVector:
    values = np.zeros(skill_count)
    hits = np.zeros(skill_count)
    for r in segment.window:
        if r.correct:
            values[r.skill_id] += ability_increment(r, stats, c_max, invert_ratio=invert_ratio)
            hits[r.skill_id] += 1
    if agg == "mean":
        np.divide(values, hits, out=values, where=hits > 0)
    elif agg != "sum":
        raise ValueError(f"unknown ability aggregation {agg!r}")
    return AbilityVector(np.minimum(values, c_max), (segment.start, segment.stop))


def build_timeline(seq: StudentSequence, g: int, stats: ResponseTimeStats, skill_count: int,
                   c_max: float = DEFAULT_C_MAX, *, agg: str = "sum",
                   invert_ratio: bool = False) -> AbilityTimeline:
    timeline = AbilityTimeline(seq.student_id)
    running = np.zeros(skill_count)
    for seg in segment_sequence(seq, g):
        vec = ability_vector(seg, stats, skill_count, c_max, agg=agg, invert_ratio=invert_ratio)
        running = running + vec.values
        timeline.per_segment.append(vec)
        timeline.cumulative.append(AbilityVector(np.minimum(running, c_max), (0, seg.stop)))
    return timeline
