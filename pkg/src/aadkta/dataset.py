"""Interaction logs: ingestion, per-student sequences, windows, step encoding, synthetic data."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

CANONICAL_COLUMNS = ("student_id", "exercise_id", "skill_id", "correct", "ms_response_time", "order")
MANDATORY_COLUMNS = ("student_id", "exercise_id", "skill_id", "correct", "ms_response_time")
DEFAULT_SCHEMA = {name: name for name in CANONICAL_COLUMNS}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    student_id: str
    exercise_id: int
    skill_id: int
    correct: int
    response_time: float  # seconds
    order_key: float
    sub_index: int = 0  # disambiguates multi-skill duplicates of one row
    rt_imputed: bool = False

    @property
    def sort_key(self) -> tuple[float, int]:
        return (self.order_key, self.sub_index)


@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    steps: tuple[InteractionRecord, ...]
    chunk_index: int = 0

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class Segment:
    parent: StudentSequence
    start: int
    stop: int
    segment_index: int

    @property
    def window(self) -> tuple[InteractionRecord, ...]:
        return self.parent.steps[self.start:self.stop]

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass
class DatasetCatalog:
    exercise_count: int
    skill_count: int
    exercise_to_skill: dict[int, int]
    student_ids: set[str] = field(default_factory=set)
    # dense index -> raw identifier as found in the source file
    exercise_labels: list[str] = field(default_factory=list)
    skill_labels: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "exercise_count": self.exercise_count,
            "skill_count": self.skill_count,
            "exercise_to_skill": {str(k): v for k, v in sorted(self.exercise_to_skill.items())},
            "student_ids": sorted(self.student_ids),
            "exercise_labels": list(self.exercise_labels),
            "skill_labels": list(self.skill_labels),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetCatalog":
        return cls(
            exercise_count=int(obj["exercise_count"]),
            skill_count=int(obj["skill_count"]),
            exercise_to_skill={int(k): int(v) for k, v in obj["exercise_to_skill"].items()},
            student_ids=set(obj.get("student_ids", [])),
            exercise_labels=list(obj.get("exercise_labels", [])),
            skill_labels=list(obj.get("skill_labels", [])),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetCatalog":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EncodedStep:
    input_vector: np.ndarray
    exercise_id: int
    skill_id: int
    label: int


def _dense_index(values: Iterable[str]) -> tuple[dict[str, int], list[str]]:
    mapping: dict[str, int] = {}
    labels: list[str] = []
    for v in values:
        if v not in mapping:
            mapping[v] = len(labels)
            labels.append(v)
    return mapping, labels


def _raw_str(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _parse_order(column: pd.Series) -> np.ndarray:
    numeric = pd.to_numeric(column, errors="coerce")
    if not numeric.isna().any():
        return numeric.to_numpy(dtype=float)
    stamps = pd.to_datetime(column, errors="coerce")
    if stamps.isna().any():
        raise DatasetError("order column has values that are neither numeric nor timestamps")
    return (stamps.astype("int64") / 1e9).to_numpy(dtype=float)


def parse_interactions(
    path: str | Path,
    schema: dict[str, str | None] | None = None,
    *,
    skill_separator: str | None = "_",
    negative_time: str = "error",
) -> tuple[DatasetCatalog, list[InteractionRecord]]:
    """Read a CSV interaction log into dense-indexed records.

    ``schema`` maps canonical column names to the file's column names; an
    ``order`` entry of ``None`` (or a missing order column) falls back to row
    order. Response times are read in milliseconds and stored in seconds;
    missing times get the median of the observed ones and are flagged.
    Multi-skill cells such as ``"12_45"`` are split into one record per skill.
    ``negative_time="missing"`` treats negative durations as missing instead
    of raising.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=True, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DatasetError(f"{path} has no header row") from exc

    for name in MANDATORY_COLUMNS:
        if cols.get(name) is None or cols[name] not in frame.columns:
            raise DatasetError(f"missing mandatory column {name!r} (expected {cols.get(name)!r})")

    if frame.empty:
        return DatasetCatalog(0, 0, {}, set()), []

    for name in ("student_id", "exercise_id", "skill_id", "correct"):
        if frame[cols[name]].isna().any():
            raise DatasetError(f"column {cols[name]!r} has empty cells")

    correct_num = pd.to_numeric(frame[cols["correct"]], errors="coerce")
    bad = ~correct_num.isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DatasetError(f"invalid correctness value {frame[cols['correct']].iloc[row]!r} at row {row}")
    correct = correct_num.to_numpy(dtype=int)

    rt_raw = frame[cols["ms_response_time"]]
    rt = pd.to_numeric(rt_raw, errors="coerce").to_numpy(dtype=float) / 1000.0
    unparsable = np.isnan(rt) & rt_raw.notna().to_numpy()
    if unparsable.any():
        raise DatasetError(f"non-numeric response time at row {int(np.flatnonzero(unparsable)[0])}")
    negative = rt < 0
    if negative.any():
        if negative_time != "missing":
            raise DatasetError(f"negative response time at row {int(np.flatnonzero(negative)[0])}")
        rt[negative] = np.nan
    missing = np.isnan(rt)
    median = float(np.median(rt[~missing])) if (~missing).any() else 0.0

    order_col = cols.get("order")
    if order_col is not None and order_col in frame.columns:
        if frame[order_col].isna().any():
            raise DatasetError(f"column {order_col!r} has empty cells")
        order = _parse_order(frame[order_col])
    else:
        order = np.arange(len(frame), dtype=float)

    students = [_raw_str(s) for s in frame[cols["student_id"]]]
    exercises = [_raw_str(e) for e in frame[cols["exercise_id"]]]
    skill_cells = [_raw_str(k) for k in frame[cols["skill_id"]]]
    split_skills = [
        [p for p in cell.split(skill_separator) if p] if skill_separator else [cell]
        for cell in skill_cells
    ]

    ex_map, ex_labels = _dense_index(exercises)
    skill_map, skill_labels = _dense_index(k for ks in split_skills for k in ks)

    exercise_to_skill: dict[int, int] = {}
    records: list[InteractionRecord] = []
    for row in range(len(frame)):
        e = ex_map[exercises[row]]
        t = median if missing[row] else float(rt[row])
        for sub, raw_skill in enumerate(split_skills[row]):
            k = skill_map[raw_skill]
            exercise_to_skill.setdefault(e, k)
            records.append(InteractionRecord(
                student_id=students[row],
                exercise_id=e,
                skill_id=k,
                correct=int(correct[row]),
                response_time=t,
                order_key=float(order[row]),
                sub_index=sub,
                rt_imputed=bool(missing[row]),
            ))

    catalog = DatasetCatalog(
        exercise_count=len(ex_labels),
        skill_count=len(skill_labels),
        exercise_to_skill=exercise_to_skill,
        student_ids=set(students),
        exercise_labels=ex_labels,
        skill_labels=skill_labels,
    )
    return catalog, records


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[DatasetCatalog, list[InteractionRecord]]:
    data = simulate(config, seed)
    return data.catalog, data.records


def write_interactions(path: str | Path, records: Sequence[InteractionRecord]) -> None:
    """Write records in the canonical CSV schema (times in milliseconds)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANONICAL_COLUMNS)
        for r in records:
            writer.writerow([
                r.student_id, r.exercise_id, r.skill_id, r.correct,
                f"{r.response_time * 1000.0:.3f}", repr(r.order_key),
            ])


def build_sequences(records: Sequence[InteractionRecord], max_len: int = 200) -> list[StudentSequence]:
    """Group records per student, sort by order key and split into chunks of ``max_len``.

    Students appear in order of first occurrence in ``records``.
    """
    if max_len < 1:
        raise ValueError("max_len must be positive")
    by_student: dict[str, list[InteractionRecord]] = defaultdict(list)
    for r in records:
        by_student[r.student_id].append(r)

    sequences: list[StudentSequence] = []
    for sid, recs in by_student.items():
        recs = sorted(recs, key=lambda r: r.sort_key)
        for a, b in zip(recs, recs[1:]):
            if a.sort_key == b.sort_key:
                raise DatasetError(f"ambiguous ordering for student {sid!r} at order key {a.order_key}")
        for chunk, start in enumerate(range(0, len(recs), max_len)):
            sequences.append(StudentSequence(sid, tuple(recs[start:start + max_len]), chunk))
    return sequences


def segment_sequence(seq: StudentSequence, g: int = 5) -> list[Segment]:
    if g < 1:
        raise ValueError("segment length g must be at least 1")
    n = len(seq.steps)
    return [Segment(seq, start, min(start + g, n), i) for i, start in enumerate(range(0, n, g))]


def encode_step(record: InteractionRecord, m: int, cluster_id: int | None, K_clusters: int,
                *, encode_over: str = "skills") -> EncodedStep:
    """One-hot interaction block of width ``2m`` followed by a one-hot cluster block.

    Pass ``K_clusters=0`` and ``cluster_id=None`` for the cluster-free encoding.
    """
    index = record.skill_id if encode_over == "skills" else record.exercise_id
    if not 0 <= index < m:
        raise IndexError(f"{encode_over[:-1]} index {index} out of range for m={m}")
    if K_clusters:
        if cluster_id is None or not 0 <= cluster_id < K_clusters:
            raise IndexError(f"cluster id {cluster_id} out of range for K_clusters={K_clusters}")
    vec = np.zeros(2 * m + K_clusters)
    vec[index + record.correct * m] = 1.0
    if K_clusters:
        vec[2 * m + cluster_id] = 1.0
    return EncodedStep(vec, record.exercise_id, record.skill_id, record.correct)


@dataclass(frozen=True)
class SyntheticConfig:
    """Settings for the latent-ability student simulator.

    Ability of student s on skill k starts at
    ``ability_mean + N(0, student_std) + N(0, skill_std)`` and grows by the
    student's drift on every correct answer. The student's drift is
    ``drift_rate * exp(N(0, drift_spread))``.
    """

    n_students: int = 200
    n_skills: int = 5
    exercises_per_skill: int = 10
    steps_per_student: int = 100
    drift_rate: float = 0.3
    drift_spread: float = 0.5
    ability_mean: float = -1.0
    student_std: float = 1.0
    skill_std: float = 0.5
    difficulty_mean: float = 0.0
    difficulty_std: float = 0.7
    stickiness: float = 0.6  # probability of staying on the current skill
    base_time: float = 20.0  # seconds, at ability 0
    time_sensitivity: float = 0.5
    time_sigma: float = 0.3
    speed_coupling: float = 0.0

    def __post_init__(self):
        for name in ("n_students", "n_skills", "exercises_per_skill", "steps_per_student"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.base_time <= 0 or self.time_sigma < 0:
            raise ValueError("base_time must be positive and time_sigma nonnegative")


    @classmethod
    def separable(cls, **overrides) -> "SyntheticConfig":
        """Strong-drift preset: abilities move far from difficulties so outcomes become predictable."""
        base = dict(drift_rate=0.8, drift_spread=0.5, ability_mean=-2.0, student_std=1.5,
                    skill_std=1.0, difficulty_std=1.5, stickiness=0.7)
        base.update(overrides)
        return cls(**base)


@dataclass
class SyntheticDataset:
    catalog: DatasetCatalog
    records: list[InteractionRecord]
    probabilities: np.ndarray  # generator's P(correct) for each record


def simulate(config: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Run the student simulator, keeping the latent success probability of each answer."""
    rng = np.random.default_rng(seed)
    K, per = config.n_skills, config.exercises_per_skill
    n_ex = K * per
    difficulty = config.difficulty_mean + config.difficulty_std * rng.standard_normal(n_ex)
    records: list[InteractionRecord] = []
    probs: list[float] = []
    width = len(str(config.n_students - 1))
    for s in range(config.n_students):
        sid = f"s{s:0{width}d}"
        theta = (config.ability_mean + config.student_std * rng.standard_normal()
                 + config.skill_std * rng.standard_normal(K))
        z = rng.standard_normal()
        drift = config.drift_rate * math.exp(config.drift_spread * z)
        skill = int(rng.integers(K))
        for t in range(config.steps_per_student):
            if t > 0 and rng.random() >= config.stickiness:
                skill = int(rng.integers(K))
            j = skill * per + int(rng.integers(per))
            p = 1.0 / (1.0 + math.exp(-(theta[skill] - difficulty[j])))
            correct = int(rng.random() < p)
            mu = math.log(config.base_time) - config.time_sensitivity * theta[skill] - config.speed_coupling * z
            rt = float(rng.lognormal(mu, config.time_sigma))
            records.append(InteractionRecord(sid, j, skill, correct, rt, float(t)))
            probs.append(p)
            if correct:
                theta[skill] += drift

    catalog = DatasetCatalog(
        exercise_count=n_ex,
        skill_count=K,
        exercise_to_skill={j: j // per for j in range(n_ex)},
        student_ids={r.student_id for r in records},
        exercise_labels=[str(j) for j in range(n_ex)],
        skill_labels=[str(k) for k in range(K)],
    )
    return SyntheticDataset(catalog, records, np.array(probs))


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[DatasetCatalog, list[InteractionRecord]]:
    data = simulate(config, seed)
    return data.catalog, data.records


def align_records(records: Sequence[InteractionRecord], source: DatasetCatalog,
                  target: DatasetCatalog) -> list[InteractionRecord]:
    """Re-index records parsed against ``source`` into the dense ids of ``target``.

    Matching goes through the raw exercise and skill labels; records naming an
    exercise or skill unknown to ``target`` raise ``DatasetError``.
    """
    ex_map = {lab: i for i, lab in enumerate(target.exercise_labels)}
    sk_map = {lab: i for i, lab in enumerate(target.skill_labels)}
    out = []
    for r in records:
        try:
            e = ex_map[source.exercise_labels[r.exercise_id]]
            k = sk_map[source.skill_labels[r.skill_id]]
        except KeyError as exc:
            raise DatasetError(f"record of student {r.student_id!r} refers to unknown id {exc.args[0]!r}") from None
        out.append(dataclasses.replace(r, exercise_id=e, skill_id=k))
    return out
