"""Inference paths and knowledge-state / ability exports for trained models."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ability import AbilityTimeline
from .dataset import InteractionRecord, StudentSequence
from .model import Batch, forward_batch, read_and_predict
from .training import TrainedModel


class ExplainError(ValueError):
    pass


@dataclass
class InferencePath:
    target_exercise: int
    concept: int
    evidence_step: int | None
    evidence_exercise: int | None
    evidence_result: int | None
    attention_weight: float
    probability: float
    verdict_text: str

    @property
    def nodes(self) -> list[str]:
        nodes = [f"e{self.target_exercise}", f"k{self.concept}"]
        if self.evidence_exercise is not None:
            nodes.append(f"e{self.evidence_exercise}")
        return nodes

    def to_json(self) -> dict:
        return {"schema_version": 1, "path": "-".join(self.nodes), **asdict(self)}


@dataclass
class KnowledgeStateMatrix:
    probes: list[int]  # concept ids, one per column
    exercises: list[int]  # representative exercise per probe
    cells: np.ndarray  # (rows, len(probes))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"concept_{k}" for k in self.probes])
            for t, row in enumerate(self.cells):
                w.writerow([t] + [repr(float(v)) for v in row])

    def write_svg(self, path: str | Path, cell: int = 18) -> None:
        rows, cols = self.cells.shape
        left, top = 80, 20
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + rows * cell + 10}" '
                 f'height="{top + cols * cell + 30}" font-family="sans-serif" font-size="10">']
        for j in range(cols):
            parts.append(f'<text x="4" y="{top + j * cell + cell - 5}">concept {self.probes[j]}</text>')
            for t in range(rows):
                v = float(self.cells[t, j])
                shade = int(round(255 * v))
                parts.append(f'<rect x="{left + t * cell}" y="{top + j * cell}" width="{cell}" height="{cell}" '
                             f'fill="rgb({255 - shade},{255 - shade // 2},255)"><title>{v:.3f}</title></rect>')
        for t in range(rows):
            parts.append(f'<text x="{left + t * cell + 3}" y="{top + cols * cell + 14}">{t}</text>')
        parts.append("</svg>")
        Path(path).write_text("\n".join(parts) + "\n")


def _with_target(history: StudentSequence, exercise: int, skill: int) -> StudentSequence:
    last = history.steps[-1].order_key if history.steps else 0.0
    probe = InteractionRecord(history.student_id, exercise, skill, 0, 0.0, last + 1.0)
    return StudentSequence(history.student_id, history.steps + (probe,), history.chunk_index)


def infer_path(history: StudentSequence, target_exercise: int, model: TrainedModel) -> InferencePath:
    """Explain the prediction for ``target_exercise`` following ``history``.

    The concept is the one with the largest attention weight (lowest index on
    ties); the evidence is the most recent past answer on that concept.
    """
    catalog = model.catalog
    if target_exercise not in catalog.exercise_to_skill:
        raise ExplainError(f"unknown exercise {target_exercise}")
    if not model.mode.attention:
        raise ExplainError(f"mode {model.mode.value} has no attention weights to explain")
    seq = _with_target(history, target_exercise, catalog.exercise_to_skill[target_exercise])
    _, cache = model.forward([seq])
    t = len(history.steps)
    alpha = cache.alpha[0, t]
    y = float(cache.Y[0, t])
    k = int(np.argmax(alpha))
    weight = float(alpha[k])

    evidence = next((i for i in range(t - 1, -1, -1) if history.steps[i].skill_id == k), None)
    outlook = "likely correct" if y >= 0.5 else "likely incorrect"
    head = f"e{target_exercise} is predicted {outlook} (p={y:.3f}); it relates most to concept k{k} (attention {weight:.3f})"
    if evidence is None:
        return InferencePath(target_exercise, k, None, None, None, weight, y,
                             head + f"; no direct evidence: no earlier answer on concept k{k}.")
    rec = history.steps[evidence]
    if rec.correct:
        tail = f"; the learner answered e{rec.exercise_id} on k{k} correctly at step {evidence}, supporting mastery of k{k}."
    else:
        tail = f"; the learner answered e{rec.exercise_id} on k{k} incorrectly at step {evidence}, indicating low mastery of k{k}."
    return InferencePath(target_exercise, k, evidence, rec.exercise_id, rec.correct, weight, y, head + tail)


def knowledge_state_trace(history: StudentSequence, model: TrainedModel,
                          probe_concepts: Sequence[int] | None = None) -> KnowledgeStateMatrix:
    """Probability of answering each probe concept's representative exercise right after every step.

    Row t uses the hidden state after observing steps 0..t; an empty history
    gives a single row from the initial state.
    """
    if probe_concepts is None:
        probe_concepts = list(range(model.catalog.skill_count))
    probes = list(probe_concepts)
    exercises = []
    for k in probes:
        if k not in model.representatives:
            raise ExplainError(f"probe concept {k} has no exercises")
        exercises.append(model.representatives[k])

    if history.steps:
        # one extra placeholder step so that the hidden state after the last observed step is computed
        seq = _with_target(history, exercises[0], probes[0])
        batch = model.batch([seq])
        H = forward_batch(batch, model.params, model.concept_mask()).H[0, 1:]
    else:
        H = np.zeros((1, model.params.dims.d_h))
    ex = np.broadcast_to(np.array(exercises), (len(H), len(exercises)))
    h = np.broadcast_to(H[:, None, :], (len(H), len(exercises), H.shape[1]))
    _, _, _, y = read_and_predict(model.params, h, ex, model.concept_mask())
    return KnowledgeStateMatrix(probes, exercises, np.asarray(y))


@dataclass
class AbilitySnapshot:
    segment: int
    skill_labels: list[str]
    values: np.ndarray

    def to_json(self) -> dict:
        return {"schema_version": 1, "segment": self.segment,
                "values": {lab: float(v) for lab, v in zip(self.skill_labels, self.values)}}


def ability_snapshot(timeline: AbilityTimeline, at_segment: int,
                     skill_labels: Sequence[str] | None = None) -> AbilitySnapshot:
    if not 0 <= at_segment < len(timeline.cumulative):
        raise ExplainError(f"segment {at_segment} out of range for a timeline of {len(timeline.cumulative)} segments")
    values = timeline.cumulative[at_segment].values.copy()
    labels = list(skill_labels) if skill_labels is not None else [str(k) for k in range(len(values))]
    return AbilitySnapshot(at_segment, labels, values)


def write_radar_csv(path: str | Path, snapshots: Sequence[AbilitySnapshot]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "skill", "ability"])
        for snap in snapshots:
            for lab, v in zip(snap.skill_labels, snap.values):
                w.writerow([snap.segment, lab, repr(float(v))])
