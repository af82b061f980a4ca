"""Training pipeline: splits, feature preparation, SGD epochs, AUC evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .ability import (AbilityTimeline, ResponseTimeStats, build_timeline,
                      fit_response_time_stats)
from .clustering import ClusterModel, build_assignment_trace, kmeans_fit
from .dataset import (DatasetCatalog, EncodedStep, InteractionRecord, StudentSequence,
                      build_sequences, encode_step)
from .model import (Batch, ForwardCache, Gradients, Mode, ModelDims, ModelParams,
                    backward_batch, batch_losses, forward_batch, init_params)

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    d_k: int = 16
    d_h: int = 32
    K_clusters: int = 10
    g: int = 5
    max_seq_len: int = 200
    batch_size: int = 24
    learning_rate: float = 0.01
    epochs: int = 10
    folds: int = 5
    fold: int = 0
    seed: int = 0
    mode: str = "aa-dkta"
    c_max: float = 5.0
    clip_norm: float = 5.0
    encode_over: str = "skills"
    ability_agg: str = "sum"
    invert_ratio: bool = False
    attend_tagged_only: bool = False
    ability_window: str = "cumulative"
    cluster_fit_on: str = "final"
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        self.mode = Mode.parse(self.mode).value
        for name in ("d_k", "d_h", "K_clusters", "g", "max_seq_len", "batch_size", "epochs", "folds"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"config key {name!r} must be positive")
        for name in ("learning_rate", "c_max", "clip_norm"):
            if not getattr(self, name) > 0:
                raise TrainingError(f"config key {name!r} must be positive")
        if not 0 <= self.fold < self.folds:
            raise TrainingError("config key 'fold' must lie in [0, folds)")
        if self.encode_over not in ("skills", "exercises"):
            raise TrainingError("config key 'encode_over' must be 'skills' or 'exercises'")
        if self.ability_window not in ("cumulative", "segment"):
            raise TrainingError("config key 'ability_window' must be 'cumulative' or 'segment'")
        if self.cluster_fit_on not in ("final", "segments"):
            raise TrainingError("config key 'cluster_fit_on' must be 'final' or 'segments'")
        if self.ability_agg not in ("sum", "mean"):
            raise TrainingError("config key 'ability_agg' must be 'sum' or 'mean'")

    @property
    def model_mode(self) -> Mode:
        return Mode(self.mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FoldSplit:
    train_students: frozenset
    validation_students: frozenset
    test_students: frozenset


@dataclass
class Metrics:
    auc: float
    loss: float
    n_predictions: int = 0
    per_epoch_history: list[dict] = field(default_factory=list)


def split_folds(student_ids: Iterable[str], folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Student-level rotation: fold f tests on part f, validates on part f+1, trains on the rest."""
    ids = sorted(set(student_ids))
    if folds < 3:
        raise TrainingError("need at least 3 folds for train/validation/test roles")
    if len(ids) < folds:
        raise TrainingError(f"too few students ({len(ids)}) for {folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = [frozenset(ids[i] for i in chunk) for chunk in np.array_split(order, folds)]
    splits = []
    for f in range(folds):
        test, val = parts[f], parts[(f + 1) % folds]
        train = frozenset().union(*(p for i, p in enumerate(parts) if i not in (f, (f + 1) % folds)))
        splits.append(FoldSplit(train, val, test))
    return splits


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney area under the ROC curve; tied scores count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """In-place update ``theta -= lr * grad``; returns ``params``."""
    for name, t in params.tensors.items():
        g = grads.tensors[name]
        if g.shape != t.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {t.shape}")
        t -= lr * g
    return params


@dataclass
class TrainedModel:
    """Everything needed to encode histories and predict with a fitted model."""

    config: TrainConfig
    catalog: DatasetCatalog
    params: ModelParams
    stats: ResponseTimeStats | None = None
    clusters: ClusterModel | None = None
    representatives: dict[int, int] = field(default_factory=dict)  # skill -> exercise

    @property
    def mode(self) -> Mode:
        return self.params.mode

    @property
    def m(self) -> int:
        return self.params.dims.m

    def concept_mask(self) -> np.ndarray | None:
        if not (self.config.attend_tagged_only and self.mode.attention):
            return None
        mask = np.zeros((self.catalog.exercise_count, self.catalog.skill_count), dtype=bool)
        for e, k in self.catalog.exercise_to_skill.items():
            mask[e, k] = True
        mask[~mask.any(axis=1)] = True
        return mask

    def timeline(self, seq: StudentSequence) -> AbilityTimeline:
        return build_timeline(seq, self.config.g, self.stats, self.catalog.skill_count, self.config.c_max,
                              agg=self.config.ability_agg, invert_ratio=self.config.invert_ratio)

    def step_clusters(self, seq: StudentSequence) -> list[int] | None:
        if not self.mode.clusters or not seq.steps:
            return None
        trace = build_assignment_trace(self.timeline(seq), self.clusters,
                                       cumulative=self.config.ability_window == "cumulative")
        g = self.config.g
        return [trace.per_segment_cluster[t // g] for t in range(len(seq.steps))]

    def encode(self, seq: StudentSequence) -> list[EncodedStep]:
        clusters = self.step_clusters(seq)
        K = self.config.K_clusters if self.mode.clusters else 0
        return [
            encode_step(r, self.m, None if clusters is None else clusters[t], K,
                        encode_over=self.config.encode_over)
            for t, r in enumerate(seq.steps)
        ]

    def batch(self, sequences: Sequence[StudentSequence]) -> Batch:
        return Batch.from_steps([self.encode(s) for s in sequences], width=self.params["W_xh"].shape[1])

    def forward(self, sequences: Sequence[StudentSequence]) -> tuple[Batch, ForwardCache]:
        b = self.batch(sequences)
        return b, forward_batch(b, self.params, self.concept_mask())


def _fit_companions(config: TrainConfig, catalog: DatasetCatalog,
                    train_seqs: Sequence[StudentSequence]) -> tuple[ResponseTimeStats | None, ClusterModel | None]:
    mode = config.model_mode
    if not mode.clusters:
        return None, None
    stats = fit_response_time_stats([r for s in train_seqs for r in s.steps])
    points = []
    for s in train_seqs:
        tl = build_timeline(s, config.g, stats, catalog.skill_count, config.c_max,
                            agg=config.ability_agg, invert_ratio=config.invert_ratio)
        vectors = tl.cumulative if config.ability_window == "cumulative" else tl.per_segment
        points.extend(vectors[-1:] if config.cluster_fit_on == "final" else vectors)
    clusters = kmeans_fit(points, config.K_clusters, config.seed, config.kmeans_max_iter, config.kmeans_tol)
    return stats, clusters


def representative_exercises(catalog: DatasetCatalog, records: Iterable[InteractionRecord]) -> dict[int, int]:
    """Most frequent exercise per skill (lowest id on ties); unseen skills fall back to the catalog."""
    counts: dict[int, Counter] = {}
    for r in records:
        counts.setdefault(r.skill_id, Counter())[r.exercise_id] += 1
    reps = {k: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for k, c in counts.items()}
    for e, k in sorted(catalog.exercise_to_skill.items()):
        reps.setdefault(k, e)
    return dict(sorted(reps.items()))


def _dims(config: TrainConfig, catalog: DatasetCatalog) -> ModelDims:
    m = catalog.skill_count if config.encode_over == "skills" else catalog.exercise_count
    return ModelDims(config.d_k, config.d_h, m, config.K_clusters, catalog.skill_count, catalog.exercise_count)


def evaluate(model: TrainedModel, sequences: Sequence[StudentSequence], batch_size: int = 256) -> Metrics:
    """Pooled next-answer AUC and mean per-step loss over ``sequences``."""
    sequences = [s for s in sequences if s.steps]
    if not sequences:
        raise TrainingError("cannot evaluate an empty split")
    scores, labels, total = [], [], 0.0
    for start in range(0, len(sequences), batch_size):
        b, cache = model.forward(sequences[start:start + batch_size])
        scores.append(cache.Y[b.mask])
        labels.append(b.labels[b.mask])
        total += float(batch_losses(cache, b).sum())
    y = np.concatenate(scores)
    r = np.concatenate(labels)
    return Metrics(auc(y, r), total / len(y), len(y))


def train_model(config: TrainConfig, catalog: DatasetCatalog, records: Sequence[InteractionRecord],
                split: FoldSplit | None = None) -> tuple[TrainedModel, Metrics]:
    """Fit timing stats, clusters and network on the training students.

    The returned model holds the parameters of the epoch with the best
    validation AUC. ``Metrics.per_epoch_history`` has one entry per epoch
    with the mean per-step training loss and the validation AUC.
    """
    mode = config.model_mode
    if split is None:
        split = split_folds(catalog.student_ids or {r.student_id for r in records},
                            config.folds, config.seed)[config.fold]
    sequences = build_sequences(records, config.max_seq_len)
    train_seqs = [s for s in sequences if s.student_id in split.train_students]
    val_seqs = [s for s in sequences if s.student_id in split.validation_students]
    test_seqs = [s for s in sequences if s.student_id in split.test_students]
    if not train_seqs:
        raise TrainingError("training split is empty")

    stats, clusters = _fit_companions(config, catalog, train_seqs)
    params = init_params(_dims(config, catalog), config.seed, mode)
    model = TrainedModel(config, catalog, params, stats, clusters,
                         representative_exercises(catalog, (r for s in train_seqs for r in s.steps)))
    mask = model.concept_mask()

    encoded = [model.encode(s) for s in train_seqs]
    width = params["W_xh"].shape[1]
    rng = np.random.default_rng(config.seed)
    best_auc, best_params = -np.inf, params.copy()
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(encoded))
        loss_sum, steps = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            b = Batch.from_steps([encoded[i] for i in order[start:start + config.batch_size]], width=width)
            cache = forward_batch(b, params, mask)
            loss_sum += float(batch_losses(cache, b).sum())
            steps += int(b.mask.sum())
            grads = backward_batch(b, params, cache, clip_norm=config.clip_norm, concept_mask=mask)
            sgd_step(params, grads, config.learning_rate)
        row = {"epoch": epoch, "loss": loss_sum / max(steps, 1), "val_auc": float("nan")}
        if val_seqs:
            row["val_auc"] = evaluate(model, val_seqs).auc
            if row["val_auc"] > best_auc:
                best_auc, best_params = row["val_auc"], params.copy()
        else:
            best_params = params.copy()
        history.append(row)
        log.info("epoch %d loss %.4f val_auc %.4f", epoch, row["loss"], row["val_auc"])

    model.params = best_params
    if test_seqs:
        metrics = evaluate(model, test_seqs)
    else:
        metrics = Metrics(float("nan"), float("nan"), 0)
    metrics.per_epoch_history = history
    return model, metrics


def write_history_csv(path: str | Path, history: Sequence[dict]) -> None:
    lines = ["epoch,loss,val_auc"]
    for row in history:
        lines.append(f"{row['epoch']},{row['loss']!r},{row['val_auc']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_trained(model: TrainedModel, out_dir: str | Path) -> dict[str, str]:
    """Write checkpoint and companions into ``out_dir``; returns name -> file path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "checkpoint.json", "catalog": out / "catalog.json",
             "config": out / "config.json", "representatives": out / "representatives.json"}
    model.params.save(paths["checkpoint"])
    model.catalog.save(paths["catalog"])
    paths["config"].write_text(json.dumps({"schema_version": 1, **model.config.to_dict()}, indent=1, sort_keys=True))
    paths["representatives"].write_text(json.dumps(
        {"schema_version": 1, "representatives": {str(k): v for k, v in model.representatives.items()}}, indent=1))
    if model.stats is not None:
        paths["stats"] = out / "stats.json"
        model.stats.save(paths["stats"])
    if model.clusters is not None:
        paths["clusters"] = out / "clusters.json"
        model.clusters.save(paths["clusters"])
    return {k: str(v) for k, v in paths.items()}


def load_trained(run_dir: str | Path) -> TrainedModel:
    run = Path(run_dir)
    ckpt = run / "checkpoint.json"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    cfg = json.loads((run / "config.json").read_text())
    cfg.pop("schema_version", None)
    config = TrainConfig(**cfg)
    reps = json.loads((run / "representatives.json").read_text())["representatives"]
    return TrainedModel(
        config=config,
        catalog=DatasetCatalog.load(run / "catalog.json"),
        params=ModelParams.load(ckpt),
        stats=ResponseTimeStats.load(run / "stats.json") if (run / "stats.json").exists() else None,
        clusters=ClusterModel.load(run / "clusters.json") if (run / "clusters.json").exists() else None,
        representatives={int(k): int(v) for k, v in reps.items()},
    )
