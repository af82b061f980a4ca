"""Command-line entry point: ``aadkta <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (DatasetCatalog, SyntheticConfig, align_records, build_sequences,
                      generate_synthetic, parse_interactions, write_interactions)
from .explain import (ability_snapshot, infer_path, knowledge_state_trace, write_radar_csv)
from .schemas import ARTIFACT_SCHEMAS, MANIFEST, RUN_CONFIG, ConfigError, validate
from .training import (TrainConfig, TrainedModel, evaluate, load_trained, save_trained,
                       split_folds, train_model, write_history_csv)

log = logging.getLogger("aadkta")

COMMANDS = ("ingest", "synth", "train", "eval", "predict", "explain", "trace", "cluster-report", "sweep-k")


class CLIError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_run_config(path: str | None) -> dict:
    if path is None:
        return {"schema_version": 1}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
    validate(cfg, RUN_CONFIG, f"config {p}")
    return cfg


def _train_config(run_cfg: dict, args) -> TrainConfig:
    values = dict(run_cfg.get("train", {}))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        values["mode"] = args.mode
    if getattr(args, "k_clusters", None) is not None:
        values["K_clusters"] = args.k_clusters
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    validate({"train": values}, RUN_CONFIG, "config")
    return TrainConfig(**values)


def _synthetic_config(run_cfg: dict, args) -> SyntheticConfig:
    values = dict(run_cfg.get("synthetic", {}))
    preset = values.pop("preset", None) or getattr(args, "preset", None) or "default"
    if getattr(args, "students", None) is not None:
        values["n_students"] = args.students
    return SyntheticConfig.separable(**values) if preset == "separable" else SyntheticConfig(**values)


def _load_dataset(path: str | None, run_cfg: dict):
    if path is None:
        raise CLIError("--dataset is required for this command")
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"dataset not found: {p}")
    return parse_interactions(p, run_cfg.get("columns"),
                              skill_separator=run_cfg.get("skill_separator", "_"),
                              negative_time=run_cfg.get("negative_time", "error"))


def _load_run(args) -> TrainedModel:
    run = Path(args.run)
    if not (run / "checkpoint.json").is_file():
        raise CLIError(f"checkpoint not found: {run / 'checkpoint.json'}")
    return load_trained(run)


def _run_dataset(model: TrainedModel, args, run_cfg: dict):
    catalog, records = _load_dataset(args.dataset, run_cfg)
    return align_records(records, catalog, model.catalog)


def _sequences_for(model: TrainedModel, records, split: str):
    seqs = build_sequences(records, model.config.max_seq_len)
    if split == "all":
        return seqs
    fold = split_folds(model.catalog.student_ids, model.config.folds, model.config.seed)[model.config.fold]
    members = {"train": fold.train_students, "validation": fold.validation_students,
               "test": fold.test_students}[split]
    return [s for s in seqs if s.student_id in members]


def _student_sequences(records, model: TrainedModel, student: str):
    seqs = [s for s in build_sequences(records, model.config.max_seq_len) if s.student_id == student]
    if not seqs:
        raise CLIError(f"student {student!r} not found in dataset")
    return seqs


def _exercise_index(model: TrainedModel, label: str) -> int:
    try:
        return model.catalog.exercise_labels.index(label)
    except ValueError:
        raise CLIError(f"unknown exercise {label!r}") from None


class Manifest:
    """Run manifest, written before any other artifact and finalized at the end."""

    def __init__(self, out: Path, command: str, seed: int, config: dict, inputs: dict):
        self.path = out / "manifest.json"
        self.data = {
            "schema_version": 1, "tool": "aadkta", "version": __version__, "command": command,
            "seed": seed, "config": config, "inputs": inputs, "artifacts": {}, "status": "running",
        }
        out.mkdir(parents=True, exist_ok=True)
        _dump(self.path, self.data)

    def add(self, name: str, path: Path | str) -> None:
        self.data["artifacts"][name] = {"path": Path(path).name}

    def finalize(self) -> None:
        base = self.path.parent
        for name, entry in self.data["artifacts"].items():
            p = base / entry["path"]
            if not p.is_file():
                raise CLIError(f"artifact {name} missing: {p}")
            if p.suffix == ".json":
                validate(json.loads(p.read_text()), ARTIFACT_SCHEMAS.get(name, ARTIFACT_SCHEMAS["config"]),
                         f"artifact {p.name}")
            entry["sha256"] = _sha256(p)
        self.data["status"] = "complete"
        validate(self.data, MANIFEST, "manifest")
        _dump(self.path, self.data)


def cmd_ingest(args, run_cfg):
    catalog, records = _load_dataset(args.dataset, run_cfg)
    out = Path(args.out)
    man = Manifest(out, "ingest", args.seed or 0, run_cfg, {"dataset": str(args.dataset)})
    catalog.save(out / "catalog.json")
    write_interactions(out / "interactions.csv", records)
    man.add("catalog", out / "catalog.json")
    man.add("interactions", out / "interactions.csv")
    man.finalize()
    imputed = sum(r.rt_imputed for r in records)
    print(f"{len(records)} records, {len(catalog.student_ids)} students, {catalog.exercise_count} exercises, "
          f"{catalog.skill_count} skills, {imputed} imputed response times")


def cmd_synth(args, run_cfg):
    seed = args.seed if args.seed is not None else 0
    gen = _synthetic_config(run_cfg, args)
    catalog, records = generate_synthetic(gen, seed)
    out = Path(args.out)
    man = Manifest(out, "synth", seed, {**run_cfg, "synthetic": dataclasses.asdict(gen)}, {})
    write_interactions(out / "interactions.csv", records)
    catalog.save(out / "catalog.json")
    man.add("interactions", out / "interactions.csv")
    man.add("catalog", out / "catalog.json")
    man.finalize()
    print(f"wrote {len(records)} records for {gen.n_students} students to {out / 'interactions.csv'}")


def _train_and_write(config: TrainConfig, catalog, records, out: Path, man: Manifest) -> dict:
    model, metrics = train_model(config, catalog, records)
    for name, path in save_trained(model, out).items():
        man.add(name, path)
    write_history_csv(out / "metrics.csv", metrics.per_epoch_history)
    man.add("metrics", out / "metrics.csv")
    test = {"schema_version": 1, "auc": metrics.auc, "loss": metrics.loss, "n_predictions": metrics.n_predictions}
    _dump(out / "test_metrics.json", test)
    man.add("test_metrics", out / "test_metrics.json")
    return test


def cmd_train(args, run_cfg):
    dataset = args.dataset
    if args.manifest:
        mp = Path(args.manifest)
        if not mp.is_file():
            raise CLIError(f"manifest not found: {mp}")
        old = json.loads(mp.read_text())
        validate(old, MANIFEST, f"manifest {mp}")
        run_cfg = old["config"]
        dataset = dataset or old["inputs"]["dataset"]
        config = TrainConfig(**run_cfg["train"])
    else:
        config = _train_config(run_cfg, args)
    catalog, records = _load_dataset(dataset, run_cfg)
    out = Path(args.out)
    snapshot = {k: v for k, v in run_cfg.items() if k != "train"}
    snapshot["train"] = config.to_dict()
    man = Manifest(out, "train", config.seed, snapshot,
                   {"dataset": str(dataset), "dataset_sha256": _sha256(Path(dataset))})
    test = _train_and_write(config, catalog, records, out, man)
    man.finalize()
    print(f"mode {config.mode} K={config.K_clusters}: test AUC {test['auc']:.4f}, loss {test['loss']:.4f} -> {out}")


def cmd_eval(args, run_cfg):
    model = _load_run(args)
    records = _run_dataset(model, args, run_cfg)
    metrics = evaluate(model, _sequences_for(model, records, args.split))
    result = {"schema_version": 1, "split": args.split, "auc": metrics.auc, "loss": metrics.loss,
              "n_predictions": metrics.n_predictions}
    if args.out:
        _dump(Path(args.out), result)
    print(json.dumps(result))


def cmd_predict(args, run_cfg):
    model = _load_run(args)
    records = _run_dataset(model, args, run_cfg)
    seqs = (_student_sequences(records, model, args.student) if args.student
            else _sequences_for(model, records, args.split))
    rows = []
    for start in range(0, len(seqs), 256):
        part = seqs[start:start + 256]
        b, cache = model.forward(part)
        for i, s in enumerate(part):
            for t, r in enumerate(s.steps):
                rows.append([s.student_id, s.chunk_index, t, model.catalog.exercise_labels[r.exercise_id],
                             model.catalog.skill_labels[r.skill_id], r.correct, repr(float(cache.Y[i, t]))])
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["student_id", "chunk", "step", "exercise_id", "skill_id", "correct", "p_correct"])
    w.writerows(rows)
    if args.out:
        fh.close()


def cmd_explain(args, run_cfg):
    model = _load_run(args)
    records = _run_dataset(model, args, run_cfg)
    history = _student_sequences(records, model, args.student)[-1]
    path = infer_path(history, _exercise_index(model, args.exercise), model)
    doc = path.to_json()
    doc["student_id"] = args.student
    labels = model.catalog.exercise_labels
    # nodes use internal indices; keep the dataset's own ids alongside
    doc["target_label"] = labels[path.target_exercise]
    doc["evidence_label"] = None if path.evidence_exercise is None else labels[path.evidence_exercise]
    if args.out:
        _dump(Path(args.out), doc)
    else:
        print(json.dumps(doc, sort_keys=True))
    print(path.verdict_text)


def cmd_trace(args, run_cfg):
    model = _load_run(args)
    records = _run_dataset(model, args, run_cfg)
    history = _student_sequences(records, model, args.student)[-1]
    probes = [int(p) for p in args.probes.split(",")] if args.probes else None
    matrix = knowledge_state_trace(history, model, probes)
    matrix.write_csv(args.out)
    if args.svg:
        matrix.write_svg(args.svg)
    if args.radar:
        if model.stats is None:
            raise CLIError(f"mode {model.mode.value} has no ability statistics for radar data")
        tl = model.timeline(history)
        last = len(tl.cumulative) - 1
        write_radar_csv(args.radar, [ability_snapshot(tl, 0, model.catalog.skill_labels),
                                     ability_snapshot(tl, last, model.catalog.skill_labels)])
    print(f"wrote {matrix.cells.shape[0]}x{matrix.cells.shape[1]} knowledge-state matrix to {args.out}")


def cluster_report(model: TrainedModel, sequences) -> tuple[list[list], list[list]]:
    if model.clusters is None:
        raise CLIError(f"mode {model.mode.value} has no cluster model")
    population = Counter()
    migrations = Counter()
    for s in sequences:
        trace = model.step_clusters(s)
        if not trace:
            continue
        per_seg = trace[::model.config.g]
        population.update(per_seg)
        for seg, (a, b) in enumerate(zip(per_seg, per_seg[1:]), start=1):
            if a != b:
                migrations[(seg, a, b)] += 1
    clusters = [[k, population[k], repr(float(np.linalg.norm(c)))] for k, c in enumerate(model.clusters.centroids)]
    moves = [[seg, a, b, n] for (seg, a, b), n in sorted(migrations.items())]
    return clusters, moves


def cmd_cluster_report(args, run_cfg):
    model = _load_run(args)
    records = _run_dataset(model, args, run_cfg)
    clusters, moves = cluster_report(model, _sequences_for(model, records, args.split))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "clusters.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "population", "centroid_norm"])
        w.writerows(clusters)
    with open(out / "migrations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "from_cluster", "to_cluster", "count"])
        w.writerows(moves)
    print(f"wrote {out / 'clusters.csv'} and {out / 'migrations.csv'}")


def cmd_sweep_k(args, run_cfg):
    base = _train_config(run_cfg, args)
    catalog, records = _load_dataset(args.dataset, run_cfg)
    ks = [int(k) for k in args.ks.split(",")]
    out = Path(args.out)
    man = Manifest(out, "sweep-k", base.seed, {**run_cfg, "train": base.to_dict()},
                   {"dataset": str(args.dataset), "ks": ks, "repeats": args.repeats})
    rows = []
    for k in ks:
        aucs = []
        for r in range(args.repeats):
            cfg = dataclasses.replace(base, K_clusters=k, seed=base.seed + r)
            _, metrics = train_model(cfg, catalog, records)
            aucs.append(metrics.auc)
            log.info("K=%d repeat %d AUC %.4f", k, r, metrics.auc)
        rows.append([k, repr(float(np.mean(aucs))), repr(float(np.std(aucs))), args.repeats])
    with open(out / "sweep_k.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "auc", "auc_std", "repeats"])
        w.writerows(rows)
    man.add("sweep", out / "sweep_k.csv")
    man.finalize()
    for k, a, sd, _ in rows:
        print(f"K={k}: AUC {float(a):.4f} +/- {float(sd):.4f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["dkt", "dkt-a", "aa-dkt", "aa-dkta"])
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--dataset", help="interaction CSV")
    common.add_argument("--k-clusters", type=int, dest="k_clusters")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--run", "--checkpoint", dest="run", required=True, help="directory written by train")
    run.add_argument("--split", choices=["train", "validation", "test", "all"], default="test")

    parser = argparse.ArgumentParser(prog="aadkta", description="Ability- and attention-augmented knowledge tracing")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("ingest", parents=[common], help="parse a CSV log into catalog + canonical CSV")
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--preset", choices=["default", "separable"])
    p.add_argument("--students", type=int)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest", help="re-run the train command recorded in this manifest")
    sub.add_parser("eval", parents=[common, run], help="evaluate a trained run")
    p = sub.add_parser("predict", parents=[common, run], help="per-step predictions as CSV")
    p.add_argument("--student")
    p = sub.add_parser("explain", parents=[common, run], help="inference path for one target exercise")
    p.add_argument("--student", required=True)
    p.add_argument("--exercise", required=True, help="exercise id as it appears in the dataset")
    p = sub.add_parser("trace", parents=[common, run], help="knowledge-state matrix for one student")
    p.add_argument("--student", required=True)
    p.add_argument("--probes", help="comma-separated concept indices")
    p.add_argument("--svg", help="also write an SVG heatmap")
    p.add_argument("--radar", help="also write before/after ability radar data as CSV")
    sub.add_parser("cluster-report", parents=[common, run], help="cluster populations and migrations")
    p = sub.add_parser("sweep-k", parents=[common], help="train/evaluate over several cluster counts")
    p.add_argument("--ks", default="3,5,10")
    p.add_argument("--repeats", type=int, default=1)
    return parser


HANDLERS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "explain": cmd_explain, "trace": cmd_trace,
    "cluster-report": cmd_cluster_report, "sweep-k": cmd_sweep_k,
}


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_out = {"ingest", "synth", "train", "trace", "cluster-report", "sweep-k"}
    if args.command in needs_out and not args.out:
        print(f"aadkta {args.command}: error: --out is required", file=sys.stderr)
        return 2
    try:
        run_cfg = load_run_config(args.config)
        HANDLERS[args.command](args, run_cfg)
    except (CLIError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"aadkta {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
