"""JSON schemas for the run config and emitted artifacts."""

from __future__ import annotations

import jsonschema

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

TRAIN_PROPERTIES = {
    "d_k": _pos_int,
    "d_h": _pos_int,
    "K_clusters": _pos_int,
    "g": _pos_int,
    "max_seq_len": _pos_int,
    "batch_size": _pos_int,
    "learning_rate": _pos_num,
    "epochs": _pos_int,
    "folds": {"type": "integer", "minimum": 3},
    "fold": {"type": "integer", "minimum": 0},
    "seed": {"type": "integer"},
    "mode": {"enum": ["dkt", "dkt-a", "aa-dkt", "aa-dkta"]},
    "c_max": _pos_num,
    "clip_norm": _pos_num,
    "encode_over": {"enum": ["skills", "exercises"]},
    "ability_agg": {"enum": ["sum", "mean"]},
    "invert_ratio": {"type": "boolean"},
    "attend_tagged_only": {"type": "boolean"},
    "ability_window": {"enum": ["cumulative", "segment"]},
    "cluster_fit_on": {"enum": ["final", "segments"]},
    "kmeans_max_iter": _pos_int,
    "kmeans_tol": _pos_num,
}

SYNTHETIC_PROPERTIES = {
    "preset": {"enum": ["default", "separable"]},
    "n_students": _pos_int,
    "n_skills": _pos_int,
    "exercises_per_skill": _pos_int,
    "steps_per_student": _pos_int,
    "drift_rate": {"type": "number", "minimum": 0},
    "drift_spread": {"type": "number", "minimum": 0},
    "ability_mean": {"type": "number"},
    "student_std": {"type": "number", "minimum": 0},
    "skill_std": {"type": "number", "minimum": 0},
    "difficulty_mean": {"type": "number"},
    "difficulty_std": {"type": "number", "minimum": 0},
    "stickiness": {"type": "number", "minimum": 0, "maximum": 1},
    "base_time": _pos_num,
    "time_sensitivity": {"type": "number"},
    "time_sigma": {"type": "number", "minimum": 0},
    "speed_coupling": {"type": "number"},
}

RUN_CONFIG = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "train": {"type": "object", "additionalProperties": False, "properties": TRAIN_PROPERTIES},
        "synthetic": {"type": "object", "additionalProperties": False, "properties": SYNTHETIC_PROPERTIES},
        "columns": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": ["string", "null"]} for k in
                           ("student_id", "exercise_id", "skill_id", "correct", "ms_response_time", "order")},
        },
        "skill_separator": {"type": ["string", "null"]},
        "negative_time": {"enum": ["error", "missing"]},
    },
}

_versioned = {"schema_version": {"const": 1}}

MANIFEST = {
    "type": "object",
    "required": ["schema_version", "tool", "version", "command", "seed", "config", "artifacts", "status"],
    "properties": {
        **_versioned,
        "tool": {"const": "aadkta"},
        "status": {"enum": ["running", "complete"]},
        "artifacts": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["path"],
                "properties": {"path": {"type": "string"}, "sha256": {"type": "string"}},
            },
        },
    },
}

CHECKPOINT = {
    "type": "object",
    "required": ["format", "schema_version", "mode", "dims", "tensors", "seed"],
    "properties": {
        "format": {"const": "aadkta-checkpoint"},
        "schema_version": {"const": 1},
        "tensors": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["shape", "data"],
                "properties": {"shape": {"type": "array", "items": {"type": "integer"}},
                               "data": {"type": "array", "items": {"type": "number"}}},
            },
        },
    },
}

CATALOG = {
    "type": "object",
    "required": ["schema_version", "exercise_count", "skill_count", "exercise_to_skill"],
    "properties": {**_versioned, "exercise_count": {"type": "integer", "minimum": 0},
                   "skill_count": {"type": "integer", "minimum": 0},
                   "exercise_to_skill": {"type": "object", "additionalProperties": {"type": "integer"}}},
}

STATS = {
    "type": "object",
    "required": ["schema_version", "global_mean", "entries"],
    "properties": {
        **_versioned,
        "global_mean": _pos_num,
        "entries": {
            "type": "object",
            "propertyNames": {"pattern": r"^\d+:\d+$"},
            "additionalProperties": {"type": "object", "required": ["mean", "count"],
                                     "properties": {"mean": _pos_num, "count": _pos_int}},
        },
    },
}

CLUSTERS = {
    "type": "object",
    "required": ["schema_version", "K_clusters", "seed", "inertia", "centroids"],
    "properties": {**_versioned, "K_clusters": _pos_int, "inertia": {"type": "number", "minimum": 0},
                   "centroids": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}},
}

GENERIC = {"type": "object", "required": ["schema_version"], "properties": _versioned}

ARTIFACT_SCHEMAS = {
    "checkpoint": CHECKPOINT,
    "catalog": CATALOG,
    "stats": STATS,
    "clusters": CLUSTERS,
    "config": GENERIC,
    "representatives": GENERIC,
    "test_metrics": GENERIC,
}


class ConfigError(ValueError):
    pass


def validate(instance, schema, what: str = "config") -> None:
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        if exc.validator == "additionalProperties":
            extra = sorted(set(exc.instance) - set(exc.schema.get("properties", {})))
            where = ".".join([*(str(p) for p in exc.absolute_path), *extra[:1]])
            raise ConfigError(f"{what}: unknown key {where!r}") from None
        raise ConfigError(f"{what}: invalid value for key {where!r}: {exc.message}") from None
