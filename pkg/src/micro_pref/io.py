"""Corpus, checkpoint, log and manifest serialization."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import subprocess
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import __version__
from .core_model import MixtureModel, PreferenceBatch, PreferenceExample, RouterParams, as_batch
from .population import PopulationSpec, RatedItem

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


def example_to_dict(ex: PreferenceExample) -> dict:
    return {
        "prompt_ctx": ex.prompt_ctx.tolist(),
        "winner": ex.winner.tolist(),
        "loser": ex.loser.tolist(),
        "group_id": ex.group_id,
        "attribute": ex.attribute,
        "context_group": ex.context_group,
    }


def example_from_dict(d: Mapping) -> PreferenceExample:
    try:
        return PreferenceExample(
            d["prompt_ctx"],
            d["winner"],
            d["loser"],
            None if d.get("group_id") is None else int(d["group_id"]),
            d.get("attribute"),
            d.get("context_group"),
        )
    except KeyError as e:
        raise SchemaError(f"corpus record missing field {e}") from None


def write_corpus(path, corpus) -> None:
    b = as_batch(corpus)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in b.examples():
            fh.write(json.dumps(example_to_dict(ex)) + "\n")


def read_corpus(path) -> PreferenceBatch:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(example_from_dict(json.loads(line)))
            except (json.JSONDecodeError, SchemaError) as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from None
    if not examples:
        raise SchemaError(f"{path}: corpus is empty")
    return PreferenceBatch.from_examples(examples)


def read_rated_items(path) -> list[RatedItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                items.append(RatedItem(d["prompt_ctx"], d["response"], {k: int(v) for k, v in d["ratings"].items()}))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise SchemaError(f"{path}:{lineno}: bad rated item ({e})") from None
    return items


# ---------------------------------------------------------------------------
# specs and checkpoints
# ---------------------------------------------------------------------------


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_spec(path, spec: PopulationSpec) -> None:
    write_json(path, {"schema_version": SCHEMA_VERSION, "kind": "population_spec", **spec.to_dict()})


def read_spec(path) -> PopulationSpec:
    d = read_json(path)
    if d.get("kind") != "population_spec":
        raise SchemaError(f"{path} is not a population spec")
    return PopulationSpec.from_dict(d)


def model_to_dict(model: MixtureModel) -> dict:
    r = model.router
    return {
        "k": model.k,
        "pair_dim": model.pair_dim,
        "ctx_dim": model.ctx_dim,
        "hidden": r.hidden_size,
        "head_weights": model.head_weights.tolist(),
        "head_bias": model.head_bias.tolist(),
        "router": {
            "hidden_weights": r.hidden_weights.tolist(),
            "hidden_bias": r.hidden_bias.tolist(),
            "output_weights": r.output_weights.tolist(),
            "output_bias": r.output_bias.tolist(),
            "floor": r.floor,
        },
    }


def model_from_dict(d: Mapping) -> MixtureModel:
    r = d["router"]
    k, h, dc = int(d["k"]), int(d["hidden"]), int(d["ctx_dim"])
    router = RouterParams(
        np.asarray(r["hidden_weights"], dtype=float).reshape(h, dc),
        np.asarray(r["hidden_bias"], dtype=float).reshape(h),
        np.asarray(r["output_weights"], dtype=float).reshape(k, h),
        np.asarray(r["output_bias"], dtype=float).reshape(k),
        float(r.get("floor", 0.0)),
    )
    hw = np.asarray(d["head_weights"], dtype=float).reshape(k, int(d["pair_dim"]))
    return MixtureModel(hw, np.asarray(d["head_bias"], dtype=float), router)


def write_checkpoint(path, model: MixtureModel, config=None, seed=None) -> None:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    write_json(
        path,
        {
            "schema_version": SCHEMA_VERSION,
            "kind": "mixture_checkpoint",
            "model": model_to_dict(model),
            "config": config,
            "seed": seed,
        },
    )


def read_checkpoint(path) -> tuple[MixtureModel, dict]:
    d = read_json(path)
    if d.get("kind") != "mixture_checkpoint":
        raise SchemaError(f"{path} is not a mixture checkpoint")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {d.get('schema_version')}")
    return model_from_dict(d["model"]), d


# ---------------------------------------------------------------------------
# logs and manifests
# ---------------------------------------------------------------------------


def write_rows_csv(path, rows: Iterable, fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            if dataclasses.is_dataclass(row):
                row = dataclasses.asdict(row)
            w.writerow([row[f] for f in fields])


def config_hash(config) -> str:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, command: str, config, wall_time: float, inputs=None, outputs=None) -> None:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    write_json(
        Path(out_dir) / "manifest.json",
        {
            "command": command,
            "config": config,
            "config_hash": config_hash(config),
            "version": version_string(),
            "wall_time_s": round(wall_time, 3),
            "inputs": inputs or [],
            "outputs": outputs or [],
        },
    )
