"""JSON checkpoints for backbones and correctors.

Floats are written with ``repr`` precision so a load reproduces every
parameter bit-for-bit.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbones import Backbone, BackboneConfig, build_backbone
from .data import FeatureSchema, Preprocessor, Task
from .trc import TrcCorrector, TrcHP

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write(path: Path, blob: dict) -> None:
    from .harness import atomic_write
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, json.dumps(blob))


def _read(path: Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = json.loads(path.read_text())
    if blob.get("format") != FORMAT_VERSION or blob.get("kind") != kind:
        raise CheckpointError(f"{path}: not a version-{FORMAT_VERSION} {kind} checkpoint")
    return blob


def save_backbone(path, bb: Backbone, pre: Preprocessor | None = None) -> None:
    _write(path, {
        "format": FORMAT_VERSION, "kind": "backbone",
        "config": asdict(bb.cfg),
        "task": {"kind": bb.task.kind, "n_classes": bb.task.n_classes},
        "schema": bb.schema.to_dict(),
        "schema_fingerprint": bb.schema.fingerprint(),
        "checksum": bb.checksum(),
        "params": [p.value.tolist() for p in bb.params()],
        "preprocessor": None if pre is None else pre.to_dict(),
    })


def load_backbone(path, expect_schema: FeatureSchema | None = None) -> tuple[Backbone, Preprocessor | None]:
    blob = _read(path, "backbone")
    schema = FeatureSchema.from_dict(blob["schema"])
    if expect_schema is not None and expect_schema.fingerprint() != blob["schema_fingerprint"]:
        raise CheckpointError(f"{path}: schema fingerprint does not match the dataset")
    bb = build_backbone(BackboneConfig(**blob["config"]), schema, Task(**blob["task"]))
    bb.load_state([np.array(v) for v in blob["params"]])
    if bb.checksum() != blob["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    pre = None if blob["preprocessor"] is None else Preprocessor.from_dict(blob["preprocessor"])
    return bb.freeze(), pre


def save_corrector(path, corr: TrcCorrector, hp: TrcHP) -> None:
    hp_d = asdict(hp)
    hp_d["eta_range"] = list(hp.eta_range)
    _write(path, {
        "format": FORMAT_VERSION, "kind": "corrector",
        "hp": hp_d, "D": corr.D, "T": corr.T,
        "task": {"kind": corr.task.kind, "n_classes": corr.task.n_classes},
        "backbone_checksum": corr.backbone_checksum,
        "params": [p.value.tolist() for p in corr.params()],
    })


def load_corrector(path, bb: Backbone) -> tuple[TrcCorrector, TrcHP]:
    blob = _read(path, "corrector")
    if blob["backbone_checksum"] != bb.checksum():
        raise CheckpointError(f"{path}: corrector was trained against a different backbone")
    hp_d = dict(blob["hp"])
    hp_d["eta_range"] = tuple(hp_d["eta_range"])
    hp = TrcHP(**hp_d)
    corr = TrcCorrector(blob["D"], Task(**blob["task"]), blob["T"], hp.seed, hp.use_tr, hp.use_sc)
    corr.load_state([np.array(v) for v in blob["params"]])
    corr.backbone_checksum = blob["backbone_checksum"]
    return corr, hp
