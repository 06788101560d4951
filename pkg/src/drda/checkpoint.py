"""JSON checkpoints: weights, the Stiefel matrix, both radial structures and the run config.

Floats go through ``repr`` (JSON's default), so a save/load round trip is exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .files import atomic_write_text
from .model import ModelParams
from .radial import RadialStructure
from .stiefel import StiefelParam

FORMAT = "drda-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    stiefel: StiefelParam
    source: RadialStructure
    target: RadialStructure
    iteration: int
    config: dict
    config_hash: str


def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.ravel(a)]}


def _unarray(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def _structure(s: RadialStructure) -> dict:
    local = [None if s.missing[c] else [float(v) for v in s.local_anchors[c]] for c in range(s.k)]
    return {"domain": s.domain_tag, "global": [float(v) for v in s.global_anchor], "local": local,
            "counts": [float(c) for c in s.counts]}


def _unstructure(d: dict, dim: int) -> RadialStructure:
    missing = np.array([row is None for row in d["local"]])
    local = np.array([np.zeros(dim) if row is None else row for row in d["local"]], dtype=np.float64)
    return RadialStructure(np.asarray(d["global"], dtype=np.float64), local,
                           np.asarray(d["counts"], dtype=np.float64), d["domain"], missing)


def to_dict(ck: Checkpoint) -> dict:
    p = ck.params
    return {
        "format": FORMAT,
        "version": VERSION,
        "iteration": ck.iteration,
        "config_hash": ck.config_hash,
        "config": ck.config,
        "temperature": p.temperature,
        "extractor": [{"W": _array(W), "b": _array(b)} for W, b in p.extractor],
        "classifier": {"W": _array(p.classifier[0]), "b": _array(p.classifier[1])},
        "stiefel": _array(ck.stiefel.matrix),
        "stiefel_lr_scale": ck.stiefel.learning_rate_scale,
        "anchors": {"source": _structure(ck.source), "target": _structure(ck.target)},
    }


def from_dict(d: dict) -> Checkpoint:
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise ContractError("not a checkpoint file")
    if d.get("version") != VERSION:
        raise ContractError(f"unsupported checkpoint version {d.get('version')!r}")
    try:
        ext = [(_unarray(layer["W"]), _unarray(layer["b"])) for layer in d["extractor"]]
        clf = (_unarray(d["classifier"]["W"]), _unarray(d["classifier"]["b"]))
        params = ModelParams(ext, clf, float(d["temperature"]))
        stiefel = StiefelParam(_unarray(d["stiefel"]), float(d["stiefel_lr_scale"]))
        dim = params.bottleneck_dim
        src = _unstructure(d["anchors"]["source"], dim)
        tgt = _unstructure(d["anchors"]["target"], dim)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(params, stiefel, src, tgt, int(d["iteration"]), d["config"], d["config_hash"])


def save(path, ck: Checkpoint) -> None:
    atomic_write_text(path, json.dumps(to_dict(ck), indent=1) + "\n")


def load(path) -> Checkpoint:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractError(f"checkpoint is not valid JSON: {exc}") from exc
    return from_dict(raw)


def from_state(state, run_config: dict) -> Checkpoint:
    return Checkpoint(state.params, state.stiefel, state.source, state.target, state.iteration,
                      run_config, state.config.config_hash())
