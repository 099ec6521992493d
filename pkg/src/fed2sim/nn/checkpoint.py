"""Weight checkpoints as a self-describing JSON document.

Layout::

    {
      "format": "fed2sim-checkpoint/1",
      "spec": {...} | null,                 # ModelSpec.to_dict() when known
      "records": [
        {"layer_index": 3, "kind": "group_conv", "name": "weight", "block": 1,
         "group": 1 | null, "shape": [2, 2, 3, 3],
         "group_boundaries": [[0, 2], [2, 4]], "data": [...]}   # row-major float64
      ]
    }

Floats are written with ``repr`` precision, so a save/load round trip is bitwise exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Model

FORMAT = "fed2sim-checkpoint/1"


class CheckpointError(ValueError):
    pass


def to_records(model: Model) -> list[dict]:
    records = []
    for p in model.layer_params():
        for name, blocks in (("weight", p.weights), ("bias", p.bias)):
            for g, arr in enumerate(blocks):
                records.append({
                    "layer_index": p.layer_index,
                    "kind": p.kind,
                    "name": name,
                    "block": g,
                    "group": p.block_group(g),
                    "shape": list(arr.shape),
                    "group_boundaries": [list(b) for b in p.group_boundaries],
                    "data": [float(v) for v in arr.ravel()],
                })
    return records


def save(model: Model, path) -> Path:
    path = Path(path)
    doc = {
        "format": FORMAT,
        "spec": model.spec.to_dict() if model.spec is not None else None,
        "records": to_records(model),
    }
    path.write_text(json.dumps(doc))
    return path


def load_into(model: Model, path) -> Model:
    """Fill ``model``'s parameters from a checkpoint written for the same structure."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
    state = {}
    for r in doc["records"]:
        arr = np.asarray(r["data"], dtype=np.float64)
        if arr.size != int(np.prod(r["shape"])):
            raise CheckpointError(f"record {r['layer_index']}.{r['name']}.{r['block']}: data/shape mismatch")
        state[f"{r['layer_index']}.{r['name']}.{r['block']}"] = arr.reshape(r["shape"])
    missing = set(model.state()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    return model.load_state(state)


def load(path) -> Model:
    """Rebuild a model from a checkpoint that embeds its spec."""
    from ..architecture import ModelSpec, instantiate

    doc = json.loads(Path(path).read_text())
    if doc.get("spec") is None:
        raise CheckpointError("checkpoint carries no spec; use load_into with a model")
    model = instantiate(ModelSpec.from_dict(doc["spec"]), 0)
    return load_into(model, path)
