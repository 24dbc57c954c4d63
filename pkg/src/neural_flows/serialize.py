"""JSON model files.

Layout::

    {
      "schema": "neural-flows-model",
      "schema_version": 1,
      "architecture": {"kind": ..., ...},   # nested, kind-specific
      "parameters": {"<dotted.name>": {"shape": [...], "data": [...]}},
      "metadata": {...}
    }

Parameter values are written with Python's shortest round-trip float repr,
so ``load(save(m))`` reproduces every parameter bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SCHEMA = "neural-flows-model"
SCHEMA_VERSION = 1

_BUILDERS = {}


def register(kind):
    """Decorator adding ``fn(architecture_dict) -> Module`` to the registry."""

    def deco(fn):
        _BUILDERS[kind] = fn
        return fn

    return deco


def build(architecture):
    _ensure_registered()
    kind = architecture.get("kind")
    if kind not in _BUILDERS:
        raise ValueError(f"no builder registered for model kind {kind!r}")
    return _BUILDERS[kind](architecture)


def _ensure_registered():
    # importing the model modules populates the registry
    from . import density, flows, ode, tpp  # noqa: F401


def to_dict(model, metadata=None):
    params = {}
    for name, p in model.named_parameters():
        params[name] = {"shape": list(p.data.shape), "data": [float(v) for v in p.data.ravel()]}
    return {
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "architecture": model.architecture(),
        "parameters": params,
        "metadata": metadata or {},
    }


def from_dict(doc):
    if doc.get("schema") != SCHEMA:
        raise ValueError("not a neural-flows model document")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('schema_version')}")
    model = build(doc["architecture"])
    stored = doc["parameters"]
    named = dict(model.named_parameters())
    if set(named) != set(stored):
        missing = sorted(set(named) ^ set(stored))
        raise ValueError(f"parameter names do not match architecture: {missing[:5]}")
    for name, p in named.items():
        entry = stored[name]
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != p.data.shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr
    return model


def save(model, path, metadata=None):
    Path(path).write_text(json.dumps(to_dict(model, metadata)))


def load(path):
    return from_dict(json.loads(Path(path).read_text()))
