"""Flat JSON experiment configuration with strict validation.

Every key below is optional in the JSON file; missing keys take the default.
Unknown keys, wrong types and out-of-range values raise :class:`ConfigError`.

================  =========================================================
key               meaning
================  =========================================================
name              free-form label, ignored by the config hash
experiment        trajectory | stiff | tpp | density
dataset           sine sawtooth square triangle sink ellipse (trajectory),
                  stiff, poisson renewal hawkes1 hawkes2 (tpp), density2d
n_samples         trajectories / sequences / points to generate
seq_len           events per sequence (tpp)
model             trajectory/stiff: resnet gru coupling linear ode;
                  tpp: discrete-gru gru-flow resnet-flow coupling-flow
                  jump-ode; density: coupling cnf
decoder           mixture | continuous (tpp)
n_layers          stacked flow layers
hidden            hidden widths of every MLP, e.g. [64, 64]
state_dim         hidden state size of the TPP encoder
embedding         linear | tanh | fourier
n_features        Fourier features per embedding
solver            euler | rk4 | dopri5 (ODE models)
steps             fixed-step solver steps
rtol, atol        adaptive solver tolerances
lr                Adam learning rate
weight_decay      decoupled weight decay
lr_decay          multiplicative decay factor
lr_decay_every    epochs between decays
batch_size        trajectories / sequences / points per step
epochs            training epochs (0 = evaluate the untrained model)
patience          early-stopping patience in epochs (0 disables)
gamma             autonomous-penalty weight
n_mc              Monte Carlo samples per inter-event interval
n_components      log-normal mixture components
seed              master seed
================  =========================================================
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

EXPERIMENTS = ("trajectory", "stiff", "tpp", "density")
DATASETS = {
    "trajectory": ("sine", "sawtooth", "square", "triangle", "sink", "ellipse"),
    "stiff": ("stiff",),
    "tpp": ("poisson", "renewal", "hawkes1", "hawkes2"),
    "density": ("density2d",),
}
MODELS = {
    "trajectory": ("resnet", "gru", "coupling", "linear", "ode"),
    "stiff": ("resnet", "gru", "coupling", "linear", "ode"),
    "tpp": ("discrete-gru", "gru-flow", "resnet-flow", "coupling-flow", "jump-ode"),
    "density": ("coupling", "cnf"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = ""
    experiment: str = "trajectory"
    dataset: str = "sine"
    n_samples: int = 1000
    seq_len: int = 100
    model: str = "coupling"
    decoder: str = "mixture"
    n_layers: int = 2
    hidden: list = field(default_factory=lambda: [64, 64])
    state_dim: int = 64
    embedding: str = "linear"
    n_features: int = 8
    solver: str = "dopri5"
    steps: int = 20
    rtol: float = 1e-3
    atol: float = 1e-4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay: float = 1.0
    lr_decay_every: int = 20
    batch_size: int = 100
    epochs: int = 100
    patience: int = 0
    gamma: float = 0.0
    n_mc: int = 20
    n_components: int = 8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            expected = {"str": str, "int": int, "float": (int, float), "list": list}[f.type]
            if isinstance(v, bool) or not isinstance(v, expected):
                raise ConfigError(f"field {f.name!r} must be of type {f.type}, got {type(v).__name__}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"field 'experiment' must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.dataset not in DATASETS[self.experiment]:
            raise ConfigError(
                f"field 'dataset' must be one of {DATASETS[self.experiment]} for {self.experiment}, got {self.dataset!r}"
            )
        if self.model not in MODELS[self.experiment]:
            raise ConfigError(
                f"field 'model' must be one of {MODELS[self.experiment]} for {self.experiment}, got {self.model!r}"
            )
        _choice(self, "decoder", ("mixture", "continuous"))
        _choice(self, "embedding", ("linear", "tanh", "fourier"))
        _choice(self, "solver", ("euler", "rk4", "dopri5"))
        if not self.hidden or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in self.hidden):
            raise ConfigError("field 'hidden' must be a non-empty list of positive integers")
        for key in ("n_samples", "seq_len", "n_layers", "state_dim", "n_features", "steps",
                    "lr_decay_every", "batch_size", "n_mc", "n_components"):
            if getattr(self, key) < 1:
                raise ConfigError(f"field {key!r} must be >= 1")
        for key in ("epochs", "patience", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"field {key!r} must be >= 0")
        for key in ("rtol", "atol", "lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"field {key!r} must be > 0")
        if self.weight_decay < 0 or self.gamma < 0:
            raise ConfigError("fields 'weight_decay' and 'gamma' must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("field 'lr_decay' must be in (0, 1]")
        if self.model in ("resnet", "gru") and self.embedding == "linear":
            raise ConfigError("field 'embedding': resnet and gru flows need a bounded embedding (tanh or fourier)")
        if self.experiment == "tpp" and self.decoder == "continuous" and self.model == "discrete-gru":
            raise ConfigError("field 'model': the continuous decoder needs an evolving encoder")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        doc = dict(doc)
        for f in fields(cls):
            # accept integer literals for float fields
            if f.type == "float" and isinstance(doc.get(f.name), int) and not isinstance(doc.get(f.name), bool):
                doc[f.name] = float(doc[f.name])
        return cls(**doc)

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)

    def hash(self):
        doc = self.to_dict()
        doc.pop("name")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _choice(cfg, key, options):
    if getattr(cfg, key) not in options:
        raise ConfigError(f"field {key!r} must be one of {options}, got {getattr(cfg, key)!r}")
