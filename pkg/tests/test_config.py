import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neural_flows.config import ConfigError, ExperimentConfig


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.batch_size == 100 and cfg.lr == 1e-3 and cfg.weight_decay == 1e-4


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"dataset": "nope"}, "dataset"),
        ({"experiment": "nope"}, "experiment"),
        ({"model": "transformer"}, "model"),
        ({"lr": -1.0}, "lr"),
        ({"batch_size": 0}, "batch_size"),
        ({"hidden": []}, "hidden"),
        ({"hidden": [8, True]}, "hidden"),
        ({"epochs": "10"}, "epochs"),
        ({"lr_decay": 1.5}, "lr_decay"),
        ({"solver": "rk45"}, "solver"),
        ({"model": "resnet", "embedding": "linear"}, "embedding"),
        ({"experiment": "tpp", "dataset": "poisson", "model": "discrete-gru", "decoder": "continuous"}, "model"),
    ],
)
def test_invalid_fields_named(doc, field):
    with pytest.raises(ConfigError, match=field):
        ExperimentConfig.from_dict(doc)


def test_integer_literal_for_float_field():
    assert ExperimentConfig.from_dict({"lr": 1}).lr == 1.0


def test_load_round_trip(tmp_path):
    cfg = ExperimentConfig(dataset="square", epochs=3, hidden=[8])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg


def test_load_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)


def test_hash_ignores_name_only():
    a = ExperimentConfig()
    assert a.hash() == a.replace(name="other").hash()
    assert a.hash() == ExperimentConfig().hash()


@settings(max_examples=50, deadline=None)
@given(
    key=st.sampled_from(["lr", "weight_decay", "epochs", "batch_size", "seed", "gamma", "steps", "n_mc"]),
    bump=st.integers(1, 50),
)
def test_hash_changes_with_meaningful_field(key, bump):
    a = ExperimentConfig()
    v = getattr(a, key)
    new = v + bump if isinstance(v, int) else v + bump * 1e-3
    assert a.replace(**{key: new}).hash() != a.hash()
