"""
Shared toy data and small configs for the test suite.
"""

import pytest

from config import build_config
from data_model import NA, Dataset, Instance

TINY_ENCODER = {
    "d_model": 8,
    "n_layers": 1,
    "n_heads": 2,
    "ffn_width": 16,
    "max_len": 24,
    "min_freq": 1,
}

SMALL_ENCODER = dict(TINY_ENCODER, d_model=16, ffn_width=32)

NAMES = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy"]
PLACES = ["paris", "rome", "oslo", "lima", "cairo", "quito", "delhi", "tokyo", "seoul", "dakar"]
COMPANIES = ["acme", "globex", "initech", "umbrella", "hooli", "stark", "wayne", "wonka", "tyrell", "cyberdyne"]


def make_instance(text, head, tail, relation, confidence=None):
    return Instance.create(text.split(), head, tail, relation, confidence)


def separable_instances():
    """20 instances, two relations, each announced by its own trigger word"""
    instances = []
    for i in range(10):
        instances.append(make_instance(f"{NAMES[i]} was born in {PLACES[i]}", (0, 1), (4, 5), "born_in"))
        instances.append(make_instance(f"{NAMES[i]} works for {COMPANIES[i]}", (0, 1), (3, 4), "works_for"))
    return instances


def toy_ds_instances(confidences=None):
    """Four triplets with three sentences each, two relations, plus two NA sentences"""
    rows = []
    for k, (head, relation, tail, trigger) in enumerate([
        ("alice", "born_in", "paris", "born"),
        ("bob", "born_in", "rome", "born"),
        ("carol", "works_for", "acme", "works"),
        ("dave", "works_for", "globex", "works"),
    ]):
        for filler in ("today", "lately", "again"):
            rows.append((f"{head} {trigger} {filler} {tail}", relation))
    instances = [make_instance(text, (0, 1), (3, 4), relation) for text, relation in rows]
    instances.append(make_instance("erin met frank", (0, 1), (2, 3), NA))
    instances.append(make_instance("grace saw heidi", (0, 1), (2, 3), NA))
    if confidences is not None:
        instances = [inst.with_confidence(c) for inst, c in zip(instances, confidences)]
    return instances


def tiny_config_dict(**overrides):
    data = {
        "seed": 7,
        "encoder": dict(TINY_ENCODER),
        "wcl": {"batch_bags": 2, "bag_size": 2, "temperature": 0.5},
        "pretrain": {"steps": 4, "checkpoint_every": 2, "na_per_step": 1, "lr": 5e-3},
        "reliability": {"epochs": 2, "batch_size": 4},
        "finetune": {"epochs": 2, "batch_size": 4},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = dict(data[key], **value)
        else:
            data[key] = value
    return data


@pytest.fixture
def tiny_config():
    return build_config(tiny_config_dict())


@pytest.fixture
def separable_ha():
    return Dataset.from_instances(separable_instances())


@pytest.fixture
def scored_ds():
    confidences = [0.9, 0.8, 0.7, 0.6, 0.95, 0.85, 0.5, 0.4, 0.3, 0.99, 0.75, 0.65, 0.2, 0.1]
    return Dataset.from_instances(toy_ds_instances(confidences))
