#!/usr/bin/env python3
"""
Tests for the domain records, the JSON-lines format and dataset validation.
"""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import make_instance
from data_model import (NA, Bag, Dataset, Instance, Triplet, derive_label_set, instance_violations, load_dataset,
                        parse_instance_record, save_dataset, serialize_instance_record, validate_dataset)
from errors import DatasetError, RecordParseError, RecordValidationError


def record(**fields):
    base = {"tokens": ["joe", "biden", "is", "the", "president", "of", "america"],
            "head": [0, 2], "tail": [6, 7], "relation": "leader_of"}
    base.update(fields)
    return json.dumps(base)


def test_parse_valid_record():
    inst = parse_instance_record(record(confidence=0.75))
    assert inst.head.surface == ("joe", "biden")
    assert inst.tail.surface == ("america",)
    assert inst.relation == "leader_of"
    assert inst.confidence == 0.75


def test_missing_field_names_field():
    data = json.loads(record())
    del data["relation"]
    with pytest.raises(RecordParseError) as excinfo:
        parse_instance_record(json.dumps(data), line_no=3)
    assert excinfo.value.field == "relation"
    assert excinfo.value.line_no == 3


def test_extra_field_rejected():
    with pytest.raises(RecordParseError):
        parse_instance_record(record(source="wiki"))


@pytest.mark.parametrize("fields, rule", [
    ({"head": [2, 2]}, "empty span"),
    ({"tail": [6, 9]}, "span out of bounds"),
    ({"tail": [1, 3]}, "overlapping spans"),
    ({"relation": ""}, "empty relation"),
    ({"confidence": 1.5}, "confidence range"),
    ({"tokens": []}, "empty tokens"),
])
def test_invariant_violations(fields, rule):
    with pytest.raises(RecordValidationError) as excinfo:
        parse_instance_record(record(**fields))
    assert excinfo.value.rule == rule


def test_empty_span_message():
    with pytest.raises(RecordValidationError) as excinfo:
        parse_instance_record(record(head=[2, 2]))
    assert "empty span: head=[2,2)" in str(excinfo.value)


def test_serialized_record_parses_back():
    inst = make_instance("paris is in france", (0, 1), (3, 4), "located_in", 0.5)
    line = serialize_instance_record(inst)
    assert parse_instance_record(line) == inst
    assert "confidence" not in serialize_instance_record(inst.with_confidence(None))


ALPHABET = ["a", "Z", "é", "\"", "\\", "'", "-", ".", "日", " ", "\t", "0", "🙂"]


def random_instance(rng):
    n = int(rng.integers(2, 15))
    tokens = ["".join(rng.choice(ALPHABET, size=int(rng.integers(1, 5)))) for _ in range(n)]
    # two disjoint non-empty spans, in either order
    cut = int(rng.integers(1, n))
    first = sorted(rng.choice(np.arange(0, cut + 1), size=2, replace=False).tolist())
    second = sorted(rng.choice(np.arange(cut, n + 1), size=2, replace=False).tolist())
    head, tail = (first, second) if rng.random() < 0.5 else (second, first)
    relation = rng.choice([NA, "born_in", "org:founded_by", "rel with space"])
    confidence = None if rng.random() < 0.3 else float(rng.choice([0.0, 1.0, rng.random()]))
    return Instance.create(tokens, head, tail, str(relation), confidence)


def test_random_records_parse_back():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        inst = random_instance(rng)
        assert instance_violations(inst) == []
        assert parse_instance_record(serialize_instance_record(inst)) == inst


def test_label_set_na_first_then_sorted():
    assert derive_label_set(["b", NA, "a", "b"]) == (NA, "a", "b")
    assert derive_label_set(["z", "y"]) == ("y", "z")


def test_triplet_surfaces_case_insensitive():
    a = Triplet.of(make_instance("Joe Biden leads America", (0, 2), (3, 4), "leader_of"))
    b = Triplet.of(make_instance("joe biden leads america", (0, 2), (3, 4), "leader_of"))
    assert a == b
    assert str(a) == "(joe biden, leader_of, america)"


def test_bag_rejects_foreign_member():
    one = make_instance("alice born paris", (0, 1), (2, 3), "born_in")
    other = make_instance("bob born rome", (0, 1), (2, 3), "born_in")
    with pytest.raises(ValidationError):
        Bag(triplet=Triplet.of(one), members=((one, 1.0), (other, 1.0)))
    with pytest.raises(ValidationError):
        Bag(triplet=Triplet.of(one), members=())
    assert Bag(triplet=Triplet.of(one), members=((one, 0.5),)).size == 1


def test_validate_dataset_reports_every_violation():
    good = make_instance("a b c", (0, 1), (2, 3), "r")
    bad = make_instance("a b c", (0, 2), (1, 3), "r")
    unknown = make_instance("a b c", (0, 1), (2, 3), "q")
    ds = Dataset(instances=(good, bad, unknown), label_set=("r",))
    report = validate_dataset(ds)
    assert [(v.index, v.rule) for v in report.violations] == [(1, "overlapping spans"), (2, "unknown label")]
    lines = report.to_text().splitlines()
    assert lines[0].startswith("2\toverlapping spans\t")
    assert lines[1].startswith("3\tunknown label\t")


def test_save_and_load_dataset(tmp_path):
    instances = [make_instance("a b c", (0, 1), (2, 3), "r", 0.25),
                 make_instance("d e f", (0, 1), (2, 3), NA)]
    path = save_dataset(Dataset.from_instances(instances), tmp_path / "ds.jsonl")
    loaded = load_dataset(path)
    assert list(loaded) == instances
    assert loaded.label_set == (NA, "r")


def test_load_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(record() + "\n" + record(head=[3, 3]) + "\n", encoding="utf-8")
    with pytest.raises(RecordValidationError) as excinfo:
        load_dataset(path)
    assert excinfo.value.line_no == 2
    assert len(load_dataset(path, strict=False)) == 2


def test_missing_dataset_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.jsonl")
