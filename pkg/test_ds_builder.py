#!/usr/bin/env python3
"""
Tests for DS construction: triplet extraction, corpus alignment with the
per-triplet cap, pronoun filtering and bag assembly.
"""

import pytest

from conftest import make_instance
from data_model import NA, Dataset, Triplet, load_dataset, save_dataset
from ds_builder import (TripletSet, align_corpus, assemble_bags, build_ds, build_ds_files, drop_too_long,
                        extract_triplets, filter_pronoun_entities, read_corpus, split_sentences, tokenize)
from errors import DatasetError


def triplet(head, relation, tail):
    return Triplet(head_surface=tuple(head.split()), relation=relation, tail_surface=tuple(tail.split()))


@pytest.fixture
def leader_ha():
    return Dataset.from_instances([
        make_instance("joe biden is the president of america", (0, 2), (6, 7), "leader_of"),
        make_instance("paris is in france", (0, 1), (3, 4), NA),
    ])


def test_extract_labeled_and_na_triplets(leader_ha):
    ts = extract_triplets(leader_ha)
    assert triplet("joe biden", "leader_of", "america") in ts.triplets
    assert triplet("paris", NA, "france") in ts.triplets
    # reverse direction of the labeled pair is unlabeled
    assert triplet("america", NA, "joe biden") in ts.triplets


def test_duplicate_triplets_merge():
    ha = Dataset.from_instances([
        make_instance("joe biden leads america", (0, 2), (3, 4), "leader_of"),
        make_instance("joe biden governs america now", (0, 2), (3, 4), "leader_of"),
    ])
    ts = extract_triplets(ha)
    assert ts.triplets.count(triplet("joe biden", "leader_of", "america")) == 1


@pytest.fixture
def conflicting_ha():
    return Dataset.from_instances([
        make_instance("paris is capital of france", (0, 1), (4, 5), "capital_of"),
        make_instance("paris and france and rome", (0, 1), (2, 3), NA),
    ])


def test_unlabeled_pair_is_na_per_sentence(conflicting_ha):
    ts = extract_triplets(conflicting_ha)
    assert triplet("paris", NA, "france") in ts.triplets
    assert triplet("paris", "capital_of", "france") in ts.triplets
    assert ts.index[(("paris",), ("france",))] == ("capital_of", NA)


def test_conflicting_na_dropped_on_request(conflicting_ha):
    ts = extract_triplets(conflicting_ha, drop_conflicting_na=True)
    assert triplet("paris", NA, "france") not in ts.triplets
    assert triplet("paris", "capital_of", "france") in ts.triplets
    assert triplet("france", NA, "paris") in ts.triplets


def test_empty_ha_is_an_error():
    with pytest.raises(DatasetError, match="no source instances"):
        extract_triplets(Dataset(instances=(), label_set=()))


def test_split_sentences():
    assert split_sentences("He left. She stayed.") == [["he", "left", "."], ["she", "stayed", "."]]
    # known limitation: abbreviations split too
    assert len(split_sentences("Dr. Smith arrived.")) == 2
    assert split_sentences("") == []


def test_tokenize_detaches_punctuation():
    assert tokenize("Joe Biden, America's leader!") == ["joe", "biden", ",", "america's", "leader", "!"]


def test_cap_limits_instances_per_triplet():
    ts = TripletSet.from_triplets([triplet("alice", "born_in", "paris")])
    corpus = [f"alice was born in paris in {year}".split() for year in range(150)]
    instances, stats = align_corpus(ts, corpus, cap=100)
    assert len(instances) == 100
    assert stats.capped_triplets == 1
    assert stats.per_triplet_counts[triplet("alice", "born_in", "paris")] == 100
    # first occurrences win
    assert instances[0].tokens[-1] == "0"


def test_unmatched_triplet_counts_zero():
    ts = TripletSet.from_triplets([triplet("alice", "born_in", "paris")])
    instances, stats = align_corpus(ts, [["nothing", "here"]])
    assert instances == []
    assert stats.per_triplet_counts[triplet("alice", "born_in", "paris")] == 0


def test_sentence_matching_two_triplets_emits_two_instances():
    ts = TripletSet.from_triplets([triplet("alice", "born_in", "paris"), triplet("bob", "works_for", "acme")])
    instances, _ = align_corpus(ts, ["alice of paris met bob of acme".split()])
    assert sorted(inst.relation for inst in instances) == ["born_in", "works_for"]
    born = next(inst for inst in instances if inst.relation == "born_in")
    assert born.head.span == (0, 1) and born.tail.span == (2, 3)


def test_alignment_independent_of_worker_count(tmp_path):
    ts = TripletSet.from_triplets([triplet("alice", "born_in", "paris"), triplet("bob", "works_for", "acme")])
    corpus = []
    for i in range(40):
        corpus.append(f"alice saw paris {i}".split())
        corpus.append(f"bob joined acme {i}".split())
    single, _ = align_corpus(ts, corpus, cap=30, workers=1)
    pooled, _ = align_corpus(ts, corpus, cap=30, workers=3)
    save_dataset(single, tmp_path / "a.jsonl")
    save_dataset(pooled, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_pronoun_filter():
    pronoun = make_instance("he was born in paris", (0, 1), (4, 5), "born_in")
    named = make_instance("joe biden is the president of america", (0, 2), (6, 7), "leader_of")
    assert filter_pronoun_entities([pronoun, named], ["he", "she"]) == [named]
    assert filter_pronoun_entities([], ["he"]) == []


def test_build_ds_drops_exactly_the_pronoun_instances():
    ha = Dataset.from_instances([
        make_instance("alice was born in paris", (0, 1), (4, 5), "born_in"),
        make_instance("she was born in rome", (0, 1), (4, 5), "born_in"),
    ])
    corpus = ["alice loves paris".split(), "she loves rome".split(), "alice left paris".split()]
    kept, _ = build_ds(ha, corpus, drop_pronouns=True, pronouns=["she"])
    unfiltered, _ = build_ds(ha, corpus)
    # every pair is matched in both directions: labeled one way, NA the other
    assert len(unfiltered) == 6
    assert len(kept) == 4
    assert all("she" not in inst.head.surface + inst.tail.surface for inst in kept)


def test_too_long_instances_dropped():
    short = make_instance("a b c", (0, 1), (2, 3), "r")
    long = make_instance(" ".join(["x"] * 20), (0, 1), (2, 3), "r")
    kept, dropped = drop_too_long([short, long], max_len=16)
    assert kept == [short]
    assert dropped == 1


def test_assemble_bags():
    same = [make_instance(f"alice {w} paris", (0, 1), (2, 3), "born_in") for w in "abcd"]
    bags = assemble_bags(same, [1.0, 0.5, 0.25, 0.0])
    assert len(bags) == 1 and bags[0].size == 4

    mixed = [make_instance("alice a paris", (0, 1), (2, 3), "born_in"),
             make_instance("bob a rome", (0, 1), (2, 3), "born_in"),
             make_instance("carol a acme", (0, 1), (2, 3), "works_for")]
    assert len(assemble_bags(mixed, [1.0] * 3)) == 3

    na = [make_instance(f"erin {w} frank", (0, 1), (2, 3), NA) for w in "ab"]
    bags = assemble_bags(na, [0.5, 0.5])
    assert len(bags) == 1 and bags[0].is_na

    with pytest.raises(DatasetError, match="misaligned"):
        assemble_bags(same, [1.0])


def test_build_ds_files_writes_data_and_stats(tmp_path, leader_ha):
    ha_path = save_dataset(leader_ha, tmp_path / "ha.jsonl")
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "b.txt").write_text("Paris is lovely. France too.\n", encoding="utf-8")
    (corpus / "a.txt").write_text("Joe Biden visited America. Paris welcomed France.\n", encoding="utf-8")
    assert [s[0] for s in read_corpus(corpus, "doc")] == ["joe", "paris", "paris", "france"]

    stats = build_ds_files(ha_path, corpus, tmp_path / "ds.jsonl", corpus_mode="doc")
    ds = load_dataset(tmp_path / "ds.jsonl")
    assert stats.total_instances == len(ds) == 4
    assert stats.na_instances == 3
    assert sorted(inst.relation for inst in ds) == [NA, NA, NA, "leader_of"]
    assert (tmp_path / "ds.jsonl.stats.tsv").read_text(encoding="utf-8").startswith("statistic\tvalue\n")
