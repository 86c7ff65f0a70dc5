#!/usr/bin/env python3
"""
Tests for the low-resource splitter, fine-tuning, micro-F1 scoring and the
synthetic noise benchmark.
"""

import numpy as np
import pytest

from config import NoiseBenchConfig, build_config
from conftest import SMALL_ENCODER, TINY_ENCODER, make_instance, tiny_config_dict
from data_model import NA, Dataset
from encoder import init_parameters, vocabulary_from_instances
from errors import DatasetError, ShapeMismatchError
from finetune_eval import (EvalReport, argmax_label, evaluate, finetune, generate_synthetic, low_resource_split,
                           micro_f1, noise_benchmark, predict)
from pretrain import load_encoder, pretrain
from reliability import score_dataset, train_classifier

# preds, gold, mode, tp, fp, fn, precision, recall, f1
F1_CASES = [
    ("a b", "a b", "exclude_na", 2, 0, 0, 1.0, 1.0, 1.0),
    ("NA NA", "NA NA", "exclude_na", 0, 0, 0, 0.0, 0.0, 0.0),
    ("NA NA", "a b", "exclude_na", 0, 0, 2, 0.0, 0.0, 0.0),
    ("a b", "NA NA", "exclude_na", 0, 2, 0, 0.0, 0.0, 0.0),
    ("a a", "a b", "exclude_na", 1, 1, 1, 0.5, 0.5, 0.5),
    ("a NA b", "a b NA", "exclude_na", 1, 1, 1, 0.5, 0.5, 0.5),
    ("a b c NA", "a b c d", "exclude_na", 3, 0, 1, 1.0, 0.75, 6 / 7),
    ("a b c d", "a b c NA", "exclude_na", 3, 1, 0, 0.75, 1.0, 6 / 7),
    ("a", "a", "exclude_na", 1, 0, 0, 1.0, 1.0, 1.0),
    ("b", "a", "exclude_na", 0, 1, 1, 0.0, 0.0, 0.0),
    ("a a a a", "a a a b", "exclude_na", 3, 1, 1, 0.75, 0.75, 0.75),
    ("a NA NA NA", "a a a a", "exclude_na", 1, 0, 3, 1.0, 0.25, 0.4),
    ("a b a b", "b a b a", "exclude_na", 0, 4, 4, 0.0, 0.0, 0.0),
    ("NA a", "NA a", "exclude_na", 1, 0, 0, 1.0, 1.0, 1.0),
    ("a b NA NA c", "a NA b NA c", "exclude_na", 2, 1, 1, 2 / 3, 2 / 3, 2 / 3),
    ("a a b", "a NA NA", "exclude_na", 1, 2, 0, 1 / 3, 1.0, 0.5),
    ("c c c", "a b c", "exclude_na", 1, 2, 2, 1 / 3, 1 / 3, 1 / 3),
    ("a b c d e", "a b c d e", "exclude_na", 5, 0, 0, 1.0, 1.0, 1.0),
    ("a b NA", "a c c", "exclude_na", 1, 1, 2, 0.5, 1 / 3, 0.4),
    ("NA a b", "NA a a", "all", 2, 1, 1, 2 / 3, 2 / 3, 2 / 3),
    ("NA NA", "NA NA", "all", 2, 0, 0, 1.0, 1.0, 1.0),
]


@pytest.fixture
def overfit_config():
    return build_config(tiny_config_dict(encoder=SMALL_ENCODER,
                                         finetune={"lr": 5e-3, "epochs": 50, "batch_size": 4}))


@pytest.fixture
def bench_config():
    bench = {"num_relations": 2, "triggers_per_relation": 2, "pairs_per_relation": 3, "filler_vocab": 10,
             "sentence_length": 6, "ha_size": 20, "ds_size": 60, "test_size": 10, "seeds": [1, 2, 3]}
    return build_config(tiny_config_dict(bench=bench))


# ============================================================================
# MICRO-F1
# ============================================================================

@pytest.mark.parametrize("preds, gold, mode, tp, fp, fn, p, r, f1", F1_CASES)
def test_micro_f1_hand_computed(preds, gold, mode, tp, fp, fn, p, r, f1):
    report = micro_f1(preds.split(), gold.split(), NA, mode)
    assert (report.tp, report.fp, report.fn) == (tp, fp, fn)
    assert report.precision == pytest.approx(p, abs=1e-12)
    assert report.recall == pytest.approx(r, abs=1e-12)
    assert report.micro_f1 == pytest.approx(f1, abs=1e-12)


def test_micro_f1_length_mismatch():
    with pytest.raises(DatasetError, match="length mismatch"):
        micro_f1(["a"], ["a", "b"])


def test_micro_f1_is_order_invariant_and_bounded():
    rng = np.random.default_rng(0)
    labels = [NA, "a", "b", "c"]
    for _ in range(50):
        gold = list(rng.choice(labels, size=30))
        preds = list(rng.choice(labels, size=30))
        order = rng.permutation(30)
        report = micro_f1(preds, gold)
        shuffled = micro_f1([preds[i] for i in order], [gold[i] for i in order])
        assert shuffled.micro_f1 == report.micro_f1
        assert 0.0 <= report.micro_f1 <= 1.0


def test_report_text_and_confusion():
    report = micro_f1(["a", NA], ["a", "b"])
    lines = report.to_text().splitlines()
    assert lines[0] == "P\tR\tF1"
    assert lines[1] == "1.000000\t0.500000\t0.666667"
    assert lines[2] == ""
    assert lines[3] == "gold\\pred\tNA\ta\tb"
    assert lines[4:] == ["NA\t0\t0\t0", "a\t0\t1\t0", "b\t1\t0\t0"]
    assert EvalReport(precision=0, recall=0, micro_f1=0, tp=0, fp=0, fn=0).to_text() == "P\tR\tF1\n" \
        "0.000000\t0.000000\t0.000000\n"


def test_argmax_ties_and_shift():
    labels = ("a", "b", "c")
    assert argmax_label(np.array([1.0, 3.0, 3.0]), labels) == "b"
    logits = np.array([0.2, -1.0, 0.7])
    assert argmax_label(logits, labels) == argmax_label(logits + 5.0, labels) == "c"


# ============================================================================
# SPLITS & FINE-TUNING
# ============================================================================

def numbered_dataset(n):
    return Dataset.from_instances([make_instance(f"a{i} x b{i}", (0, 1), (2, 3), "r") for i in range(n)])


def test_low_resource_split_sizes():
    ha = numbered_dataset(1000)
    quarter = low_resource_split(ha, 0.25, seed=1)
    assert len(quarter) == 250
    positions = [ha.instances.index(inst) for inst in quarter]
    assert positions == sorted(positions)
    assert len(low_resource_split(numbered_dataset(10), 0.25, seed=1)) == 3
    assert list(low_resource_split(ha, 1.0, seed=1)) == list(ha)
    assert low_resource_split(ha, 0.25, seed=1) == quarter
    with pytest.raises(DatasetError):
        low_resource_split(ha, 0.0, seed=1)


def test_finetune_from_scratch_overfits(separable_ha, overfit_config):
    model = finetune(None, separable_ha, overfit_config)
    assert all(predict(model, inst) == inst.relation for inst in separable_ha)
    report = evaluate(model, separable_ha)
    assert report.micro_f1 == 1.0
    assert model.history[-1] < model.history[0]


def test_finetune_from_pretrained_encoder(tmp_path, tiny_config, scored_ds, separable_ha):
    pretrain(scored_ds, tiny_config, tmp_path)
    encoder, vocab = load_encoder(tmp_path)
    model = finetune(encoder, separable_ha, tiny_config, vocab)
    assert model.label_set == separable_ha.label_set
    assert model.params.num_labels == 2
    assert model.vocab.itos == vocab.itos
    assert not np.array_equal(model.params["tok_emb"], encoder["tok_emb"])


def test_finetune_rejects_incompatible_encoder(separable_ha, overfit_config, tiny_config):
    vocab = vocabulary_from_instances(separable_ha, min_freq=1)
    tiny = init_parameters(tiny_config.encoder, len(vocab), 0, seed=1)
    assert TINY_ENCODER["d_model"] != SMALL_ENCODER["d_model"]
    with pytest.raises(ShapeMismatchError):
        finetune(tiny, separable_ha, overfit_config, vocab)
    with pytest.raises(DatasetError):
        finetune(tiny, separable_ha, tiny_config)


# ============================================================================
# SYNTHETIC NOISE BENCHMARK
# ============================================================================

def test_generate_synthetic_shapes_and_noise():
    bench = NoiseBenchConfig(num_relations=3, ha_size=30, ds_size=400, test_size=20, noise_rate=0.3)
    data = generate_synthetic(bench, seed=1)
    assert (len(data.ha), len(data.ds), len(data.test)) == (30, 400, 20)
    assert data.ds.label_set == (NA, "rel_0", "rel_1", "rel_2")
    assert len(data.flipped) == len(data.ds)

    labeled = [k for k, inst in enumerate(data.ds) if inst.relation != NA]
    rate = sum(data.flipped[k] for k in labeled) / len(labeled)
    assert rate == pytest.approx(0.3, abs=0.1)
    for inst, flipped in zip(data.ds, data.flipped):
        triggers = {tok.split("_")[0] for tok in inst.tokens if tok.startswith("trig")}
        if inst.relation == NA:
            assert not flipped and not triggers
        else:
            own = "trig" + inst.relation.split("_")[1]
            assert (own not in triggers) == flipped

    assert generate_synthetic(bench, seed=1) == data
    clean = generate_synthetic(bench.model_copy(update={"noise_rate": 0.0}), seed=1)
    assert not any(clean.flipped)


def test_flipped_instances_score_lower(overfit_config):
    bench = NoiseBenchConfig(num_relations=3, ha_size=90, ds_size=300, test_size=10, noise_rate=0.3)
    data = generate_synthetic(bench, seed=2)
    config = overfit_config.model_copy(update={"reliability": overfit_config.reliability.model_copy(
        update={"lr": 5e-3, "epochs": 30, "batch_size": 8})})
    vocab = vocabulary_from_instances(list(data.ds) + list(data.ha), min_freq=1)
    scored = score_dataset(train_classifier(data.ha, config, vocab), data.ds)
    conf = np.array([inst.confidence for inst in scored])
    flipped = np.array(data.flipped)
    assert conf[flipped].mean() < conf[~flipped].mean()


def test_noise_benchmark_report(tmp_path, bench_config):
    report = noise_benchmark(bench_config, work_dir=tmp_path / "work")
    assert len(report.f1) == 12
    assert sorted(report.f1[report.f1["seed"] == "mean"]["arm"]) == ["ft", "unweighted", "weighted"]
    assert set(report.means()) == {"ft", "unweighted", "weighted"}
    assert all(0.0 <= f <= 1.0 for f in report.f1["f1"])
    assert len(report.confidence) == 3
    assert (tmp_path / "work" / "seed-1" / "weighted" / "encoder.ckpt").is_file()

    target = report.save(tmp_path / "bench.tsv")
    assert target.read_text(encoding="utf-8").startswith("arm\tseed\tnoise_rate\tf1\n")
    assert (tmp_path / "bench.tsv.confidence.tsv").is_file()
