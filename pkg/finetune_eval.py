#!/usr/bin/env python3
"""
Stage 2: supervised fine-tuning, prediction and micro-F1 evaluation.

Also holds the low-resource splitter and the synthetic noise benchmark,
which compares fine-tuning alone against unweighted and confidence-weighted
contrastive pre-training on DS data with a controlled share of wrong labels.
"""

import logging
import math
import tempfile
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from config import NoiseBenchConfig, PipelineConfig, make_rng, with_seed
from data_model import NA, Dataset, Instance, derive_label_set
from encoder import (STAGE_FINETUNE, EncoderParameters, Vocabulary, check_compatible, classifier_logits,
                     init_parameters, mark_all, vocabulary_from_instances)
from errors import DatasetError
from pretrain import pretrain
from reliability import ClassifierModel, fit_classifier, score_dataset, train_classifier

logger = logging.getLogger(__name__)

__all__ = ["NoiseBenchConfig", "EvalReport", "low_resource_split", "finetune", "predict", "micro_f1",
           "evaluate", "generate_synthetic", "noise_benchmark"]

STREAM_SPLIT = 501
STREAM_SYNTHETIC = 502

ARMS = ("ft", "unweighted", "weighted")

F1Mode = Literal["exclude_na", "all"]


# ============================================================================
# SPLITTING & FINE-TUNING
# ============================================================================

def low_resource_split(ha: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform subset of round(fraction * N) instances, original order kept"""
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    size = int(math.floor(fraction * len(ha) + 0.5))
    rng = make_rng(seed, STREAM_SPLIT)
    chosen = np.sort(rng.choice(len(ha), size=size, replace=False))
    logger.info(f"Low-resource split: {size}/{len(ha)} instances (fraction={fraction})")
    return ha.replace(ha.instances[int(i)] for i in chosen)


def finetune(init: Optional[EncoderParameters], ha: Dataset, config: PipelineConfig,
             vocab: Optional[Vocabulary] = None) -> ClassifierModel:
    """Encoder + fresh classification head trained on HA; init=None is the from-scratch baseline"""
    if len(ha) == 0:
        raise DatasetError("no training instances")
    num_labels = len(ha.label_set)
    if init is None:
        if vocab is None:
            vocab = vocabulary_from_instances(ha, config.encoder.min_freq)
        params = init_parameters(config.encoder, len(vocab), num_labels, config.seed, STAGE_FINETUNE)
    else:
        if vocab is None:
            raise DatasetError("a pre-trained encoder needs its vocabulary")
        check_compatible(init, config.encoder)
        params = init.with_classifier(num_labels, config.seed, STAGE_FINETUNE)
    section = config.finetune
    params, history = fit_classifier(params, vocab, ha, ha.label_set, section.lr, section.epochs,
                                     section.batch_size, section.clip, config.seed, desc="finetune")
    return ClassifierModel(params, vocab, ha.label_set, history)


def argmax_label(logits: np.ndarray, label_set: Sequence[str]) -> str:
    # np.argmax returns the first maximum, so ties go to the lowest index
    return label_set[int(np.argmax(logits))]


def predict(model: ClassifierModel, inst: Instance) -> str:
    return argmax_label(model.logits(inst), model.label_set)


# ============================================================================
# METRICS
# ============================================================================

class EvalReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    micro_f1: float = Field(ge=0, le=1)
    tp: int
    fp: int
    fn: int
    na_label: str = NA
    mode: F1Mode = "exclude_na"
    # gold label -> predicted label -> count
    confusion: Dict[str, Dict[str, int]] = Field(default_factory=dict)

    def confusion_frame(self) -> pd.DataFrame:
        labels = list(derive_label_set(
            list(self.confusion) + [p for row in self.confusion.values() for p in row]))
        if self.na_label in labels and labels[0] != self.na_label:
            labels.remove(self.na_label)
            labels.insert(0, self.na_label)
        frame = pd.DataFrame(0, index=labels, columns=labels, dtype=int)
        for gold, row in self.confusion.items():
            for pred, count in row.items():
                frame.loc[gold, pred] = count
        frame.index.name = "gold\\pred"
        return frame

    def to_text(self) -> str:
        head = f"P\tR\tF1\n{self.precision:.6f}\t{self.recall:.6f}\t{self.micro_f1:.6f}\n"
        if not self.confusion:
            return head
        return head + "\n" + self.confusion_frame().to_csv(sep="\t", lineterminator="\n")


def micro_f1(preds: Sequence[str], gold: Sequence[str], na: str = NA, mode: F1Mode = "exclude_na") -> EvalReport:
    """Micro P/R/F1 from global counts; NA never counts as a true positive unless mode='all'"""
    if len(preds) != len(gold):
        raise DatasetError(f"length mismatch: {len(preds)} predictions, {len(gold)} gold labels")
    tp = fp = fn = 0
    confusion: Dict[str, Dict[str, int]] = {}
    for p, g in zip(preds, gold):
        row = confusion.setdefault(g, {})
        row[p] = row.get(p, 0) + 1
        if mode == "all":
            if p == g:
                tp += 1
            else:
                fp += 1
                fn += 1
            continue
        if p == g and g != na:
            tp += 1
        if p != na and p != g:
            fp += 1
        if g != na and p != g:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(precision=precision, recall=recall, micro_f1=f1, tp=tp, fp=fp, fn=fn,
                      na_label=na, mode=mode, confusion=confusion)


def evaluate(model: ClassifierModel, ds: Dataset, na_label: str = NA, mode: F1Mode = "exclude_na") -> EvalReport:
    marked = mark_all(ds.instances, model.vocab, model.params.config.max_len)
    preds, gold = [], []
    for i, seq in marked:
        preds.append(argmax_label(classifier_logits(model.params, seq), model.label_set))
        gold.append(ds.instances[i].relation)
    report = micro_f1(preds, gold, na_label, mode)
    logger.info(f"Evaluated {len(gold)} instance(s): P={report.precision:.4f} "
                f"R={report.recall:.4f} F1={report.micro_f1:.4f}")
    return report


# ============================================================================
# SYNTHETIC NOISE BENCHMARK
# ============================================================================

class SyntheticData(BaseModel):
    model_config = ConfigDict(frozen=True)

    ha: Dataset
    ds: Dataset
    test: Dataset
    # True where the DS text carries another relation's triggers
    flipped: Tuple[bool, ...]


def _relation_name(r: int) -> str:
    return f"rel_{r}"


def _sentence(rng: np.random.Generator, bench: NoiseBenchConfig, head: str, tail: str,
              text_relation: Optional[int]) -> Tuple[List[str], int, int]:
    content = [head, tail]
    if text_relation is not None:
        picks = rng.integers(bench.triggers_per_relation, size=2)
        content += [f"trig{text_relation}_{int(k)}" for k in picks]
    fillers = rng.integers(bench.filler_vocab, size=max(bench.sentence_length - len(content), 0))
    content += [f"w{int(k)}" for k in fillers]
    order = rng.permutation(len(content))
    tokens = [content[int(i)] for i in order]
    return tokens, int(np.flatnonzero(order == 0)[0]), int(np.flatnonzero(order == 1)[0])


def _clean_instances(rng: np.random.Generator, bench: NoiseBenchConfig, count: int) -> List[Instance]:
    """HA/test style: random entities, triggers of the gold relation, no label noise"""
    pool = 2 * bench.num_relations * bench.pairs_per_relation
    instances = []
    for _ in range(count):
        h, t = rng.choice(pool, size=2, replace=False)
        if rng.random() < bench.na_fraction:
            r, label = None, NA
        else:
            r = int(rng.integers(bench.num_relations))
            label = _relation_name(r)
        tokens, hi, ti = _sentence(rng, bench, f"e{int(h)}", f"e{int(t)}", r)
        instances.append(Instance.create(tokens, (hi, hi + 1), (ti, ti + 1), label))
    return instances


def _ds_instances(rng: np.random.Generator, bench: NoiseBenchConfig) -> Tuple[List[Instance], List[bool]]:
    """DS style: fixed entity pairs per relation; with prob noise_rate the text belongs to another relation"""
    R, P = bench.num_relations, bench.pairs_per_relation
    na_pairs = max(P, 1)
    instances, flipped = [], []
    for _ in range(bench.ds_size):
        if rng.random() < bench.na_fraction:
            p = int(rng.integers(na_pairs))
            tokens, hi, ti = _sentence(rng, bench, f"n{2 * p}", f"n{2 * p + 1}", None)
            instances.append(Instance.create(tokens, (hi, hi + 1), (ti, ti + 1), NA))
            flipped.append(False)
            continue
        r = int(rng.integers(R))
        p = int(rng.integers(P))
        text_r = r
        if rng.random() < bench.noise_rate:
            text_r = int((r + 1 + rng.integers(R - 1)) % R)
        pair = 2 * (r * P + p)
        tokens, hi, ti = _sentence(rng, bench, f"e{pair}", f"e{pair + 1}", text_r)
        instances.append(Instance.create(tokens, (hi, hi + 1), (ti, ti + 1), _relation_name(r)))
        flipped.append(text_r != r)
    return instances, flipped


def generate_synthetic(bench: NoiseBenchConfig, seed: int) -> SyntheticData:
    rng = make_rng(seed, STREAM_SYNTHETIC)
    labels = derive_label_set([NA] + [_relation_name(r) for r in range(bench.num_relations)])
    ha = _clean_instances(rng, bench, bench.ha_size)
    ds, flipped = _ds_instances(rng, bench)
    test = _clean_instances(rng, bench, bench.test_size)
    return SyntheticData(ha=Dataset.from_instances(ha, labels), ds=Dataset.from_instances(ds, labels),
                         test=Dataset.from_instances(test, labels), flipped=tuple(flipped))


class NoiseBenchReport:
    """F1 per (arm, seed) plus per-arm means, and mean DS confidence of clean vs flipped instances"""

    def __init__(self, f1: pd.DataFrame, confidence: pd.DataFrame):
        self.f1 = f1
        self.confidence = confidence

    def means(self) -> Dict[str, float]:
        rows = self.f1[self.f1["seed"] == "mean"]
        return dict(zip(rows["arm"], rows["f1"].astype(float)))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.f1.to_csv(path, sep="\t", index=False, lineterminator="\n")
        self.confidence.to_csv(path.with_name(path.name + ".confidence.tsv"), sep="\t", index=False,
                               lineterminator="\n")
        return path


def _arm_config(config: PipelineConfig, unweighted: bool) -> PipelineConfig:
    return config.model_copy(update={"pretrain": config.pretrain.model_copy(update={"unweighted": unweighted})})


def noise_benchmark(config: PipelineConfig, work_dir: Optional[Union[str, Path]] = None,
                    arms: Sequence[str] = ARMS) -> NoiseBenchReport:
    """FT only vs unweighted pre-train + FT vs weighted pre-train + FT, for every seed in config.bench"""
    bench = config.bench
    rows, confidence_rows = [], []
    with tempfile.TemporaryDirectory(prefix="wclre-bench-") as scratch:
        root = Path(work_dir) if work_dir is not None else Path(scratch)
        for seed in bench.seeds:
            cfg = with_seed(config, seed)
            data = generate_synthetic(bench, seed)
            vocab = vocabulary_from_instances(list(data.ds) + list(data.ha), cfg.encoder.min_freq)

            reliability = train_classifier(data.ha, cfg, vocab)
            scored = score_dataset(reliability, data.ds)
            conf = np.array([inst.confidence for inst in scored])
            flipped = np.array(data.flipped)
            confidence_rows.append({
                "seed": seed, "noise_rate": bench.noise_rate,
                "clean": float(conf[~flipped].mean()) if (~flipped).any() else float("nan"),
                "flipped": float(conf[flipped].mean()) if flipped.any() else float("nan"),
            })
            logger.info(f"seed {seed}: mean confidence clean={confidence_rows[-1]['clean']:.4f} "
                        f"flipped={confidence_rows[-1]['flipped']:.4f}")

            for arm in arms:
                if arm == "ft":
                    model = finetune(None, data.ha, cfg, vocab)
                else:
                    arm_cfg = _arm_config(cfg, unweighted=(arm == "unweighted"))
                    encoder = pretrain(scored, arm_cfg, root / f"seed-{seed}" / arm, vocab=vocab)
                    model = finetune(encoder, data.ha, arm_cfg, vocab)
                report = evaluate(model, data.test, cfg.eval.na_label, cfg.eval.f1_mode)
                rows.append({"arm": arm, "seed": str(seed), "noise_rate": bench.noise_rate, "f1": report.micro_f1})
                logger.info(f"✅ seed {seed} arm {arm}: F1={report.micro_f1:.4f}")

    f1 = pd.DataFrame(rows, columns=["arm", "seed", "noise_rate", "f1"])
    means = (f1.groupby("arm", sort=False)["f1"].mean().reset_index()
             .assign(seed="mean", noise_rate=bench.noise_rate)[["arm", "seed", "noise_rate", "f1"]])
    return NoiseBenchReport(pd.concat([f1, means], ignore_index=True),
                            pd.DataFrame(confidence_rows, columns=["seed", "noise_rate", "clean", "flipped"]))
