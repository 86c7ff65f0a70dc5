#!/usr/bin/env python3
"""
Reliability estimation for distantly supervised instances.

A relation classifier is trained on the human-annotated data; every DS
instance is then scored with the softmax probability the classifier gives
to its DS-assigned label.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from config import PipelineConfig, make_rng
from data_model import Dataset, Instance
from encoder import (STAGE_RELIABILITY, Adam, EncoderParameters, Vocabulary, classifier_logits,
                     classifier_loss, init_parameters, log_softmax, mark_all, mark_instance,
                     vocabulary_from_instances)
from errors import CheckpointError, DatasetError

logger = logging.getLogger(__name__)

MODEL_FILE = "model.ckpt"
VOCAB_FILE = "vocab.txt"

STREAM_SHUFFLE = 201


class ClassifierModel:
    """Encoder + classification head; logits index k always means label_set[k]"""

    def __init__(self, params: EncoderParameters, vocab: Vocabulary, label_set: Sequence[str],
                 history: Optional[List[float]] = None):
        if params.num_labels != len(label_set):
            raise DatasetError(f"classifier has {params.num_labels} outputs for {len(label_set)} labels")
        self.params = params
        self.vocab = vocab
        self.label_set = tuple(label_set)
        self.history = history or []
        self._index = {label: k for k, label in enumerate(self.label_set)}

    def label_index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise DatasetError(f"unknown label {label!r}") from None

    def logits(self, inst: Instance) -> np.ndarray:
        seq = mark_instance(inst, self.vocab, self.params.config.max_len)
        return classifier_logits(self.params, seq)

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.params.save(out_dir / MODEL_FILE, meta={"label_set": list(self.label_set)})
        self.vocab.save(out_dir / VOCAB_FILE)
        return out_dir

    @classmethod
    def load(cls, model_dir: Union[str, Path]) -> "ClassifierModel":
        model_dir = Path(model_dir)
        params, meta, _ = EncoderParameters.load(model_dir / MODEL_FILE)
        if "label_set" not in meta:
            raise CheckpointError(f"{model_dir}: checkpoint has no label ordering")
        return cls(params, Vocabulary.load(model_dir / VOCAB_FILE), meta["label_set"])


def confidence_from_logits(logits: np.ndarray, label_index: int) -> float:
    """exp(F(x, r)) / sum_r' exp(F(x, r'))"""
    return float(np.exp(log_softmax(np.asarray(logits, dtype=np.float64))[label_index]))


def fit_classifier(params: EncoderParameters, vocab: Vocabulary, ds: Dataset, label_set: Sequence[str],
                   lr: float, epochs: int, batch_size: int, clip: float, seed: int,
                   desc: str = "classifier") -> Tuple[EncoderParameters, List[float]]:
    """Minibatch cross-entropy training with Adam; returns (params, mean loss per epoch)"""
    index = {label: k for k, label in enumerate(label_set)}
    unknown = sorted({inst.relation for inst in ds} - set(index))
    if unknown:
        raise DatasetError(f"unknown label {unknown[0]!r}")
    marked = mark_all(ds.instances, vocab, params.config.max_len)
    if not marked:
        raise DatasetError("no encodable training instances")
    examples = [(seq, index[ds.instances[i].relation]) for i, seq in marked]

    optimizer = Adam(params, lr=lr, clip=clip)
    rng = make_rng(seed, STREAM_SHUFFLE)
    history = []
    for epoch in tqdm(range(epochs), desc=desc, disable=None, leave=False):
        order = rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start:start + batch_size]]
            loss, grads = classifier_loss(params, batch)
            optimizer.step(params, grads)
            total += loss * len(batch)
        history.append(total / len(examples))
        logger.debug(f"{desc} epoch {epoch + 1}/{epochs}: loss={history[-1]:.6f}")
    logger.info(f"{desc}: {epochs} epoch(s), loss {history[0]:.4f} -> {history[-1]:.4f}")
    return params, history


def train_classifier(ha: Dataset, config: PipelineConfig, vocab: Optional[Vocabulary] = None) -> ClassifierModel:
    """Supervised RE on the HA data; NA is an ordinary class here"""
    if len(ha) == 0:
        raise DatasetError("no training instances")
    if len({inst.relation for inst in ha}) < 2:
        raise DatasetError("degenerate label set")
    if vocab is None:
        vocab = vocabulary_from_instances(ha, config.encoder.min_freq)
    params = init_parameters(config.encoder, len(vocab), len(ha.label_set), config.seed, STAGE_RELIABILITY)
    section = config.reliability
    params, history = fit_classifier(params, vocab, ha, ha.label_set, section.lr, section.epochs,
                                     section.batch_size, section.clip, config.seed, desc="reliability")
    return ClassifierModel(params, vocab, ha.label_set, history)


def label_confidences(model: ClassifierModel, inst: Instance) -> np.ndarray:
    """Softmax over every label; sums to 1"""
    return np.exp(log_softmax(model.logits(inst)))


def confidence(model: ClassifierModel, inst: Instance) -> float:
    return confidence_from_logits(model.logits(inst), model.label_index(inst.relation))


def score_dataset(model: ClassifierModel, ds: Dataset) -> Dataset:
    """Same instances (order preserved) with confidence populated; too-long instances are dropped"""
    for i, inst in enumerate(ds):
        if inst.relation not in model.label_set:
            raise DatasetError(f"record {i + 1}: unknown label {inst.relation!r}")
    scored = []
    marked = mark_all(ds.instances, model.vocab, model.params.config.max_len)
    for i, seq in tqdm(marked, desc="scoring", disable=None, leave=False):
        inst = ds.instances[i]
        logits = classifier_logits(model.params, seq)
        scored.append(inst.with_confidence(confidence_from_logits(logits, model.label_index(inst.relation))))
    logger.info(f"Scored {len(scored)} instance(s); mean confidence "
                f"{np.mean([s.confidence for s in scored]) if scored else float('nan'):.4f}")
    return ds.replace(scored)
