#!/usr/bin/env python3
"""
Stage 1: weighted contrastive pre-training on scored DS data.

Every step samples a contrastive batch of bags, computes the WCL loss on
the entity-marker representations and the MLM loss on masked copies of the
batch members plus a few NA instances, and applies one Adam update to the
sum L = L_wcl + L_mlm.

All randomness is drawn from generators keyed by (seed, stream, step), so
resuming from a checkpoint needs only the step counter.
"""

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import MaskingPolicy, PipelineConfig, make_rng, write_effective_config
from data_model import NA, Dataset, Instance
from ds_builder import assemble_bags
from encoder import (MASK, NUM_SPECIAL, STAGE_PRETRAIN, Adam, EncoderParameters, MarkedSequence,
                     Vocabulary, check_compatible, init_parameters, mark_all, mark_instance, mlm_loss,
                     representation_loss, vocabulary_from_instances)
from errors import CheckpointError, DatasetError, InsufficientBagsError, NonFiniteLossError
from wcl import ContrastiveBatch, eligible_bags, sample_batch, wcl_loss_batch

logger = logging.getLogger(__name__)

__all__ = ["MaskingPolicy", "PretrainState", "mask_tokens", "pretrain_step", "pretrain", "read_loss_log"]

STREAM_MASK = 401

LOSS_LOG = "pretrain.log"
ENCODER_FILE = "encoder.ckpt"
VOCAB_FILE = "vocab.txt"
LOG_COLUMNS = ["step", "L_wcl", "L_mlm", "L"]


def state_file(step: int) -> str:
    return f"state-{step:06d}.ckpt"


# ============================================================================
# MASKING
# ============================================================================

def _maskable(ids: Sequence[int]) -> np.ndarray:
    # special tokens, [UNK] included, are never selected
    return np.asarray(ids) >= NUM_SPECIAL


def mask_tokens(seq: Union[MarkedSequence, Sequence[int]], policy: MaskingPolicy, seed: int,
                vocab_size: int, *stream: int) -> Tuple[MarkedSequence, List[int], List[int]]:
    """BERT masking; returns (masked sequence, target positions, original ids at those positions)"""
    if not isinstance(seq, MarkedSequence):
        seq = MarkedSequence(ids=tuple(seq), h_index=-1, t_index=-1)
    ids = np.array(seq.ids, dtype=np.int64)
    candidates = np.flatnonzero(_maskable(ids))
    if len(candidates) == 0:
        raise DatasetError("sequence has no maskable tokens")

    rng = make_rng(seed, STREAM_MASK, *stream)
    selected = candidates[rng.random(len(candidates)) < policy.mask_rate]
    if len(selected) == 0:
        selected = candidates[[int(rng.integers(len(candidates)))]]

    targets = ids[selected].copy()
    roll = rng.random(len(selected))
    to_mask = roll < policy.replace_mask
    to_random = (roll >= policy.replace_mask) & (roll < policy.replace_mask + policy.replace_random)
    ids[selected[to_mask]] = MASK
    if to_random.any():
        # random replacements come from the ordinary vocabulary only
        ids[selected[to_random]] = rng.integers(NUM_SPECIAL, max(vocab_size, NUM_SPECIAL + 1),
                                                size=int(to_random.sum()))
    masked = MarkedSequence(ids=tuple(int(i) for i in ids), h_index=seq.h_index, t_index=seq.t_index)
    return masked, selected.tolist(), targets.tolist()


# ============================================================================
# STATE
# ============================================================================

class PretrainState:
    """Parameters, Adam moments, vocabulary and completed-step counter"""

    def __init__(self, params: EncoderParameters, vocab: Vocabulary, optimizer: Adam, step: int = 0):
        self.params = params
        self.vocab = vocab
        self.optimizer = optimizer
        self.step = step

    @classmethod
    def fresh(cls, config: PipelineConfig, vocab: Vocabulary) -> "PretrainState":
        params = init_parameters(config.encoder, len(vocab), 0, config.seed, STAGE_PRETRAIN)
        optimizer = Adam(params, lr=config.pretrain.lr, clip=config.pretrain.clip)
        return cls(params, vocab, optimizer)

    def copy(self) -> "PretrainState":
        params = self.params.copy()
        optimizer = Adam(params, lr=self.optimizer.lr, clip=self.optimizer.clip)
        optimizer.load_state(self.optimizer.state_tensors(), self.optimizer.t)
        return PretrainState(params, self.vocab, optimizer, self.step)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.vocab.save(path.parent / VOCAB_FILE)
        return self.params.save(path, meta={"step": self.step, "adam_t": self.optimizer.t},
                                extra=self.optimizer.state_tensors())

    @classmethod
    def load(cls, path: Union[str, Path], config: PipelineConfig) -> "PretrainState":
        path = Path(path)
        params, meta, extra = EncoderParameters.load(path)
        if "step" not in meta:
            raise CheckpointError(f"{path}: not a pre-training state checkpoint")
        check_compatible(params, config.encoder)
        vocab = Vocabulary.load(path.parent / VOCAB_FILE)
        if len(vocab) != params.vocab_size:
            raise CheckpointError(f"{path}: vocabulary has {len(vocab)} tokens, checkpoint {params.vocab_size}")
        optimizer = Adam(params, lr=config.pretrain.lr, clip=config.pretrain.clip)
        optimizer.load_state(extra, int(meta.get("adam_t", meta["step"])))
        return cls(params, vocab, optimizer, int(meta["step"]))


# ============================================================================
# TRAINING
# ============================================================================

def learning_rate(config: PipelineConfig, step: int) -> float:
    """Linear warmup over the first warmup_fraction of steps, then constant"""
    section = config.pretrain
    warmup = math.ceil(section.warmup_fraction * section.steps)
    if warmup <= 0:
        return section.lr
    return section.lr * min(1.0, (step + 1) / warmup)


def pretrain_step(state: PretrainState, batch: ContrastiveBatch, config: PipelineConfig,
                  extra_mlm: Sequence[Instance] = ()) -> Tuple[float, float, PretrainState]:
    """One update on L = L_wcl + L_mlm; state is modified in place and returned"""
    params, step = state.params, state.step
    max_len = params.config.max_len
    if config.pretrain.unweighted:
        batch = batch.with_confidences(np.ones(len(batch)))

    members = [mark_instance(m.instance, state.vocab, max_len) for m in batch.members]
    l_wcl, grads = representation_loss(
        params, members,
        lambda reps: wcl_loss_batch(batch, reps, T=config.wcl.temperature,
                                    include_self=config.wcl.include_self,
                                    outer_anchor_weight=config.wcl.outer_anchor_weight))

    mlm_batch = []
    extra = [mark_instance(inst, state.vocab, max_len) for inst in extra_mlm]
    for i, seq in enumerate(members + extra):
        if not _maskable(seq.ids).any():
            continue
        masked, positions, targets = mask_tokens(seq, config.mlm, config.seed, params.vocab_size, step, i)
        mlm_batch.append((masked.ids, positions, targets))
    l_mlm, mlm_grads = mlm_loss(params, mlm_batch)
    for name, g in mlm_grads.items():
        grads[name] += g

    total = l_wcl + l_mlm
    if not math.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss at step {step + 1}", step=step + 1,
                                 details={"L_wcl": l_wcl, "L_mlm": l_mlm,
                                          "confidences": batch.confidences.tolist()})
    state.optimizer.step(params, grads, learning_rate(config, step))
    state.step = step + 1
    return l_wcl, l_mlm, state


def _write_diagnostic(out_dir: Path, state: PretrainState, exc: NonFiniteLossError) -> Path:
    step = exc.step if exc.step is not None else state.step + 1
    target = out_dir / f"diagnostic-step-{step}.txt"
    lines = [f"step\t{step}", f"error\t{exc}"]
    lines += [f"{key}\t{value}" for key, value in sorted(exc.details.items())]
    lines += [f"norm/{name}\t{float(np.linalg.norm(t))!r}" for name, t in state.params.items()]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target


def read_loss_log(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", dtype={"step": int, "L_wcl": float, "L_mlm": float, "L": float})


def _log_row(step: int, l_wcl: float, l_mlm: float) -> str:
    l_wcl, l_mlm = float(l_wcl), float(l_mlm)
    return f"{step}\t{l_wcl!r}\t{l_mlm!r}\t{l_wcl + l_mlm!r}\n"


def _prepare(ds_scored: Dataset, config: PipelineConfig, vocab: Vocabulary):
    """(eligible bags, NA instances) from the encodable part of the scored DS data"""
    marked = mark_all(ds_scored.instances, vocab, config.encoder.max_len)
    instances = [ds_scored.instances[i] for i, _ in marked]
    if config.pretrain.unweighted:
        confidences = [1.0] * len(instances)
    else:
        missing = sum(inst.confidence is None for inst in instances)
        if missing:
            raise DatasetError(f"{missing} instance(s) have no confidence; score the DS data first")
        confidences = [inst.confidence for inst in instances]
    bags = eligible_bags(assemble_bags(instances, confidences))
    if len(bags) < config.wcl.batch_bags:
        raise InsufficientBagsError(len(bags), config.wcl.batch_bags)
    na_pool = [inst for inst in instances if inst.relation == NA]
    logger.info(f"Pre-training on {len(bags)} eligible bag(s), {len(na_pool)} NA instance(s) for MLM")
    return bags, na_pool


def _na_slice(na_pool: Sequence[Instance], step: int, count: int) -> List[Instance]:
    if not na_pool or count == 0:
        return []
    return [na_pool[(step * count + i) % len(na_pool)] for i in range(count)]


def pretrain(ds_scored: Dataset, config: PipelineConfig, out_dir: Union[str, Path],
             resume_from: Optional[Union[str, Path]] = None,
             vocab: Optional[Vocabulary] = None) -> EncoderParameters:
    """Run config.pretrain.steps steps; writes state checkpoints, the loss log and encoder.ckpt"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, out_dir)

    if resume_from is not None:
        state = PretrainState.load(resume_from, config)
        logger.info(f"Resuming from {resume_from} at step {state.step}")
    else:
        if vocab is None:
            vocab = vocabulary_from_instances(ds_scored, config.encoder.min_freq)
        state = PretrainState.fresh(config, vocab)
    state.vocab.save(out_dir / VOCAB_FILE)
    bags, na_pool = _prepare(ds_scored, config, state.vocab)

    log_path = out_dir / LOSS_LOG
    kept = []
    if state.step > 0 and log_path.is_file():
        # rows after the resume step are rewritten
        kept = [line for line in log_path.read_text(encoding="utf-8").splitlines(keepends=True)[1:]
                if line.strip() and int(line.split("\t", 1)[0]) <= state.step]
    section = config.pretrain
    with open(log_path, "w", encoding="utf-8", newline="\n") as log:
        log.write("\t".join(LOG_COLUMNS) + "\n")
        log.writelines(kept)
        for step in tqdm(range(state.step, section.steps), desc="pretrain", disable=None, leave=False):
            batch = sample_batch(bags, config.wcl.batch_bags, config.wcl.bag_size, config.seed, step)
            try:
                l_wcl, l_mlm, state = pretrain_step(state, batch, config,
                                                    _na_slice(na_pool, step, section.na_per_step))
            except NonFiniteLossError as exc:
                log.flush()
                dump = _write_diagnostic(out_dir, state, exc)
                logger.error(f"❌ Non-finite loss at step {step + 1}; diagnostics in {dump}")
                raise
            log.write(_log_row(state.step, l_wcl, l_mlm))
            if state.step % section.checkpoint_every == 0:
                state.save(out_dir / state_file(state.step))
                logger.info(f"step {state.step}: L_wcl={l_wcl:.4f} L_mlm={l_mlm:.4f} L={l_wcl + l_mlm:.4f}")

    state.params.save(out_dir / ENCODER_FILE, meta={"step": state.step})
    logger.info(f"✅ Pre-training finished after {state.step} step(s); encoder saved to {out_dir / ENCODER_FILE}")
    return state.params


def load_encoder(path: Union[str, Path]) -> Tuple[EncoderParameters, Vocabulary]:
    """Pre-trained encoder and its vocabulary from a checkpoint file or output directory"""
    path = Path(path)
    if path.is_dir():
        path = path / ENCODER_FILE
    params, _, _ = EncoderParameters.load(path)
    return params, Vocabulary.load(path.parent / VOCAB_FILE)
