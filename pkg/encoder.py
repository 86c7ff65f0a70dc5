#!/usr/bin/env python3
"""
A small pre-layer-norm transformer encoder written directly in numpy.

Covers the vocabulary, entity-marker sequences, the forward pass, exact
backward passes for every layer, the MLM and classifier heads, the Adam
optimizer, finite-difference gradient checking and checkpoint I/O.
All arithmetic is float64.
"""

import json
import logging
import math
import struct
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import EncoderSection, make_rng
from data_model import Instance
from errors import (CheckpointError, DataError, NonFiniteLossError, SequenceTooLongError,
                    ShapeMismatchError)

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[H_CLS]", "[H_SEP]", "[T_CLS]", "[T_SEP]"]
PAD, UNK, CLS, SEP, MASK, H_CLS, H_SEP, T_CLS, T_SEP = range(len(SPECIAL_TOKENS))
NUM_SPECIAL = len(SPECIAL_TOKENS)
MARKERS_PER_INSTANCE = 6

CHECKPOINT_MAGIC = b"WCLRE\x00CK"
CHECKPOINT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)

# Seed streams
STREAM_INIT = 101
STREAM_GRADCHECK = 102

# Initialization stages
STAGE_RELIABILITY = 1
STAGE_PRETRAIN = 2
STAGE_FINETUNE = 3


# ============================================================================
# VOCABULARY & MARKED SEQUENCES
# ============================================================================

class Vocabulary:
    """Token -> id map; the 9 special tokens hold ids 0-8"""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(SPECIAL_TOKENS) + [t for t in tokens]
        self.stoi = {token: i for i, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token.lower(), UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for token in self.itos[NUM_SPECIAL:]:
                f.write(token + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocabulary(corpus: Iterable[str], min_freq: int = 2) -> Vocabulary:
    """Lowercased tokens with frequency >= min_freq, by descending frequency then lexicographically"""
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    counts = Counter(token.lower() for token in corpus)
    for special in SPECIAL_TOKENS:
        counts.pop(special.lower(), None)
    kept = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def vocabulary_from_instances(instances: Iterable[Instance], min_freq: int = 2) -> Vocabulary:
    return build_vocabulary((tok for inst in instances for tok in inst.tokens), min_freq)


class MarkedSequence(BaseModel):
    model_config = ConfigDict(frozen=True)

    ids: Tuple[int, ...]
    h_index: int
    t_index: int

    def __len__(self):
        return len(self.ids)


def mark_instance(inst: Instance, vocab: Vocabulary, max_len: int = 128) -> MarkedSequence:
    """[CLS] ... [H_CLS] head [H_SEP] ... [T_CLS] tail [T_SEP] ... [SEP], markers in textual order"""
    length = len(inst.tokens) + MARKERS_PER_INSTANCE
    if length > max_len:
        raise SequenceTooLongError(length, max_len)
    ids = [CLS]
    h_index = t_index = -1
    for i, token in enumerate(inst.tokens):
        if i == inst.head.start:
            h_index = len(ids)
            ids.append(H_CLS)
        if i == inst.tail.start:
            t_index = len(ids)
            ids.append(T_CLS)
        ids.append(vocab.id(token))
        if i == inst.head.end - 1:
            ids.append(H_SEP)
        if i == inst.tail.end - 1:
            ids.append(T_SEP)
    ids.append(SEP)
    return MarkedSequence(ids=tuple(ids), h_index=h_index, t_index=t_index)


def mark_all(instances: Sequence[Instance], vocab: Vocabulary,
             max_len: int) -> List[Tuple[int, MarkedSequence]]:
    """(index, sequence) for every encodable instance; too-long instances are skipped"""
    marked, skipped = [], 0
    for index, inst in enumerate(instances):
        try:
            marked.append((index, mark_instance(inst, vocab, max_len)))
        except SequenceTooLongError:
            skipped += 1
    if skipped:
        logger.warning(f"⚠️ Skipped {skipped} instance(s) longer than max_len={max_len}")
    return marked


# ============================================================================
# PARAMETERS
# ============================================================================

_LAYER_TENSORS = [
    ("ln1_g", "ones"), ("ln1_b", "zeros"),
    ("wq", "normal"), ("bq", "zeros"), ("wk", "normal"), ("bk", "zeros"),
    ("wv", "normal"), ("bv", "zeros"), ("wo", "normal"), ("bo", "zeros"),
    ("ln2_g", "ones"), ("ln2_b", "zeros"),
    ("w1", "normal"), ("b1", "zeros"), ("w2", "normal"), ("b2", "zeros"),
]


def tensor_layout(config: EncoderSection, vocab_size: int,
                  num_labels: int) -> "OrderedDict[str, Tuple[Tuple[int, ...], str]]":
    """Declared tensor order: name -> (shape, init kind)"""
    d, f = config.d_model, config.ffn_width
    layout = OrderedDict()
    layout["tok_emb"] = ((vocab_size, d), "normal")
    layout["pos_emb"] = ((config.max_len, d), "normal")
    for layer in range(config.n_layers):
        shapes = {
            "ln1_g": (d,), "ln1_b": (d,), "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,), "ln2_g": (d,), "ln2_b": (d,),
            "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
        }
        for name, kind in _LAYER_TENSORS:
            layout[f"layer{layer}.{name}"] = (shapes[name], kind)
    layout["lnf_g"] = ((d,), "ones")
    layout["lnf_b"] = ((d,), "zeros")
    layout["mlm_w"] = ((d, vocab_size), "normal")
    layout["mlm_b"] = ((vocab_size,), "zeros")
    layout["cls_w"] = ((2 * d, num_labels), "normal")
    layout["cls_b"] = ((num_labels,), "zeros")
    return layout


class EncoderParameters:
    """All trainable tensors of the encoder, MLM head and classification head"""

    def __init__(self, config: EncoderSection, vocab_size: int, num_labels: int,
                 tensors: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.vocab_size = vocab_size
        self.num_labels = num_labels
        layout = tensor_layout(config, vocab_size, num_labels)
        if list(tensors) != list(layout):
            raise ShapeMismatchError("tensor names do not match the declared layout")
        for name, (shape, _) in layout.items():
            if tensors[name].shape != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "EncoderParameters":
        return EncoderParameters(self.config, self.vocab_size, self.num_labels,
                                 OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def with_classifier(self, num_labels: int, seed: int, stage: int = 0) -> "EncoderParameters":
        """Same encoder weights with a freshly initialized classification head"""
        fresh = init_parameters(self.config, self.vocab_size, num_labels, seed, stage)
        tensors = OrderedDict((k, v.copy()) for k, v in self.tensors.items())
        tensors["cls_w"] = fresh["cls_w"]
        tensors["cls_b"] = fresh["cls_b"]
        return EncoderParameters(self.config, self.vocab_size, num_labels, tensors)

    def header(self) -> dict:
        return {
            "encoder": self.config.model_dump(),
            "vocab_size": self.vocab_size,
            "num_labels": self.num_labels,
        }

    def save(self, path: Union[str, Path], meta: Optional[dict] = None,
             extra: Optional["OrderedDict[str, np.ndarray]"] = None) -> Path:
        tensors = OrderedDict(self.tensors)
        if extra:
            tensors.update(extra)
        header = self.header()
        header["meta"] = meta or {}
        return save_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["EncoderParameters", dict, Dict[str, np.ndarray]]:
        """Returns (parameters, meta, extra tensors)"""
        header, tensors = load_checkpoint(path)
        try:
            config = EncoderSection(**header["encoder"])
            vocab_size, num_labels = int(header["vocab_size"]), int(header["num_labels"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed header ({exc})") from None
        layout = tensor_layout(config, vocab_size, num_labels)
        missing = [name for name in layout if name not in tensors]
        if missing:
            raise CheckpointError(f"{path}: missing tensors {missing[:3]}")
        own = OrderedDict((name, tensors.pop(name)) for name in layout)
        params = cls(config, vocab_size, num_labels, own)
        if not params.all_finite():
            raise CheckpointError(f"{path}: non-finite parameter values")
        return params, header.get("meta", {}), tensors


def init_parameters(config: EncoderSection, vocab_size: int, num_labels: int, seed: int,
                    stage: int = 0, init_std: Optional[float] = None) -> EncoderParameters:
    """normal(0, init_std) weights, zero biases, unit layer-norm gains; stage picks an independent stream"""
    std = config.init_std if init_std is None else init_std
    rng = make_rng(seed, STREAM_INIT, stage)
    tensors = OrderedDict()
    for name, (shape, kind) in tensor_layout(config, vocab_size, num_labels).items():
        if kind == "ones":
            tensors[name] = np.ones(shape)
        elif kind == "zeros":
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, std, size=shape)
    return EncoderParameters(config, vocab_size, num_labels, tensors)


def check_compatible(params: EncoderParameters, config: EncoderSection):
    """Encoder architecture of params must match config"""
    for key in ("d_model", "n_layers", "n_heads", "ffn_width", "max_len"):
        have, want = getattr(params.config, key), getattr(config, key)
        if have != want:
            raise ShapeMismatchError(f"encoder.{key}: checkpoint has {have}, config wants {want}")


# ============================================================================
# LAYERS
# ============================================================================

def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u))


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _forward(params: EncoderParameters, ids: Sequence[int]):
    config = params.config
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise DataError("empty sequence")
    if n > config.max_len:
        raise SequenceTooLongError(n, config.max_len)
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise DataError(f"token id out of range [0, {params.vocab_size})")

    eps = config.layer_norm_eps
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.d_model // H)
    x = params["tok_emb"][ids] + params["pos_emb"][:n]
    layers = []
    for layer in range(config.n_layers):
        p = lambda name: params[f"layer{layer}.{name}"]
        a, ln1 = _layer_norm(x, p("ln1_g"), p("ln1_b"), eps)
        q = _split_heads(a @ p("wq") + p("bq"), H)
        k = _split_heads(a @ p("wk") + p("bk"), H)
        v = _split_heads(a @ p("wv") + p("bv"), H)
        probs = _softmax(q @ k.transpose(0, 2, 1) * scale)
        ctx = _merge_heads(probs @ v)
        x = x + ctx @ p("wo") + p("bo")
        m, ln2 = _layer_norm(x, p("ln2_g"), p("ln2_b"), eps)
        u = m @ p("w1") + p("b1")
        gu, t = _gelu(u)
        x = x + gu @ p("w2") + p("b2")
        layers.append((a, ln1, q, k, v, probs, ctx, m, ln2, u, gu, t))
    h, lnf = _layer_norm(x, params["lnf_g"], params["lnf_b"], eps)
    return h, (ids, layers, lnf)


def _backward(params: EncoderParameters, cache, dh, grads):
    """Accumulate d(loss)/d(params) into grads given d(loss)/d(hidden states)"""
    config = params.config
    ids, layers, lnf = cache
    H = config.n_heads
    scale = 1.0 / math.sqrt(config.d_model // H)

    dx, dg, db = _layer_norm_backward(dh, params["lnf_g"], lnf)
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    for layer in reversed(range(config.n_layers)):
        a, ln1, q, k, v, probs, ctx, m, ln2, u, gu, t = layers[layer]
        name = lambda n: f"layer{layer}.{n}"
        # feed-forward
        grads[name("w2")] += gu.T @ dx
        grads[name("b2")] += dx.sum(axis=0)
        du = _gelu_backward(dx @ params[name("w2")].T, u, t)
        grads[name("w1")] += m.T @ du
        grads[name("b1")] += du.sum(axis=0)
        dm = du @ params[name("w1")].T
        dres, dg, db = _layer_norm_backward(dm, params[name("ln2_g")], ln2)
        grads[name("ln2_g")] += dg
        grads[name("ln2_b")] += db
        dx = dx + dres
        # attention
        grads[name("wo")] += ctx.T @ dx
        grads[name("bo")] += dx.sum(axis=0)
        dctx = _split_heads(dx @ params[name("wo")].T, H)
        dprobs = dctx @ v.transpose(0, 2, 1)
        dv = probs.transpose(0, 2, 1) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dq = _merge_heads(dscores @ k)
        dk = _merge_heads(dscores.transpose(0, 2, 1) @ q)
        dv = _merge_heads(dv)
        da = np.zeros_like(a)
        for proj, dproj in (("q", dq), ("k", dk), ("v", dv)):
            grads[name("w" + proj)] += a.T @ dproj
            grads[name("b" + proj)] += dproj.sum(axis=0)
            da += dproj @ params[name("w" + proj)].T
        dres, dg, db = _layer_norm_backward(da, params[name("ln1_g")], ln1)
        grads[name("ln1_g")] += dg
        grads[name("ln1_b")] += db
        dx = dx + dres
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:len(ids)] += dx


def encode(params: EncoderParameters, seq: Union[MarkedSequence, Sequence[int]]) -> np.ndarray:
    """Hidden states, shape (length, d_model)"""
    ids = seq.ids if isinstance(seq, MarkedSequence) else seq
    h, _ = _forward(params, ids)
    return h


def instance_representation(params: EncoderParameters, seq: MarkedSequence) -> np.ndarray:
    """h[H_CLS] concatenated with h[T_CLS]"""
    h = encode(params, seq)
    return np.concatenate([h[seq.h_index], h[seq.t_index]])


def representation_with_cache(params: EncoderParameters, seq: MarkedSequence):
    h, cache = _forward(params, seq.ids)
    return np.concatenate([h[seq.h_index], h[seq.t_index]]), (h.shape, cache)


def backprop_representation(params: EncoderParameters, seq: MarkedSequence, cache, drep: np.ndarray, grads):
    shape, inner = cache
    d = params.config.d_model
    dh = np.zeros(shape)
    dh[seq.h_index] += drep[:d]
    dh[seq.t_index] += drep[d:]
    _backward(params, inner, dh, grads)


def representation_loss(params: EncoderParameters, seqs: Sequence[MarkedSequence],
                        loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]]
                        ) -> Tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Any loss over the stacked representations of seqs, with grads pulled back into params.

    loss_fn maps the (n, 2d) representation matrix to (loss, d loss / d reps).
    """
    reps, caches = [], []
    for seq in seqs:
        rep, cache = representation_with_cache(params, seq)
        reps.append(rep)
        caches.append(cache)
    loss, dreps = loss_fn(np.stack(reps))
    grads = params.zeros_like()
    for seq, cache, drep in zip(seqs, caches, dreps):
        backprop_representation(params, seq, cache, drep, grads)
    return loss, grads


# ============================================================================
# HEADS & LOSSES
# ============================================================================

def classifier_logits(params: EncoderParameters, seq: MarkedSequence) -> np.ndarray:
    rep = instance_representation(params, seq)
    return rep @ params["cls_w"] + params["cls_b"]


def classifier_loss(params: EncoderParameters,
                    batch: Sequence[Tuple[MarkedSequence, int]]) -> Tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Mean cross-entropy of softmax(classifier(representation)) and its gradient"""
    grads = params.zeros_like()
    if not batch:
        return 0.0, grads
    weight = 1.0 / len(batch)
    total = 0.0
    for seq, label in batch:
        rep, cache = representation_with_cache(params, seq)
        logits = rep @ params["cls_w"] + params["cls_b"]
        logp = log_softmax(logits)
        total -= logp[label]
        dlogits = np.exp(logp)
        dlogits[label] -= 1.0
        dlogits *= weight
        grads["cls_w"] += np.outer(rep, dlogits)
        grads["cls_b"] += dlogits
        backprop_representation(params, seq, cache, params["cls_w"] @ dlogits, grads)
    return float(total * weight), grads


def mlm_forward(params: EncoderParameters, masked_seq: Union[MarkedSequence, Sequence[int]],
                target_positions: Sequence[int], target_ids: Sequence[int]) -> float:
    """Mean cross-entropy over the target positions (0 when there are none)"""
    if len(target_positions) == 0:
        return 0.0
    h = encode(params, masked_seq)
    logits = h[np.asarray(target_positions)] @ params["mlm_w"] + params["mlm_b"]
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(target_ids)), np.asarray(target_ids)].mean())


def mlm_loss(params: EncoderParameters,
             batch: Sequence[Tuple[Sequence[int], Sequence[int], Sequence[int]]]
             ) -> Tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Mean cross-entropy over every target position of every (ids, positions, targets) item"""
    grads = params.zeros_like()
    count = sum(len(positions) for _, positions, _ in batch)
    if count == 0:
        return 0.0, grads
    weight = 1.0 / count
    total = 0.0
    for ids, positions, targets in batch:
        if len(positions) == 0:
            continue
        positions = np.asarray(positions)
        targets = np.asarray(targets)
        h, cache = _forward(params, ids)
        hp = h[positions]
        logp = log_softmax(hp @ params["mlm_w"] + params["mlm_b"])
        rows = np.arange(len(targets))
        total -= logp[rows, targets].sum()
        dlogits = np.exp(logp)
        dlogits[rows, targets] -= 1.0
        dlogits *= weight
        grads["mlm_w"] += hp.T @ dlogits
        grads["mlm_b"] += dlogits.sum(axis=0)
        dh = np.zeros_like(h)
        dh[positions] += dlogits @ params["mlm_w"].T
        _backward(params, cache, dh, grads)
    return float(total * weight), grads


# ============================================================================
# OPTIMIZATION
# ============================================================================

def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


class Adam:
    """Adaptive moment estimation with global-norm gradient clipping"""

    def __init__(self, params: EncoderParameters, lr: float = 1e-3, clip: Optional[float] = 1.0,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.clip = clip
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: EncoderParameters, grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> float:
        """One in-place update; returns the pre-clip gradient norm"""
        lr = self.lr if lr is None else lr
        norm = global_norm(grads)
        if not math.isfinite(norm):
            raise NonFiniteLossError("non-finite gradient norm")
        scale = self.clip / norm if self.clip is not None and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = g * scale
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, m in self.m.items():
            out[f"adam.m/{name}"] = m
        for name, v in self.v.items():
            out[f"adam.v/{name}"] = v
        return out

    def load_state(self, tensors: Dict[str, np.ndarray], t: int):
        for name in self.m:
            try:
                self.m[name] = tensors[f"adam.m/{name}"].copy()
                self.v[name] = tensors[f"adam.v/{name}"].copy()
            except KeyError:
                raise CheckpointError(f"optimizer state for {name} missing") from None
        self.t = t


# ============================================================================
# GRADIENT CHECKING
# ============================================================================

def gradient_check(loss_fn: Callable[[EncoderParameters], Tuple[float, Dict[str, np.ndarray]]],
                   params: EncoderParameters, seed: int = 0, epsilon: float = 1e-5,
                   num_coords: int = 200, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are sampled evenly across every non-empty tensor. The
    denominator is floored so exactly-zero gradients do not divide by zero.
    """
    loss, grads = loss_fn(params)
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss}")
    rng = make_rng(seed, STREAM_GRADCHECK)
    names = [name for name, tensor in params.items() if tensor.size > 0]
    per_tensor = max(1, -(-num_coords // len(names)))

    worst = 0.0
    for name in names:
        tensor = params[name]
        count = min(per_tensor, tensor.size)
        for flat in rng.choice(tensor.size, size=count, replace=False):
            idx = np.unravel_index(int(flat), tensor.shape)
            original = tensor[idx]
            tensor[idx] = original + epsilon
            plus, _ = loss_fn(params)
            tensor[idx] = original - epsilon
            minus, _ = loss_fn(params)
            tensor[idx] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NonFiniteLossError(f"non-finite loss while perturbing {name}")
            numeric = (plus - minus) / (2.0 * epsilon)
            analytic = float(grads[name][idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if err > worst:
                logger.debug(f"{name}{idx}: analytic={analytic:.6e} numeric={numeric:.6e} err={err:.3e}")
                worst = err
    return worst


# ============================================================================
# CHECKPOINT I/O
# ============================================================================

def save_checkpoint(path: Union[str, Path], header: dict,
                    tensors: "OrderedDict[str, np.ndarray]") -> Path:
    """magic, version, JSON header, then float64 little-endian tensors in declared order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["tensors"] = [[name, list(t.shape)] for name, t in tensors.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for tensor in tensors.values():
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    sidecar = path.with_name(path.name + ".txt")
    sidecar.write_text("".join(f"{name}\t{'x'.join(map(str, t.shape)) or 'scalar'}\n"
                               for name, t in tensors.items()), encoding="utf-8")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<IQ", data, offset)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset += struct.calcsize("<IQ")
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    tensors = OrderedDict()
    for name, shape in header.pop("tensors"):
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        tensors[name] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    return header, tensors
