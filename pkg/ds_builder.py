#!/usr/bin/env python3
"""
Distant-supervision data construction from a human-annotated dataset.

Triplets (including NA) are extracted from the HA sentences, then raw corpus
sentences containing both entity surfaces are aligned to them, capped per
triplet. Pronoun entities can be filtered on both sides.
"""

import logging
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict

from data_model import NA, Bag, Dataset, Instance, Triplet, load_dataset, save_dataset, validate_dataset
from errors import DatasetError

logger = logging.getLogger(__name__)

DEFAULT_CAP = 100

_TOKEN_RE = re.compile(r"\w+(?:[-']\w+)*|[^\w\s]", re.UNICODE)
# terminator, whitespace, then an uppercase letter
_SENTENCE_BREAK_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")


class TripletSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    triplets: Tuple[Triplet, ...]
    index: Dict[Tuple[Tuple[str, ...], Tuple[str, ...]], Tuple[str, ...]]

    def __len__(self):
        return len(self.triplets)

    @classmethod
    def from_triplets(cls, triplets: Iterable[Triplet]) -> "TripletSet":
        ordered = list(dict.fromkeys(triplets))
        index = defaultdict(list)
        for t in ordered:
            index[(t.head_surface, t.tail_surface)].append(t.relation)
        return cls(triplets=tuple(ordered), index={k: tuple(v) for k, v in index.items()})

    def without_conflicting_na(self) -> "TripletSet":
        """Drop NA triplets whose ordered surface pair also carries a relation"""
        return TripletSet.from_triplets(
            t for t in self.triplets
            if not (t.is_na and any(r != NA for r in self.index[(t.head_surface, t.tail_surface)])))


class AlignmentStats(BaseModel):
    per_triplet_counts: Dict[Triplet, int]
    capped_triplets: int = 0
    total_instances: int = 0
    na_instances: int = 0
    dropped_too_long: int = 0

    def to_frame(self) -> pd.DataFrame:
        rows = [
            ("triplets", len(self.per_triplet_counts)),
            ("instances", self.total_instances),
            ("na_instances", self.na_instances),
            ("capped_triplets", self.capped_triplets),
            ("dropped_too_long", self.dropped_too_long),
        ]
        return pd.DataFrame(rows, columns=["statistic", "value"])

    def to_text(self) -> str:
        return self.to_frame().to_csv(sep="\t", index=False, lineterminator="\n")


# ============================================================================
# TOKENIZATION & CORPUS READING
# ============================================================================

def tokenize(text: str) -> List[str]:
    """Lowercase whitespace tokenization with punctuation detached"""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(raw_text: str) -> List[List[str]]:
    """Rule-based segmentation: split after . ! ? followed by whitespace and an uppercase letter.

    Known limitation: abbreviations such as "Dr. Smith" are split too.
    """
    if not raw_text or not raw_text.strip():
        return []
    sentences = []
    for chunk in _SENTENCE_BREAK_RE.split(raw_text.strip()):
        tokens = tokenize(chunk)
        if tokens:
            sentences.append(tokens)
    return sentences


def read_corpus(path: Union[str, Path], mode: str = "line") -> List[List[str]]:
    """Read a corpus file (or every file of a directory, sorted) into token lists.

    mode "doc": each file is one document, split into sentences.
    mode "line": one sentence per line.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file())
    elif path.is_file():
        files = [path]
    else:
        raise DatasetError(f"corpus not found: {path}")
    if mode not in ("doc", "line"):
        raise DatasetError(f"unknown corpus mode {mode!r}")

    sentences = []
    for file in files:
        text = file.read_text(encoding="utf-8")
        if mode == "doc":
            sentences.extend(split_sentences(text))
        else:
            for line in text.splitlines():
                tokens = tokenize(line)
                if tokens:
                    sentences.append(tokens)
    logger.info(f"Read {len(sentences)} corpus sentences from {len(files)} file(s)")
    return sentences


# ============================================================================
# TRIPLET EXTRACTION
# ============================================================================

def extract_triplets(ha: Dataset, drop_conflicting_na: bool = False) -> TripletSet:
    """Every ordered pair of distinct mentions in an HA sentence yields a triplet.

    Labeled pairs take their relation, all others NA. With drop_conflicting_na,
    an NA triplet is dropped when the same ordered surface pair is labeled
    elsewhere in the HA set.
    """
    if len(ha) == 0:
        raise DatasetError("no source instances")

    # sentence -> mentions in first-seen order, and labeled ordered pairs
    sentences: Dict[Tuple[str, ...], dict] = {}
    for inst in ha:
        entry = sentences.setdefault(inst.tokens, {"mentions": {}, "labels": {}})
        for mention in (inst.head, inst.tail):
            entry["mentions"].setdefault(mention.span, mention)
        entry["labels"].setdefault((inst.head.span, inst.tail.span), inst.relation)

    generated = []
    for entry in sentences.values():
        mentions = list(entry["mentions"].values())
        for a in mentions:
            for b in mentions:
                if a.span == b.span or a.overlaps(b):
                    continue
                relation = entry["labels"].get((a.span, b.span), NA)
                generated.append(Triplet(head_surface=a.surface, relation=relation, tail_surface=b.surface))

    ts = TripletSet.from_triplets(generated)
    if drop_conflicting_na:
        ts = ts.without_conflicting_na()
    na_count = sum(1 for t in ts.triplets if t.is_na)
    logger.info(f"Extracted {len(ts)} triplets ({na_count} NA) from {len(sentences)} HA sentences")
    return ts


# ============================================================================
# CORPUS ALIGNMENT
# ============================================================================

def find_subsequence(tokens: Sequence[str], surface: Sequence[str],
                     avoid: Optional[Tuple[int, int]] = None) -> Optional[Tuple[int, int]]:
    """First occurrence of surface in tokens (not overlapping avoid), as a half-open span"""
    n, m = len(tokens), len(surface)
    for start in range(n - m + 1):
        if tuple(tokens[start:start + m]) == tuple(surface):
            if avoid is not None and start < avoid[1] and avoid[0] < start + m:
                continue
            return (start, start + m)
    return None


def _match_shard(args) -> List[Tuple[int, int, Tuple[int, int], Tuple[int, int]]]:
    """Matches in one corpus shard as (triplet idx, corpus position, head span, tail span)"""
    triplets, sentences, offset = args
    by_first_token = defaultdict(list)
    for t_idx, t in enumerate(triplets):
        by_first_token[t.head_surface[0]].append(t_idx)

    matches = []
    for pos, tokens in enumerate(sentences, start=offset):
        lowered = [tok.lower() for tok in tokens]
        present = set(lowered)
        for first in present:
            for t_idx in by_first_token.get(first, ()):
                t = triplets[t_idx]
                if t.tail_surface[0] not in present:
                    continue
                head = find_subsequence(lowered, t.head_surface)
                if head is None:
                    continue
                tail = find_subsequence(lowered, t.tail_surface, avoid=head)
                if tail is None:
                    continue
                matches.append((t_idx, pos, head, tail))
    return matches


def align_corpus(ts: TripletSet, corpus: Iterable[Sequence[str]], cap: int = DEFAULT_CAP,
                 workers: int = 1) -> Tuple[List[Instance], AlignmentStats]:
    """Label every corpus sentence containing both surfaces of a triplet, keeping the first cap per triplet"""
    if cap < 1:
        raise DatasetError("cap must be >= 1")
    sentences = [list(s) for s in corpus]
    triplets = list(ts.triplets)

    if workers > 1 and len(sentences) > 1:
        shard_size = -(-len(sentences) // workers)
        shards = [(triplets, sentences[i:i + shard_size], i) for i in range(0, len(sentences), shard_size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            matches = [m for part in pool.map(_match_shard, shards) for m in part]
    else:
        matches = _match_shard((triplets, sentences, 0))
    # worker-count independent order
    matches.sort(key=lambda m: (m[0], m[1]))

    counts = {t: 0 for t in triplets}
    matched = defaultdict(int)
    instances = []
    for t_idx, pos, head, tail in matches:
        t = triplets[t_idx]
        matched[t_idx] += 1
        if counts[t] >= cap:
            continue
        counts[t] += 1
        instances.append(Instance.create(sentences[pos], head, tail, t.relation))

    stats = AlignmentStats(
        per_triplet_counts=counts,
        capped_triplets=sum(1 for n in matched.values() if n > cap),
        total_instances=len(instances),
        na_instances=sum(1 for inst in instances if inst.relation == NA),
    )
    logger.info(f"Aligned {stats.total_instances} instances ({stats.na_instances} NA); "
                f"{stats.capped_triplets} triplet(s) hit the cap of {cap}")
    return instances, stats


# ============================================================================
# FILTERS & BAGS
# ============================================================================

def is_pronoun_entity(inst: Instance, pronouns: Iterable[str]) -> bool:
    pronouns = set(pronouns)
    return any(len(m.surface) == 1 and m.surface[0].lower() in pronouns for m in (inst.head, inst.tail))


def filter_pronoun_entities(instances: Iterable[Instance], pronouns: Iterable[str]) -> List[Instance]:
    pronouns = {p.lower() for p in pronouns}
    return [inst for inst in instances if not is_pronoun_entity(inst, pronouns)]


def assemble_bags(instances: Sequence[Instance], confidences: Sequence[float]) -> List[Bag]:
    """Group instances by normalized triplet; bags keep first-seen order"""
    if len(instances) != len(confidences):
        raise DatasetError(f"misaligned confidences: {len(confidences)} for {len(instances)} instances")
    groups: Dict[Triplet, list] = {}
    for inst, c in zip(instances, confidences):
        c = float(c)
        if not 0.0 <= c <= 1.0:
            raise DatasetError(f"confidence {c} outside [0, 1]")
        groups.setdefault(Triplet.of(inst), []).append((inst, c))
    return [Bag(triplet=t, members=tuple(members)) for t, members in groups.items()]


# ============================================================================
# ORCHESTRATION
# ============================================================================

def drop_too_long(instances: Iterable[Instance], max_len: int) -> Tuple[List[Instance], int]:
    """Drop instances whose marked sequence (tokens + 6 markers) exceeds max_len"""
    kept, dropped = [], 0
    for inst in instances:
        if len(inst.tokens) + 6 > max_len:
            dropped += 1
        else:
            kept.append(inst)
    if dropped:
        logger.warning(f"⚠️ Dropped {dropped} instance(s) longer than max_len={max_len} after markers")
    return kept, dropped


def build_ds(ha: Dataset, corpus: Iterable[Sequence[str]], cap: int = DEFAULT_CAP,
             drop_pronouns: bool = False, pronouns: Iterable[str] = (), max_len: Optional[int] = None,
             workers: int = 1, drop_conflicting_na: bool = False) -> Tuple[Dataset, AlignmentStats]:
    report = validate_dataset(ha)
    if report:
        raise DatasetError(f"HA dataset has {len(report)} violation(s); first: "
                           f"{report.violations[0].message}")
    pronouns = list(pronouns)
    if drop_pronouns:
        kept = filter_pronoun_entities(ha.instances, pronouns)
        logger.info(f"Pronoun filter removed {len(ha) - len(kept)} HA instance(s)")
        ha = ha.replace(kept)

    ts = extract_triplets(ha, drop_conflicting_na)
    instances, stats = align_corpus(ts, corpus, cap=cap, workers=workers)
    if drop_pronouns:
        instances = filter_pronoun_entities(instances, pronouns)
    if max_len is not None:
        instances, dropped = drop_too_long(instances, max_len)
        stats.dropped_too_long = dropped
    stats.total_instances = len(instances)
    stats.na_instances = sum(1 for inst in instances if inst.relation == NA)
    label_set = [label for label in ha.label_set]
    if any(inst.relation == NA for inst in instances) and NA not in label_set:
        label_set.insert(0, NA)
    return Dataset.from_instances(instances, label_set), stats


def build_ds_files(ha_path, corpus_path, out_path, cap: int = DEFAULT_CAP, corpus_mode: str = "line",
                   drop_pronouns: bool = False, pronouns: Iterable[str] = (), max_len: Optional[int] = None,
                   workers: int = 1, drop_conflicting_na: bool = False) -> AlignmentStats:
    ha = load_dataset(ha_path)
    corpus = read_corpus(corpus_path, corpus_mode)
    ds, stats = build_ds(ha, corpus, cap=cap, drop_pronouns=drop_pronouns, pronouns=pronouns,
                         max_len=max_len, workers=workers, drop_conflicting_na=drop_conflicting_na)
    out_path = Path(out_path)
    save_dataset(ds, out_path)
    stats_path = out_path.with_name(out_path.name + ".stats.tsv")
    stats_path.write_text(stats.to_text(), encoding="utf-8")
    logger.info(f"✅ Wrote {len(ds)} DS instances to {out_path}")
    return stats
