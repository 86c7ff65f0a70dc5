#!/usr/bin/env python3
"""
Core domain types and the on-disk record format for the WCL pipeline.

Instance files are JSON lines, one record per line:
    {"tokens": [...], "head": [start, end], "tail": [start, end],
     "relation": "...", "confidence": 0.75}
Spans are half-open token indices; confidence is optional.
"""

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from errors import DatasetError, RecordParseError, RecordValidationError

logger = logging.getLogger(__name__)

NA = "NA"


class EntityMention(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: int
    end: int
    surface: Tuple[str, ...]

    @property
    def span(self) -> Tuple[int, int]:
        return (self.start, self.end)

    @classmethod
    def from_span(cls, tokens: Sequence[str], span: Sequence[int]) -> "EntityMention":
        start, end = int(span[0]), int(span[1])
        surface = tuple(tokens[max(start, 0):max(end, 0)])
        return cls(start=start, end=end, surface=surface)

    def overlaps(self, other: "EntityMention") -> bool:
        return self.start < other.end and other.start < self.end


class Instance(BaseModel):
    """A tokenized sentence with head/tail spans, a relation label and optional confidence"""

    model_config = ConfigDict(frozen=True)

    tokens: Tuple[str, ...]
    head: EntityMention
    tail: EntityMention
    relation: str
    confidence: Optional[float] = None

    @classmethod
    def create(cls, tokens: Sequence[str], head: Sequence[int], tail: Sequence[int],
               relation: str, confidence: Optional[float] = None) -> "Instance":
        tokens = tuple(tokens)
        return cls(
            tokens=tokens,
            head=EntityMention.from_span(tokens, head),
            tail=EntityMention.from_span(tokens, tail),
            relation=relation,
            confidence=confidence,
        )

    def with_confidence(self, confidence: Optional[float]) -> "Instance":
        return self.model_copy(update={"confidence": confidence})


class Triplet(BaseModel):
    """(head surface, relation, tail surface); surfaces are stored lowercased"""

    model_config = ConfigDict(frozen=True)

    head_surface: Tuple[str, ...]
    relation: str
    tail_surface: Tuple[str, ...]

    @field_validator("head_surface", "tail_surface")
    @classmethod
    def _normalize_surface(cls, value):
        if not value:
            raise ValueError("surface must be non-empty")
        return tuple(token.lower() for token in value)

    @classmethod
    def of(cls, inst: Instance) -> "Triplet":
        return cls(head_surface=inst.head.surface, relation=inst.relation,
                   tail_surface=inst.tail.surface)

    @property
    def is_na(self) -> bool:
        return self.relation == NA

    def __str__(self):
        return f"({' '.join(self.head_surface)}, {self.relation}, {' '.join(self.tail_surface)})"


class Bag(BaseModel):
    """All instances sharing one triplet, each paired with its confidence"""

    model_config = ConfigDict(frozen=True)

    triplet: Triplet
    members: Tuple[Tuple[Instance, float], ...]

    @model_validator(mode="after")
    def _members_match_triplet(self):
        if not self.members:
            raise ValueError("a bag needs at least one member")
        for inst, _ in self.members:
            if Triplet.of(inst) != self.triplet:
                raise ValueError(f"bag member does not match triplet {self.triplet}")
        return self

    @property
    def is_na(self) -> bool:
        return self.triplet.is_na

    @property
    def size(self) -> int:
        return len(self.members)


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    rule: str
    message: str


class ValidationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    violations: Tuple[Violation, ...] = ()

    def __len__(self):
        return len(self.violations)

    def __bool__(self):
        return bool(self.violations)

    def to_text(self) -> str:
        return "".join(f"{v.index + 1}\t{v.rule}\t{v.message}\n" for v in self.violations)


def derive_label_set(relations: Iterable[str]) -> Tuple[str, ...]:
    """NA first when present, then lexicographic"""
    labels = sorted(set(relations))
    if NA in labels:
        labels.remove(NA)
        labels.insert(0, NA)
    return tuple(labels)


class Dataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    instances: Tuple[Instance, ...]
    label_set: Tuple[str, ...]

    @classmethod
    def from_instances(cls, instances: Iterable[Instance],
                       label_set: Optional[Sequence[str]] = None) -> "Dataset":
        instances = tuple(instances)
        if label_set is None:
            label_set = derive_label_set(inst.relation for inst in instances)
        return cls(instances=instances, label_set=tuple(label_set))

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def replace(self, instances: Iterable[Instance]) -> "Dataset":
        return Dataset(instances=tuple(instances), label_set=self.label_set)


# ============================================================================
# RECORD FORMAT
# ============================================================================

class _InstanceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tokens: List[str]
    head: Tuple[int, int]
    tail: Tuple[int, int]
    relation: str
    confidence: Optional[float] = None


def instance_violations(inst: Instance) -> List[Tuple[str, str]]:
    """Every Instance invariant broken by inst, as (rule, message) pairs"""
    problems = []
    n = len(inst.tokens)
    if n == 0:
        problems.append(("empty tokens", "token list is empty"))
    for name, mention in (("head", inst.head), ("tail", inst.tail)):
        if mention.start >= mention.end:
            problems.append(("empty span", f"empty span: {name}=[{mention.start},{mention.end})"))
        elif mention.start < 0 or mention.end > n:
            problems.append(("span out of bounds",
                             f"{name}=[{mention.start},{mention.end}) outside [0,{n})"))
        elif mention.surface != tuple(inst.tokens[mention.start:mention.end]):
            problems.append(("surface mismatch", f"{name} surface does not match its span"))
    if inst.head.start < inst.head.end and inst.tail.start < inst.tail.end and inst.head.overlaps(inst.tail):
        problems.append(("overlapping spans", "head and tail spans overlap"))
    if not inst.relation:
        problems.append(("empty relation", "relation label is empty"))
    if inst.confidence is not None and not 0.0 <= inst.confidence <= 1.0:
        problems.append(("confidence range", f"confidence {inst.confidence} outside [0, 1]"))
    return problems


def parse_instance_record(line: str, line_no: Optional[int] = None, strict: bool = True) -> Instance:
    """Parse one JSON-lines record; strict also enforces the Instance invariants"""
    try:
        record = _InstanceRecord.model_validate_json(line)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(part) for part in err["loc"]) or "record"
        raise RecordParseError(field, err["msg"], line_no) from None
    inst = Instance.create(record.tokens, record.head, record.tail,
                           record.relation, record.confidence)
    problems = instance_violations(inst) if strict else []
    if problems:
        rule, message = problems[0]
        raise RecordValidationError(rule, message, line_no)
    return inst


def serialize_instance_record(inst: Instance) -> str:
    record = _InstanceRecord(
        tokens=list(inst.tokens),
        head=inst.head.span,
        tail=inst.tail.span,
        relation=inst.relation,
        confidence=inst.confidence,
    )
    return record.model_dump_json(exclude_none=True)


def validate_dataset(ds: Dataset) -> ValidationReport:
    violations = []
    labels = set(ds.label_set)
    for index, inst in enumerate(ds.instances):
        for rule, message in instance_violations(inst):
            violations.append(Violation(index=index, rule=rule, message=message))
        if inst.relation and inst.relation not in labels:
            violations.append(Violation(index=index, rule="unknown label",
                                        message=f"unknown label {inst.relation!r}"))
    return ValidationReport(violations=tuple(violations))


def load_dataset(path: Union[str, Path], label_set: Optional[Sequence[str]] = None,
                 strict: bool = True) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    instances = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                instances.append(parse_instance_record(line, line_no, strict))
    logger.info(f"Loaded {len(instances)} instances from {path}")
    return Dataset.from_instances(instances, label_set)


def save_dataset(ds: Union[Dataset, Iterable[Instance]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for inst in ds:
            f.write(serialize_instance_record(inst) + "\n")
    return path
