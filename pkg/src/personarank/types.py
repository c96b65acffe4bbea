"""Domain types shared by the rewriting pipeline, the ranking head and the metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError


class Role(enum.IntEnum):
    """Query author persona. ``ORIGINAL`` is the unrewritten user query."""

    ORIGINAL = 0
    WOMAN = 1
    MAN = 2
    STUDENT = 3
    ELDER = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | Role") -> "Role":
        if isinstance(value, Role):
            return value
        if isinstance(value, (int, np.integer)):
            try:
                return cls(int(value))
            except ValueError:
                raise DataError(f"unknown role index {value!r}") from None
        key = str(value).strip().upper()
        if key == "OLD":  # column label used for the elder persona in result tables
            key = "ELDER"
        try:
            return cls[key]
        except KeyError:
            raise DataError(f"unknown role {value!r}") from None


ALL_ROLES: tuple[Role, ...] = tuple(Role)
PERSONAS: tuple[Role, ...] = tuple(r for r in Role if r is not Role.ORIGINAL)
NUM_ROLES = len(ALL_ROLES)


@dataclass(frozen=True)
class Query:
    qid: str
    text: str
    role: Role = Role.ORIGINAL

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise DataError(f"query {self.qid!r} has empty text")


class QuerySet(Sequence[Query]):
    """Ordered, immutable collection of queries keyed by ``(qid, role)``."""

    def __init__(self, queries: Iterable[Query] = ()) -> None:
        items = tuple(queries)
        index: dict[tuple[str, Role], int] = {}
        for i, q in enumerate(items):
            key = (q.qid, q.role)
            if key in index:
                raise DataError(f"duplicate query {q.qid!r} for role {q.role.label}")
            index[key] = i
        self._items = items
        self._index = index

    def __getitem__(self, i):  # type: ignore[override]
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Query]:
        return iter(self._items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, QuerySet) and self._items == other._items

    def get(self, qid: str, role: Role = Role.ORIGINAL) -> Query:
        try:
            return self._items[self._index[(qid, role)]]
        except KeyError:
            raise DataError(f"no query {qid!r} for role {role.label}") from None

    @property
    def qids(self) -> list[str]:
        seen: dict[str, None] = {}
        for q in self._items:
            seen.setdefault(q.qid, None)
        return list(seen)


class RewriteStatus(str, enum.Enum):
    ACCEPTED = "Accepted"
    FALLBACK_ORIGINAL = "FallbackOriginal"


@dataclass(frozen=True)
class RewriteStep:
    """One generate-then-check round of the rewriting loop."""

    template: str
    candidate: str
    s0: int
    s1: int


@dataclass(frozen=True)
class RewriteRecord:
    qid: str
    role: Role
    original_text: str
    rewritten_text: str
    intent_summary: str
    iterations: int
    s0: int
    s1: int
    status: RewriteStatus
    history: tuple[RewriteStep, ...] = ()

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        for s in (self.s0, self.s1):
            if s not in (-1, 0, 1):
                raise DataError(f"check score {s} outside {{-1, 0, 1}}")
        if self.status is RewriteStatus.ACCEPTED and (self.s0 < 0 or self.s1 < 0):
            raise DataError("accepted rewrite with a negative check score")
        if self.status is RewriteStatus.FALLBACK_ORIGINAL and self.rewritten_text != self.original_text:
            raise DataError("fallback rewrite must carry the original text")

    @property
    def templates(self) -> list[str]:
        return [step.template for step in self.history]

    def as_query(self) -> Query:
        return Query(self.qid, self.rewritten_text, self.role)


@dataclass(frozen=True)
class Document:
    docid: str
    text: str = ""


@dataclass
class Qrels:
    """Graded judgments ``(qid, docid) -> grade`` with ``num_levels`` grades."""

    num_levels: int
    grades: dict[str, dict[str, int]] = field(default_factory=dict)
    duplicates: int = 0

    def __post_init__(self) -> None:
        if self.num_levels not in (3, 5):
            raise DataError(f"num_levels must be 3 or 5, got {self.num_levels}")
        for qid, docs in self.grades.items():
            for docid, g in docs.items():
                self._check(qid, docid, g)

    def _check(self, qid: str, docid: str, grade: int) -> None:
        if not 0 <= grade < self.num_levels:
            raise DataError(
                f"grade {grade} for ({qid}, {docid}) outside [0, {self.num_levels - 1}]"
            )

    def set(self, qid: str, docid: str, grade: int) -> bool:
        """Store a grade; returns True when an existing entry was overwritten."""
        self._check(qid, docid, grade)
        docs = self.grades.setdefault(qid, {})
        replaced = docid in docs
        docs[docid] = grade
        return replaced

    def for_query(self, qid: str) -> Mapping[str, int]:
        try:
            return self.grades[qid]
        except KeyError:
            raise DataError(f"no judgments for query {qid!r}") from None

    def grade(self, qid: str, docid: str) -> int:
        return self.grades.get(qid, {}).get(docid, 0)

    @property
    def qids(self) -> list[str]:
        return list(self.grades)

    def __len__(self) -> int:
        return sum(len(d) for d in self.grades.values())


@dataclass(frozen=True)
class PairEmbedding:
    qid: str
    role: Role
    docid: str
    vec: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vec, dtype=np.float64)
        if v.ndim != 1:
            raise DataError("embedding must be a 1-d vector")
        if not np.all(np.isfinite(v)):
            raise DataError(f"non-finite embedding for ({self.qid}, {self.role.label}, {self.docid})")
        object.__setattr__(self, "vec", v)

    @property
    def dim(self) -> int:
        return int(self.vec.shape[0])


class RankedRun:
    """Per-query scored rankings for one role.

    Scores are sorted descending with ties broken by docid ascending, so
    the order is a total order and re-sorting is a no-op.
    """

    def __init__(self, role: Role, rankings: Mapping[str, Iterable[tuple[str, float]]], tag: str = "run"):
        self.role = Role.parse(role)
        self.tag = tag
        self.rankings: dict[str, list[tuple[str, float]]] = {}
        for qid, pairs in rankings.items():
            items = [(str(d), float(s)) for d, s in pairs]
            docids = [d for d, _ in items]
            if len(set(docids)) != len(docids):
                raise DataError(f"duplicate docid in run {tag!r} for query {qid!r}")
            self.rankings[qid] = sorted(items, key=lambda p: (-p[1], p[0]))

    @property
    def qids(self) -> list[str]:
        return list(self.rankings)

    def docids(self, qid: str) -> list[str]:
        try:
            return [d for d, _ in self.rankings[qid]]
        except KeyError:
            raise DataError(f"run {self.tag!r} has no ranking for query {qid!r}") from None

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, RankedRun)
            and self.role == other.role
            and self.tag == other.tag
            and self.rankings == other.rankings
        )

    def __repr__(self) -> str:
        return f"RankedRun(role={self.role.label}, tag={self.tag!r}, queries={len(self.rankings)})"
