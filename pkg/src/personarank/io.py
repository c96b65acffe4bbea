"""Readers and writers for the on-disk formats.

All files are UTF-8 with LF line endings:

* queries: ``qid<TAB>text``
* qrels: TREC 4-column ``qid 0 docid grade``
* runs: TREC 6-column ``qid Q0 docid rank score tag``
* rewrites, embeddings: JSON lines

Writers emit the canonical form, so ``write(load(f))`` reproduces a
canonical file byte for byte.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .types import (
    PairEmbedding,
    Qrels,
    Query,
    QuerySet,
    RankedRun,
    RewriteRecord,
    RewriteStatus,
    RewriteStep,
    Role,
)

logger = logging.getLogger(__name__)


def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    text = path.read_text(encoding="utf-8")
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def _write_lines(path, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


# -- queries ---------------------------------------------------------------


def load_queries(path) -> QuerySet:
    queries = []
    seen: set[str] = set()
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        qid, sep, text = line.partition("\t")
        if not sep or not qid.strip() or not text.strip():
            raise DataError(f"{path}:{lineno}: expected 'qid<TAB>text'")
        if qid in seen:
            raise DataError(f"{path}:{lineno}: duplicate qid {qid!r}")
        seen.add(qid)
        queries.append(Query(qid, text, Role.ORIGINAL))
    return QuerySet(queries)


def write_queries(path, queries: Iterable[Query]) -> None:
    _write_lines(path, (f"{q.qid}\t{q.text}" for q in queries))


# -- qrels -----------------------------------------------------------------


def load_qrels(path, num_levels: int) -> Qrels:
    """Parse a TREC qrels file. Duplicate pairs are last-write-wins and counted."""
    qrels = Qrels(num_levels)
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
        qid, _, docid, raw = parts
        try:
            grade = int(raw)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer grade {raw!r}") from None
        try:
            replaced = qrels.set(qid, docid, grade)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if replaced:
            qrels.duplicates += 1
    if qrels.duplicates:
        logger.warning("%s: %d duplicate judgment(s), last one kept", path, qrels.duplicates)
    return qrels


def write_qrels(path, qrels: Qrels) -> None:
    _write_lines(
        path,
        (f"{qid} 0 {docid} {g}" for qid, docs in qrels.grades.items() for docid, g in docs.items()),
    )


# -- runs ------------------------------------------------------------------


def load_run(path, role: Role | str | int = Role.ORIGINAL) -> RankedRun:
    rankings: dict[str, list[tuple[str, float]]] = {}
    tag = None
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise DataError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
        qid, _, docid, _rank, raw_score, run_tag = parts
        try:
            score = float(raw_score)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric score {raw_score!r}") from None
        tag = tag or run_tag
        rankings.setdefault(qid, []).append((docid, score))
    return RankedRun(role, rankings, tag=tag or Path(path).stem)


def format_run(run: RankedRun) -> list[str]:
    return [
        f"{qid} Q0 {docid} {rank} {score!r} {run.tag}"
        for qid, pairs in run.rankings.items()
        for rank, (docid, score) in enumerate(pairs, start=1)
    ]


def write_run(path, run: RankedRun) -> None:
    _write_lines(path, format_run(run))


# -- rewrites --------------------------------------------------------------


def rewrite_to_dict(rec: RewriteRecord) -> dict:
    return {
        "qid": rec.qid,
        "role": rec.role.label,
        "original_text": rec.original_text,
        "rewritten_text": rec.rewritten_text,
        "intent_summary": rec.intent_summary,
        "iterations": rec.iterations,
        "s0": rec.s0,
        "s1": rec.s1,
        "status": rec.status.value,
        "history": [
            {"template": h.template, "candidate": h.candidate, "s0": h.s0, "s1": h.s1}
            for h in rec.history
        ],
    }


def rewrite_from_dict(obj: dict) -> RewriteRecord:
    try:
        return RewriteRecord(
            qid=str(obj["qid"]),
            role=Role.parse(obj["role"]),
            original_text=obj["original_text"],
            rewritten_text=obj["rewritten_text"],
            intent_summary=obj.get("intent_summary", ""),
            iterations=int(obj["iterations"]),
            s0=int(obj["s0"]),
            s1=int(obj["s1"]),
            status=RewriteStatus(obj["status"]),
            history=tuple(
                RewriteStep(h["template"], h["candidate"], int(h["s0"]), int(h["s1"]))
                for h in obj.get("history", ())
            ),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed rewrite record: {exc}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def write_rewrites(path, records: Iterable[RewriteRecord]) -> None:
    _write_lines(path, (_dumps(rewrite_to_dict(r)) for r in records))


def load_rewrites(path) -> list[RewriteRecord]:
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc.msg}") from None
        try:
            out.append(rewrite_from_dict(obj))
        except (DataError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


# -- embeddings ------------------------------------------------------------


def write_embeddings(path, records: Iterable[PairEmbedding]) -> None:
    _write_lines(
        path,
        (
            _dumps({"qid": r.qid, "role": r.role.label, "docid": r.docid, "vec": r.vec.tolist()})
            for r in records
        ),
    )


def load_embeddings(path) -> list[PairEmbedding]:
    out: list[PairEmbedding] = []
    dim = None
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            vec = np.asarray(obj["vec"], dtype=np.float64)
            role = Role.parse(obj["role"])
            rec = PairEmbedding(str(obj["qid"]), role, str(obj["docid"]), vec)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if dim is None:
            dim = rec.dim
        elif rec.dim != dim:
            raise DataError(f"{path}:{lineno}: dimension mismatch, expected {dim}, got {rec.dim}")
        out.append(rec)
    return out


def stack_embeddings(records: Sequence[PairEmbedding]) -> dict[tuple[str, Role, str], np.ndarray]:
    return {(r.qid, r.role, r.docid): r.vec for r in records}
