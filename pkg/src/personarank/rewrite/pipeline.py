"""Persona query rewriting with a check-and-regenerate loop.

For every query the intent is extracted once; then, for each persona, a
first rewrite is generated and checked on two axes (semantic fidelity
``s0`` and persona conformity ``s1``, each in {-1, 0, 1}). A failing
candidate is regenerated with the template matching the failing axis
until it passes or the iteration budget runs out, in which case the
original query text is kept.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from ..errors import DataError, ParseError
from ..types import Query, QuerySet, RewriteRecord, RewriteStatus, RewriteStep, Role
from .backends import Backend, LLMClient, as_client
from .prompts import AGENT_NOUNS, GENERATION_TEMPLATES, TemplateId, render

DEFAULT_MAX_ITERS = 5

# a number counts only when it is not glued to a word, so "s0" is not a token
_NUMBER = re.compile(r"(?<![\w.])[-+]?\d+(?:\.\d+)?(?!\w)")


@dataclass(frozen=True)
class CheckScores:
    s0: int
    s1: int

    def __post_init__(self) -> None:
        if self.s0 not in (-1, 0, 1) or self.s1 not in (-1, 0, 1):
            raise ValueError(f"check scores must be in {{-1, 0, 1}}, got ({self.s0}, {self.s1})")


@dataclass(frozen=True)
class JudgeScores:
    semantic: int
    persona: int

    def __post_init__(self) -> None:
        if not (0 <= self.semantic <= 5 and 0 <= self.persona <= 5):
            raise ValueError(f"judge scores must be in [0, 5], got ({self.semantic}, {self.persona})")


def parse_two_ints(text: str, lo: int, hi: int) -> tuple[int, int]:
    """First two integer tokens within ``[lo, hi]``, in reading order.

    Decimal numbers are not integer tokens and are skipped, as are
    integers outside the range.
    """
    found = []
    for token in _NUMBER.findall(text):
        if "." in token:
            continue
        value = int(token)
        if lo <= value <= hi:
            found.append(value)
            if len(found) == 2:
                return found[0], found[1]
    raise ParseError(f"expected two integers in [{lo}, {hi}], got {text!r}")


def _parse_check(text: str) -> CheckScores:
    return CheckScores(*parse_two_ints(text, -1, 1))


def _parse_judge(text: str) -> JudgeScores:
    return JudgeScores(*parse_two_ints(text, 0, 5))


def _parse_text(text: str) -> str:
    out = text.strip()
    if not out:
        raise ParseError("empty response")
    return out


def _fields(q: Query, role: Role, intent: str = "", candidate: str = "") -> dict[str, str]:
    return {"query": q.text, "agent": AGENT_NOUNS[role], "intent": intent, "rewriting query": candidate}


def extract_intent(q: Query, backend: Backend | LLMClient) -> str:
    if q.role is not Role.ORIGINAL:
        raise DataError(f"intent extraction needs an original query, got role {q.role.label}")
    client = as_client(backend)
    fields = _fields(q, Role.ORIGINAL)
    prompt = render(TemplateId.A_INTENT, fields)
    return client.ask(TemplateId.A_INTENT, prompt, fields, _parse_text, q.qid, int(Role.ORIGINAL))


def persona_rewrite(
    intent: str,
    q: Query,
    role: Role,
    backend: Backend | LLMClient,
    template_id: TemplateId | str = TemplateId.B_REWRITE,
    previous: str = "",
) -> str:
    template_id = TemplateId(template_id)
    if role is Role.ORIGINAL:
        raise DataError("persona rewriting needs a persona role")
    if template_id not in GENERATION_TEMPLATES:
        raise DataError(f"{template_id.value} is not a generation template")
    client = as_client(backend)
    fields = _fields(q, role, intent, previous or q.text)
    prompt = render(template_id, fields)
    return client.ask(template_id, prompt, fields, _parse_text, q.qid, int(role))


def check_query(original: Query, candidate: str, role: Role, backend: Backend | LLMClient) -> CheckScores:
    if not candidate.strip():
        raise DataError("candidate rewrite is empty")
    client = as_client(backend)
    fields = _fields(original, role, candidate=candidate)
    prompt = render(TemplateId.C_CHECK, fields)
    return client.ask(TemplateId.C_CHECK, prompt, fields, _parse_check, original.qid, int(role))


def judge_quality(original: Query, rewritten: str, role: Role, backend: Backend | LLMClient) -> JudgeScores:
    if not rewritten.strip():
        raise DataError("rewritten query is empty")
    client = as_client(backend)
    fields = _fields(original, role, candidate=rewritten)
    prompt = render(TemplateId.JUDGE, fields)
    return client.ask(TemplateId.JUDGE, prompt, fields, _parse_judge, original.qid, int(role))


def accepted(scores: CheckScores, strict: bool = False) -> bool:
    threshold = 1 if strict else 0
    return scores.s0 >= threshold and scores.s1 >= threshold


def regeneration_template(scores: CheckScores, strict: bool = False) -> TemplateId:
    """Pick the fix-up prompt for a rejected candidate."""
    threshold = 1 if strict else 0
    semantic_bad = scores.s0 < threshold
    persona_bad = scores.s1 < threshold
    if semantic_bad and not persona_bad:
        return TemplateId.D_FIX_SEMANTIC
    if persona_bad and not semantic_bad:
        return TemplateId.E_FIX_PERSONA
    return TemplateId.F_FIX_BOTH


def rewrite_one(
    q: Query,
    intent: str,
    role: Role,
    backend: Backend | LLMClient,
    max_iters: int = DEFAULT_MAX_ITERS,
    strict: bool = False,
) -> RewriteRecord:
    """Run the generate/check loop for one (query, persona) pair."""
    if max_iters < 1:
        raise DataError("max_iters must be >= 1")
    client = as_client(backend)
    template = TemplateId.B_REWRITE
    candidate = persona_rewrite(intent, q, role, client, template)
    history: list[RewriteStep] = []
    while True:
        scores = check_query(q, candidate, role, client)
        history.append(RewriteStep(template.value, candidate, scores.s0, scores.s1))
        if accepted(scores, strict):
            status, text = RewriteStatus.ACCEPTED, candidate
            break
        if len(history) >= max_iters:
            status, text = RewriteStatus.FALLBACK_ORIGINAL, q.text
            break
        template = regeneration_template(scores, strict)
        candidate = persona_rewrite(intent, q, role, client, template, previous=candidate)
    return RewriteRecord(
        qid=q.qid,
        role=role,
        original_text=q.text,
        rewritten_text=text,
        intent_summary=intent,
        iterations=len(history),
        s0=scores.s0,
        s1=scores.s1,
        status=status,
        history=tuple(history),
    )


def rewrite_all(
    queries: QuerySet | Sequence[Query],
    roles: Sequence[Role],
    backend: Backend | LLMClient,
    max_iters: int = DEFAULT_MAX_ITERS,
    strict: bool = False,
    jobs: int = 1,
) -> list[RewriteRecord]:
    """Rewrite every original query for every persona.

    Pipelines for distinct (query, persona) pairs may run on up to
    ``jobs`` threads; the result is sorted by qid then role index.
    """
    roles = [Role.parse(r) for r in roles]
    if Role.ORIGINAL in roles:
        raise DataError("roles must not include the original role")
    if max_iters < 1:
        raise DataError("max_iters must be >= 1")
    originals = [q for q in queries if q.role is Role.ORIGINAL]
    client = as_client(backend)
    jobs = max(1, int(jobs))

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        intents = list(pool.map(lambda q: extract_intent(q, client), originals))
        tasks = [(q, intent, role) for q, intent in zip(originals, intents) for role in roles]
        records = list(
            pool.map(lambda t: rewrite_one(t[0], t[1], t[2], client, max_iters, strict), tasks)
        )
    return sorted(records, key=lambda r: (r.qid, int(r.role)))
