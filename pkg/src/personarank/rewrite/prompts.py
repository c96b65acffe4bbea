"""Prompt templates for intent extraction, persona rewriting, checking and judging."""

from __future__ import annotations

import enum
import re
from typing import Mapping

from ..errors import DataError
from ..types import Role


class TemplateId(str, enum.Enum):
    A_INTENT = "A_intent"
    B_REWRITE = "B_rewrite"
    C_CHECK = "C_check"
    D_FIX_SEMANTIC = "D_fix_semantic"
    E_FIX_PERSONA = "E_fix_persona"
    F_FIX_BOTH = "F_fix_both"
    JUDGE = "J_judge"


GENERATION_TEMPLATES = frozenset(
    {TemplateId.B_REWRITE, TemplateId.D_FIX_SEMANTIC, TemplateId.E_FIX_PERSONA, TemplateId.F_FIX_BOTH}
)

AGENT_NOUNS: dict[Role, str] = {
    Role.ORIGINAL: "a typical search engine user",
    Role.WOMAN: "a woman",
    Role.MAN: "a man",
    Role.STUDENT: "a student",
    Role.ELDER: "an elderly person",
}

_CONTEXT = (
    "\n\nOriginal query: {query}\n"
    "Intention: {intent}\n"
    "Previous rewrite: {rewriting query}\n"
    "Reply with the rewritten query only."
)

TEMPLATES: dict[TemplateId, str] = {
    TemplateId.A_INTENT: (
        "The search query is {query}. Please analyze and determine the actual intention "
        "or meaning that the person is trying to convey through this search query."
    ),
    TemplateId.B_REWRITE: (
        "Assuming you are {agent}, what changes might you make when rewriting the query? "
        "Please rewrite the query to align it with your role."
        "\n\nOriginal query: {query}\n"
        "Intention: {intent}\n"
        "Reply with the rewritten query only."
    ),
    TemplateId.C_CHECK: (
        "The original query is: {query}. The rephrased query is: {rewriting query}. "
        "Evaluate the following:1. Are these two queries describing the same information? "
        "2. Does the modified query align with the query posed by {agent}? "
        "Assign judgment scores of -1, 0, or 1. A score of -1 implies no match, "
        "0 suggests an approximate match, and 1 indicates an exact match."
        "\n\nReply with the two scores in order, separated by a space."
    ),
    TemplateId.D_FIX_SEMANTIC: (
        "Assuming you are {agent}, please rephrase the query in accordance with your role "
        "while preserving the original meaning of the question." + _CONTEXT
    ),
    TemplateId.E_FIX_PERSONA: (
        "Assuming you are {agent}, please rephrase the query according to your role and "
        "rewrite it more in line with the character's attributes." + _CONTEXT
    ),
    TemplateId.F_FIX_BOTH: (
        "Assuming you are {agent}, please rephrase the question consistent with your role, "
        "maintaining the essence of the original query and aligning it with the "
        "character's attributes." + _CONTEXT
    ),
    TemplateId.JUDGE: (
        "The original query is: {query}. The rewritten query is: {rewriting query}, "
        "written as if by {agent}. Rate two things on a 0 to 5 scale, 0 being the poorest "
        "and 5 the best: first, how well the rewritten query keeps the meaning of the "
        "original; second, how well it matches the way {agent} would search."
        "\n\nReply with the two integer ratings in order, separated by a space."
    ),
}

_PLACEHOLDER = re.compile(r"\{([a-z][a-z ]*)\}")


def placeholders(template: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template))


def render(template_id: TemplateId | str, fields: Mapping[str, str], templates=None) -> str:
    """Substitute every placeholder; a missing field is an error, never left in the prompt."""
    template = (templates or TEMPLATES)[TemplateId(template_id)]

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in fields:
            raise DataError(f"template {TemplateId(template_id).value} needs field {name!r}")
        return str(fields[name])

    return _PLACEHOLDER.sub(sub, template)
