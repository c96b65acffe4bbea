from .backends import (
    Backend,
    BackendRequest,
    BackendResponse,
    HttpBackend,
    LLMClient,
    MockBackend,
    ScriptedBackend,
    Transcript,
)
from .pipeline import (
    CheckScores,
    JudgeScores,
    check_query,
    extract_intent,
    judge_quality,
    parse_two_ints,
    persona_rewrite,
    regeneration_template,
    rewrite_all,
    rewrite_one,
)
from .prompts import TEMPLATES, TemplateId, render

__all__ = [
    "Backend",
    "BackendRequest",
    "BackendResponse",
    "CheckScores",
    "HttpBackend",
    "JudgeScores",
    "LLMClient",
    "MockBackend",
    "ScriptedBackend",
    "TEMPLATES",
    "TemplateId",
    "Transcript",
    "check_query",
    "extract_intent",
    "judge_quality",
    "parse_two_ints",
    "persona_rewrite",
    "regeneration_template",
    "render",
    "rewrite_all",
    "rewrite_one",
]
