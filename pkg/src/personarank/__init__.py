"""Persona query rewriting and a robust MMoE ranking head."""

from .errors import BackendError, DataError, ParseError, PersonaRankError, TrainingError
from .types import (
    ALL_ROLES,
    PERSONAS,
    Document,
    PairEmbedding,
    Qrels,
    Query,
    QuerySet,
    RankedRun,
    RewriteRecord,
    RewriteStatus,
    Role,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_ROLES",
    "BackendError",
    "DataError",
    "Document",
    "PERSONAS",
    "PairEmbedding",
    "ParseError",
    "PersonaRankError",
    "Qrels",
    "Query",
    "QuerySet",
    "RankedRun",
    "RewriteRecord",
    "RewriteStatus",
    "Role",
    "TrainingError",
    "__version__",
]
