"""Multi-agent tumour-board deliberation with grounded citations, SPEAR scoring and audit."""

from .case_schema import StructuredCase, structure_case
from .deliberation import DeliberationConfig, Mode, replay_transcript, run_case
from .evidence_bank import CorpusSnapshot, TokenHashEmbedder, freeze_snapshot, search
from .role_scoping import Role, build_role_package

__all__ = [
    "CorpusSnapshot",
    "DeliberationConfig",
    "Mode",
    "Role",
    "StructuredCase",
    "TokenHashEmbedder",
    "build_role_package",
    "freeze_snapshot",
    "replay_transcript",
    "run_case",
    "search",
    "structure_case",
]

__version__ = "0.1.0"
