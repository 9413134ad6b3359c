"""Call-site parameter schemas for each operator kind.

The parser uses these to map positional arguments onto named parameters
and to type-check workflow programs; the operator runtime uses them to
check inputs before prompting.
"""

from __future__ import annotations

from dataclasses import dataclass

from .nodes import OperatorKind


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type: str  # "text" | "text_list" | "int"
    required: bool = True


_ARITY: dict[OperatorKind, tuple[ParamSpec, ...]] = {
    OperatorKind.CUSTOM: (ParamSpec("instruction", "text"),),
    OperatorKind.ANSWER_GENERATE: (ParamSpec("context", "text", required=False),),
    OperatorKind.CUSTOM_CODE_GENERATE: (ParamSpec("instruction", "text"),),
    OperatorKind.PROGRAMMER: (ParamSpec("analysis", "text"),),
    OperatorKind.REVIEW: (ParamSpec("pre_solution", "text"),),
    OperatorKind.SC_ENSEMBLE: (ParamSpec("solutions", "text_list"),),
    OperatorKind.TEST: (ParamSpec("solution", "text"),),
    OperatorKind.SEARCH: (
        ParamSpec("query", "text"),
        ParamSpec("top_k", "int", required=False),
    ),
    OperatorKind.BROWSER: (ParamSpec("docid", "text"),),
    OperatorKind.TOOL: (ParamSpec("input", "text"),),
}


def operator_arity(kind: OperatorKind) -> tuple[ParamSpec, ...]:
    """Named-parameter schema for a catalog operator kind."""
    return _ARITY[kind]
