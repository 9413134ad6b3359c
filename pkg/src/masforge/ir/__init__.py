"""Workflow intermediate representation: types, parser, validator, formats."""

from .arity import ParamSpec, operator_arity
from .canonical import (
    CANONICAL_SCHEMA,
    TEMPLATE_SUFFIX,
    CanonicalFormatError,
    load_template,
    read_template,
    serialize_template,
    serialize_workflow,
    template_digest,
    write_template,
)
from .dialect import to_dialect, workflow_to_dialect
from .nodes import (
    PLACEHOLDER,
    Append,
    BackboneAssignment,
    Call,
    ControlProgram,
    Expr,
    Fallback,
    ForEachCall,
    Index,
    InstantiatedWorkflow,
    ListExpr,
    ListInit,
    Loop,
    MissingAssignment,
    Num,
    OperatorKind,
    PriorOr,
    ProblemRef,
    Return,
    RoleSpec,
    Statement,
    Str,
    Var,
    WorkflowTemplate,
    expr_vars,
    iter_statements,
    substitute_backbones,
)
from .parser import (
    NoGraphBlock,
    ParseError,
    UnboundedLoop,
    UnboundVariable,
    UnknownOperatorKind,
    extract_graph_block,
    parse_template,
)
from .validate import Finding, ValidationReport, validate_template

__all__ = [
    "PLACEHOLDER",
    "CANONICAL_SCHEMA",
    "TEMPLATE_SUFFIX",
    "Append",
    "BackboneAssignment",
    "Call",
    "CanonicalFormatError",
    "ControlProgram",
    "Expr",
    "Fallback",
    "Finding",
    "ForEachCall",
    "Index",
    "InstantiatedWorkflow",
    "ListExpr",
    "ListInit",
    "Loop",
    "MissingAssignment",
    "NoGraphBlock",
    "Num",
    "OperatorKind",
    "ParamSpec",
    "ParseError",
    "PriorOr",
    "ProblemRef",
    "Return",
    "RoleSpec",
    "Statement",
    "Str",
    "UnboundVariable",
    "UnboundedLoop",
    "UnknownOperatorKind",
    "ValidationReport",
    "Var",
    "WorkflowTemplate",
    "expr_vars",
    "extract_graph_block",
    "iter_statements",
    "load_template",
    "operator_arity",
    "parse_template",
    "read_template",
    "serialize_template",
    "serialize_workflow",
    "substitute_backbones",
    "template_digest",
    "to_dialect",
    "validate_template",
    "workflow_to_dialect",
    "write_template",
]
