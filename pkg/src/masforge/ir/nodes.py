"""Core data model for workflow templates.

A workflow is a team plan: an ordered set of roles (each an operator of a
closed catalog, bound to an LLM backbone slot) plus a small straight-line
program that wires role outputs into role inputs and returns one final
value. Templates are immutable; parsing, validation, and serialization all
operate on the structures defined here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..errors import MasforgeError, UnknownBackbone

PLACEHOLDER = "llm_symbol"

PROBLEM_VAR = "problem"


class OperatorKind(str, Enum):
    """Closed catalog of operators a workflow role may use."""

    CUSTOM = "Custom"
    ANSWER_GENERATE = "AnswerGenerate"
    CUSTOM_CODE_GENERATE = "CustomCodeGenerate"
    PROGRAMMER = "Programmer"
    REVIEW = "Review"
    SC_ENSEMBLE = "ScEnsemble"
    TEST = "Test"
    SEARCH = "Search"
    BROWSER = "Browser"
    TOOL = "Tool"

    @classmethod
    def from_name(cls, name: str) -> "OperatorKind":
        # "Reviewer" appears as a synonym of Review in generator output.
        if name == "Reviewer":
            name = "Review"
        for kind in cls:
            if kind.value == name:
                return kind
        raise KeyError(name)


# --- Expressions -----------------------------------------------------------


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class ProblemRef:
    """Reference to the task query (``self.problem``)."""


@dataclass(frozen=True)
class ListExpr:
    items: tuple["Expr", ...]


@dataclass(frozen=True)
class Index:
    """Constant indexing into a list variable, e.g. ``xs[0]``."""

    name: str
    index: int


@dataclass(frozen=True)
class PriorOr:
    """Use a variable's existing binding if present, else a fallback.

    Written ``x if 'x' in locals() else y`` in the dialect; resolved at
    run time because the binding may appear only on later loop passes.
    """

    name: str
    fallback: "Expr"


Expr = Str | Num | Var | ProblemRef | ListExpr | Index | PriorOr


# --- Statements ------------------------------------------------------------


@dataclass(frozen=True)
class Call:
    """``out = await self.<role>(name=expr, ...)`` with normalized arg names."""

    out: str
    role: str
    args: tuple[tuple[str, Expr], ...]


@dataclass(frozen=True)
class ListInit:
    """``out = []`` or ``out = ["a", "b"]`` (string elements only)."""

    out: str
    items: tuple[str, ...] = ()


@dataclass(frozen=True)
class Append:
    target: str
    value: Expr


@dataclass(frozen=True)
class Loop:
    """``for _ in range(count):`` over a fixed, positive iteration count."""

    count: int
    body: tuple["Statement", ...]


@dataclass(frozen=True)
class ForEachCall:
    """``out = [await self.<role>(item) for item in source]``."""

    out: str
    role: str
    param: str
    source: str


@dataclass(frozen=True)
class Fallback:
    """``if not x or not x.strip(): x = expr`` — replace empty output."""

    target: str
    value: Expr


@dataclass(frozen=True)
class Return:
    value: Expr


Statement = Call | ListInit | Append | Loop | ForEachCall | Fallback | Return

ControlProgram = tuple[Statement, ...]


# --- Roles and templates ----------------------------------------------------


@dataclass(frozen=True)
class RoleSpec:
    """One member of the team: an operator bound to a backbone slot.

    ``backbone`` holds the placeholder token in an uninstantiated
    template, a concrete backbone id after instantiation, or — for Tool
    roles — the fixed tool name (Tool roles never take a backbone).
    """

    id: str
    kind: OperatorKind
    backbone: str
    instruction: str = ""

    @property
    def needs_backbone(self) -> bool:
        return self.kind is not OperatorKind.TOOL

    @property
    def is_slot(self) -> bool:
        return self.needs_backbone and self.backbone == PLACEHOLDER


@dataclass(frozen=True)
class WorkflowTemplate:
    roles: tuple[RoleSpec, ...]
    program: ControlProgram
    required_tools: frozenset[str] = frozenset()
    source_text: str | None = field(default=None, compare=False)

    def role_map(self) -> dict[str, RoleSpec]:
        return {r.id: r for r in self.roles}

    def slot_roles(self) -> tuple[RoleSpec, ...]:
        """Roles that require a backbone assignment."""
        return tuple(r for r in self.roles if r.needs_backbone)

    def with_backbones(self, mapping: dict[str, str]) -> "WorkflowTemplate":
        """Copy with each backbone-bearing role's slot replaced per mapping."""
        roles = tuple(
            RoleSpec(r.id, r.kind, mapping.get(r.id, r.backbone), r.instruction)
            if r.needs_backbone
            else r
            for r in self.roles
        )
        return WorkflowTemplate(roles, self.program, self.required_tools)


@dataclass(frozen=True)
class BackboneAssignment:
    """Total map from backbone-bearing role ids to backbone ids."""

    mapping: tuple[tuple[str, str], ...]

    @classmethod
    def of(cls, mapping: dict[str, str]) -> "BackboneAssignment":
        return cls(tuple(sorted(mapping.items())))

    def as_dict(self) -> dict[str, str]:
        return dict(self.mapping)

    def get(self, role_id: str) -> str | None:
        return self.as_dict().get(role_id)


@dataclass(frozen=True)
class InstantiatedWorkflow:
    template: WorkflowTemplate
    assignment: BackboneAssignment

    def resolve(self) -> WorkflowTemplate:
        """Template with every slot filled from the assignment."""
        return self.template.with_backbones(self.assignment.as_dict())


class MissingAssignment(MasforgeError):
    """The assignment does not cover a backbone-bearing role."""

    def __init__(self, role_id: str):
        super().__init__(f"no backbone assigned to role {role_id!r}")
        self.role_id = role_id


def substitute_backbones(
    template: WorkflowTemplate,
    assignment: BackboneAssignment,
    known_backbones: "set[str] | frozenset[str] | None" = None,
) -> InstantiatedWorkflow:
    """Fill every backbone slot of the template from the assignment.

    The assignment must cover exactly the backbone-bearing roles; when a
    set of known backbone ids is given, every assigned id must be in it.
    Only slot values change — the emitted canonical form differs from
    the template's at slot positions and nowhere else.
    """
    mapping = assignment.as_dict()
    slot_ids = {r.id for r in template.slot_roles()}
    for role_id in slot_ids:
        if role_id not in mapping:
            raise MissingAssignment(role_id)
    extras = set(mapping) - slot_ids
    if extras:
        raise MasforgeError(
            f"assignment names roles not in the template: {sorted(extras)}"
        )
    if known_backbones is not None:
        for backbone in mapping.values():
            if backbone not in known_backbones:
                raise UnknownBackbone(backbone)
    return InstantiatedWorkflow(template, assignment)


def iter_statements(program: ControlProgram):
    """Yield statements depth-first, loop bodies included."""
    for stmt in program:
        yield stmt
        if isinstance(stmt, Loop):
            yield from iter_statements(stmt.body)


def expr_vars(expr: Expr) -> tuple[str, ...]:
    """Variable names an expression reads unconditionally.

    PriorOr's guarded name is excluded: it is read only when already
    bound, so it never constitutes an unbound read.
    """
    if isinstance(expr, Var):
        return (expr.name,)
    if isinstance(expr, Index):
        return (expr.name,)
    if isinstance(expr, ListExpr):
        out: list[str] = []
        for item in expr.items:
            out.extend(expr_vars(item))
        return tuple(out)
    if isinstance(expr, PriorOr):
        return expr_vars(expr.fallback)
    return ()
