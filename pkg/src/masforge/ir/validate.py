"""Template validation.

Checks every template invariant and reports violations as findings
rather than exceptions, so hand-built templates can be inspected. The
parser reuses this to guarantee its output is always valid.
"""

from __future__ import annotations

from dataclasses import dataclass

from .arity import operator_arity
from .nodes import (
    Append,
    Call,
    Expr,
    Fallback,
    ForEachCall,
    Index,
    ListExpr,
    ListInit,
    Loop,
    Num,
    PriorOr,
    ProblemRef,
    Return,
    Statement,
    Str,
    Var,
    WorkflowTemplate,
)

DEFAULT_MAX_LOOP_BOUND = 16


@dataclass(frozen=True)
class Finding:
    """One violated invariant: code names the invariant, where locates it."""

    code: str
    message: str
    where: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> tuple[str, ...]:
        return tuple(f.code for f in self.findings)


class _Checker:
    def __init__(self, template: WorkflowTemplate, max_loop_bound: int):
        self.t = template
        self.max_loop_bound = max_loop_bound
        self.findings: list[Finding] = []
        self.role_map = {}
        self.types: dict[str, str] = {}  # var -> "text" | "list"
        self.produced: set[str] = set()

    def add(self, code: str, message: str, where: str) -> None:
        self.findings.append(Finding(code, message, where))

    def run(self) -> ValidationReport:
        self._check_roles()
        self._check_program()
        return ValidationReport(tuple(self.findings))

    def _check_roles(self) -> None:
        seen: set[str] = set()
        for role in self.t.roles:
            if role.id in seen:
                self.add("DuplicateRole", f"role id '{role.id}' is defined twice",
                         f"role {role.id}")
            seen.add(role.id)
            if not role.backbone:
                self.add("EmptyBackbone", f"role '{role.id}' has an empty backbone slot",
                         f"role {role.id}")
        self.role_map = {r.id: r for r in self.t.roles}

    # --- program ---

    def _check_program(self) -> None:
        program = self.t.program
        returns = [i for i, s in enumerate(program) if isinstance(s, Return)]
        if not returns:
            self.add("MissingReturn", "program has no return statement", "program")
        elif len(returns) > 1:
            self.add("MissingReturn", "program has more than one return statement",
                     f"statement {returns[1]}")
        elif returns[0] != len(program) - 1:
            self.add("ReturnNotLast", "return is not the last statement",
                     f"statement {returns[0]}")
        for i, stmt in enumerate(program):
            self._check_stmt(stmt, f"statement {i}", top_level=True)
        if returns:
            ret = program[returns[0]]
            assert isinstance(ret, Return)
            if not (_all_vars(ret.value) & self.produced):
                self.add(
                    "NoProducedOutput",
                    "return value is not produced by any program statement",
                    f"statement {returns[0]}",
                )

    def _check_stmt(self, stmt: Statement, where: str, top_level: bool) -> None:
        if isinstance(stmt, Call):
            self._check_call(stmt, where)
        elif isinstance(stmt, ListInit):
            self.types[stmt.out] = "list"
            self.produced.add(stmt.out)
        elif isinstance(stmt, Append):
            got = self._read_var(stmt.target, where)
            if got not in (None, "list"):
                self.add("ArgumentType", f"append target '{stmt.target}' is not a list",
                         where)
            self._expr_type(stmt.value, where)
        elif isinstance(stmt, Loop):
            if stmt.count < 1:
                self.add("UnboundedLoop",
                         f"loop count must be at least 1, got {stmt.count}", where)
            elif stmt.count > self.max_loop_bound:
                self.add(
                    "UnboundedLoop",
                    f"loop count {stmt.count} exceeds the configured bound "
                    f"{self.max_loop_bound}",
                    where,
                )
            if not stmt.body:
                self.add("UnboundedLoop", "loop has an empty body", where)
            for j, inner in enumerate(stmt.body):
                if isinstance(inner, Return):
                    self.add("MisplacedReturn", "return inside a loop", f"{where}.{j}")
                    continue
                self._check_stmt(inner, f"{where}.{j}", top_level=False)
        elif isinstance(stmt, ForEachCall):
            self._check_role_ref(stmt.role, where)
            got = self._read_var(stmt.source, where)
            if got not in (None, "list"):
                self.add("ArgumentType",
                         f"comprehension source '{stmt.source}' is not a list", where)
            self.types[stmt.out] = "list"
            self.produced.add(stmt.out)
        elif isinstance(stmt, Fallback):
            self._read_var(stmt.target, where)
            self._expr_type(stmt.value, where)
        elif isinstance(stmt, Return):
            self._expr_type(stmt.value, where)

    def _check_call(self, stmt: Call, where: str) -> None:
        role = self._check_role_ref(stmt.role, where)
        if role is not None:
            params = {p.name: p for p in operator_arity(role.kind)}
            seen = set()
            for name, expr in stmt.args:
                if name not in params:
                    self.add("UnknownParameter",
                             f"{role.kind.value} takes no argument '{name}'", where)
                    self._expr_type(expr, where)
                    continue
                seen.add(name)
                got = self._expr_type(expr, where)
                want = params[name].type
                if got is None:
                    continue
                if want == "text_list" and got != "list":
                    self.add("ArgumentType",
                             f"argument '{name}' must be a list of text", where)
                elif want == "text" and got != "text":
                    self.add("ArgumentType", f"argument '{name}' must be text", where)
                elif want == "int" and got != "int":
                    self.add("ArgumentType", f"argument '{name}' must be an integer",
                             where)
            for param in params.values():
                if param.required and param.name not in seen:
                    self.add("MissingParameter",
                             f"{role.kind.value} requires argument '{param.name}'", where)
        else:
            for _, expr in stmt.args:
                self._expr_type(expr, where)
        self.types[stmt.out] = "text"
        self.produced.add(stmt.out)

    def _check_role_ref(self, role_id: str, where: str):
        role = self.role_map.get(role_id)
        if role is None:
            self.add("DanglingRole",
                     f"program calls role '{role_id}' which is not defined", where)
        return role

    def _read_var(self, name: str, where: str) -> str | None:
        if name not in self.types:
            self.add("UnboundVariable", f"variable '{name}' is read before assignment",
                     where)
            return None
        return self.types[name]

    def _expr_type(self, expr: Expr, where: str) -> str | None:
        if isinstance(expr, Str):
            return "text"
        if isinstance(expr, Num):
            return "int"
        if isinstance(expr, ProblemRef):
            return "text"
        if isinstance(expr, Var):
            return self._read_var(expr.name, where)
        if isinstance(expr, Index):
            got = self._read_var(expr.name, where)
            if got not in (None, "list"):
                self.add("ArgumentType", f"'{expr.name}' is indexed but is not a list",
                         where)
            return "text"
        if isinstance(expr, ListExpr):
            for item in expr.items:
                self._expr_type(item, where)
            return "list"
        if isinstance(expr, PriorOr):
            # guarded name is read only when already bound; no check needed
            return self._expr_type(expr.fallback, where)
        return None


def _all_vars(expr: Expr) -> set[str]:
    """Every variable an expression may read, guarded names included."""
    if isinstance(expr, (Var, Index)):
        return {expr.name}
    if isinstance(expr, ListExpr):
        out: set[str] = set()
        for item in expr.items:
            out |= _all_vars(item)
        return out
    if isinstance(expr, PriorOr):
        return {expr.name} | _all_vars(expr.fallback)
    return set()


def validate_template(
    template: WorkflowTemplate, max_loop_bound: int = DEFAULT_MAX_LOOP_BOUND
) -> ValidationReport:
    """Check all template invariants; zero findings means all hold."""
    return _Checker(template, max_loop_bound).run()
