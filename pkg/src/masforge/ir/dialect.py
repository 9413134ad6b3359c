"""Re-emission of templates as dialect source.

The workflow-repair loop talks to meta-agents in the code-like dialect,
so templates must round-trip back into it: ``parse(to_dialect(t))``
equals ``t`` for every valid template. Emission is deterministic —
fixed indentation, named call arguments, double-quoted strings.
"""

from __future__ import annotations

from .nodes import (
    Append,
    Call,
    Expr,
    Fallback,
    ForEachCall,
    Index,
    InstantiatedWorkflow,
    ListExpr,
    ListInit,
    Loop,
    Num,
    OperatorKind,
    PriorOr,
    ProblemRef,
    Return,
    Statement,
    Str,
    Var,
    WorkflowTemplate,
)

_IND = "    "


def _quote(value: str) -> str:
    out = value.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")
    return f'"{out}"'


def _emit_expr(expr: Expr) -> str:
    if isinstance(expr, Str):
        return _quote(expr.value)
    if isinstance(expr, Num):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, ProblemRef):
        return "self.problem"
    if isinstance(expr, ListExpr):
        return "[" + ", ".join(_emit_expr(e) for e in expr.items) + "]"
    if isinstance(expr, Index):
        return f"{expr.name}[{expr.index}]"
    if isinstance(expr, PriorOr):
        return f"{expr.name} if '{expr.name}' in locals() else {_emit_expr(expr.fallback)}"
    raise TypeError(f"unemittable expression {expr!r}")


def _emit_stmt(stmt: Statement, depth: int, out: list[str]) -> None:
    pad = _IND * depth
    if isinstance(stmt, Call):
        args = ", ".join(f"{name}={_emit_expr(expr)}" for name, expr in stmt.args)
        out.append(f"{pad}{stmt.out} = await self.{stmt.role}({args})")
    elif isinstance(stmt, ListInit):
        items = ", ".join(_quote(s) for s in stmt.items)
        out.append(f"{pad}{stmt.out} = [{items}]")
    elif isinstance(stmt, Append):
        out.append(f"{pad}{stmt.target}.append({_emit_expr(stmt.value)})")
    elif isinstance(stmt, Loop):
        out.append(f"{pad}for _ in range({stmt.count}):")
        for inner in stmt.body:
            _emit_stmt(inner, depth + 1, out)
    elif isinstance(stmt, ForEachCall):
        out.append(
            f"{pad}{stmt.out} = [await self.{stmt.role}(item) for item in {stmt.source}]"
        )
    elif isinstance(stmt, Fallback):
        out.append(f"{pad}if not {stmt.target} or not {stmt.target}.strip():")
        out.append(f"{pad}{_IND}{stmt.target} = {_emit_expr(stmt.value)}")
    elif isinstance(stmt, Return):
        out.append(f"{pad}return {_emit_expr(stmt.value)}")
    else:
        raise TypeError(f"unemittable statement {stmt!r}")


def to_dialect(template: WorkflowTemplate) -> str:
    """Emit deterministic dialect source that re-parses to this template."""
    lines = ["class Workflow:", f"{_IND}def __init__(self, problem) -> None:",
             f"{_IND * 2}self.problem = problem"]
    for role in template.roles:
        if role.kind is OperatorKind.TOOL:
            ctor = f"operator.Tool({_quote(role.backbone)})"
        else:
            extra = f", instruction={_quote(role.instruction)}" if role.instruction else ""
            ctor = f"operator.{role.kind.value}({_quote(role.backbone)}, self.problem{extra})"
        lines.append(f"{_IND * 2}self.{role.id} = {ctor}")
    lines.append("")
    lines.append(f"{_IND}async def run_workflow(self):")
    for stmt in template.program:
        _emit_stmt(stmt, 2, lines)
    return "\n".join(lines) + "\n"


def workflow_to_dialect(workflow: InstantiatedWorkflow) -> str:
    """Dialect source of an instantiated workflow, slots resolved."""
    return to_dialect(workflow.resolve())
