"""Canonical template serialization (.mas2t files).

The canonical form is deterministic JSON: sorted keys, two-space indent,
one template per file. Two structurally equal templates serialize to
identical bytes regardless of how they were built, and loading a
serialized template reproduces an equal template. The code-like dialect
is a separate surface (see dialect.py) used only for meta-agent I/O.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from ..errors import MasforgeError
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
    RoleSpec,
    Statement,
    Str,
    Var,
    WorkflowTemplate,
)

CANONICAL_SCHEMA = "mas2t/1"
TEMPLATE_SUFFIX = ".mas2t"


class CanonicalFormatError(MasforgeError):
    """The text is not a valid canonical template document."""


def _encode_expr(expr: Expr) -> dict:
    if isinstance(expr, Str):
        return {"t": "str", "v": expr.value}
    if isinstance(expr, Num):
        return {"t": "num", "v": expr.value}
    if isinstance(expr, Var):
        return {"t": "var", "name": expr.name}
    if isinstance(expr, ProblemRef):
        return {"t": "problem"}
    if isinstance(expr, ListExpr):
        return {"t": "list", "items": [_encode_expr(e) for e in expr.items]}
    if isinstance(expr, Index):
        return {"t": "index", "name": expr.name, "i": expr.index}
    if isinstance(expr, PriorOr):
        return {"t": "prior_or", "name": expr.name,
                "fallback": _encode_expr(expr.fallback)}
    raise TypeError(f"unencodable expression {expr!r}")


def _decode_expr(obj: dict) -> Expr:
    tag = obj.get("t")
    if tag == "str":
        return Str(obj["v"])
    if tag == "num":
        return Num(int(obj["v"]))
    if tag == "var":
        return Var(obj["name"])
    if tag == "problem":
        return ProblemRef()
    if tag == "list":
        return ListExpr(tuple(_decode_expr(e) for e in obj["items"]))
    if tag == "index":
        return Index(obj["name"], int(obj["i"]))
    if tag == "prior_or":
        return PriorOr(obj["name"], _decode_expr(obj["fallback"]))
    raise CanonicalFormatError(f"unknown expression tag {tag!r}")


def _encode_stmt(stmt: Statement) -> dict:
    if isinstance(stmt, Call):
        return {
            "s": "call",
            "out": stmt.out,
            "role": stmt.role,
            "args": [[name, _encode_expr(expr)] for name, expr in stmt.args],
        }
    if isinstance(stmt, ListInit):
        return {"s": "list_init", "out": stmt.out, "items": list(stmt.items)}
    if isinstance(stmt, Append):
        return {"s": "append", "target": stmt.target, "value": _encode_expr(stmt.value)}
    if isinstance(stmt, Loop):
        return {"s": "loop", "count": stmt.count,
                "body": [_encode_stmt(s) for s in stmt.body]}
    if isinstance(stmt, ForEachCall):
        return {"s": "foreach", "out": stmt.out, "role": stmt.role,
                "param": stmt.param, "source": stmt.source}
    if isinstance(stmt, Fallback):
        return {"s": "fallback", "target": stmt.target,
                "value": _encode_expr(stmt.value)}
    if isinstance(stmt, Return):
        return {"s": "return", "value": _encode_expr(stmt.value)}
    raise TypeError(f"unencodable statement {stmt!r}")


def _decode_stmt(obj: dict) -> Statement:
    tag = obj.get("s")
    if tag == "call":
        args = tuple((name, _decode_expr(e)) for name, e in obj["args"])
        return Call(obj["out"], obj["role"], args)
    if tag == "list_init":
        return ListInit(obj["out"], tuple(obj.get("items", ())))
    if tag == "append":
        return Append(obj["target"], _decode_expr(obj["value"]))
    if tag == "loop":
        return Loop(int(obj["count"]), tuple(_decode_stmt(s) for s in obj["body"]))
    if tag == "foreach":
        return ForEachCall(obj["out"], obj["role"], obj["param"], obj["source"])
    if tag == "fallback":
        return Fallback(obj["target"], _decode_expr(obj["value"]))
    if tag == "return":
        return Return(_decode_expr(obj["value"]))
    raise CanonicalFormatError(f"unknown statement tag {tag!r}")


def template_to_obj(template: WorkflowTemplate) -> dict:
    return {
        "schema": CANONICAL_SCHEMA,
        "roles": [
            {
                "id": r.id,
                "kind": r.kind.value,
                "backbone": r.backbone,
                "instruction": r.instruction,
            }
            for r in template.roles
        ],
        "program": [_encode_stmt(s) for s in template.program],
        "tools": sorted(template.required_tools),
    }


def obj_to_template(obj: dict) -> WorkflowTemplate:
    if not isinstance(obj, dict):
        raise CanonicalFormatError("canonical template must be a JSON object")
    schema = obj.get("schema")
    if schema != CANONICAL_SCHEMA:
        raise CanonicalFormatError(
            f"unsupported template schema {schema!r} (expected {CANONICAL_SCHEMA!r})"
        )
    try:
        roles = tuple(
            RoleSpec(
                r["id"],
                OperatorKind.from_name(r["kind"]),
                r["backbone"],
                r.get("instruction", ""),
            )
            for r in obj["roles"]
        )
        program = tuple(_decode_stmt(s) for s in obj["program"])
        tools = frozenset(obj.get("tools", ()))
    except (KeyError, TypeError) as exc:
        raise CanonicalFormatError(f"malformed canonical template: {exc}") from exc
    return WorkflowTemplate(roles, program, tools)


def serialize_template(template: WorkflowTemplate) -> str:
    """Deterministic canonical text; loading it reproduces the template."""
    return json.dumps(template_to_obj(template), sort_keys=True, indent=2) + "\n"


def load_template(text: str) -> WorkflowTemplate:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CanonicalFormatError(f"not valid JSON: {exc}") from exc
    return obj_to_template(obj)


def template_digest(template: WorkflowTemplate) -> str:
    """SHA-256 of the canonical form; stable across runs and processes."""
    return hashlib.sha256(serialize_template(template).encode("utf-8")).hexdigest()


def write_template(template: WorkflowTemplate, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(serialize_template(template), encoding="utf-8")
    return path


def read_template(path: str | Path) -> WorkflowTemplate:
    return load_template(Path(path).read_text(encoding="utf-8"))


def serialize_workflow(workflow: InstantiatedWorkflow) -> str:
    """Canonical text of an instantiated workflow (slots resolved)."""
    return serialize_template(workflow.resolve())
