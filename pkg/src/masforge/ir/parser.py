"""Parser for the workflow dialect.

Meta-agents emit workflows as a restricted, code-like text enclosed in
``<graph>`` tags. The accepted shape (full EBNF in docs/dialect.md):

    class Workflow:
        def __init__(self, problem) -> None:
            self.problem = problem
            self.<role> = operator.<Kind>("<backbone-or-placeholder>", ...)

        async def run_workflow(self):
            out = await self.<role>(name=expr, ...)
            xs = []                      # or ["a", "b"] (string elements)
            xs.append(expr)
            for _ in range(3):           # fixed positive bound
                ...
            ys = [await self.<role>(item) for item in xs]
            if not out or not out.strip():
                out = expr               # empty-output fallback
            return expr

Anything else (while loops, sets, f-strings, aliasing, arithmetic) is
rejected with a diagnostic naming the construct. Positional call
arguments are normalized onto the operator's named-parameter schema, so
structurally equal programs parse identically regardless of arg style.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import MasforgeError
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

GRAPH_OPEN = "<graph>"
GRAPH_CLOSE = "</graph>"


class NoGraphBlock(MasforgeError):
    """The completion contains neither graph tags nor a class header."""


class ParseError(MasforgeError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.message = message
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {col}" if col is not None else "") + ")"
        super().__init__(f"{message}{where}")


class UnknownOperatorKind(ParseError):
    pass


class UnboundVariable(ParseError):
    pass


class UnboundedLoop(ParseError):
    pass


def extract_graph_block(text: str) -> str:
    """Pull the workflow source out of a meta-agent completion.

    Returns the trimmed content between the first ``<graph>`` tag and its
    closing tag. Completions without tags are accepted when they start
    with a class header (covers prompts that pre-open the tag; a stray
    trailing close tag is dropped).
    """
    start = text.find(GRAPH_OPEN)
    if start >= 0:
        inner_start = start + len(GRAPH_OPEN)
        end = text.find(GRAPH_CLOSE, inner_start)
        inner = text[inner_start:end] if end >= 0 else text[inner_start:]
        return inner.strip()
    stripped = text.strip()
    if stripped.startswith("class "):
        end = stripped.find(GRAPH_CLOSE)
        if end >= 0:
            stripped = stripped[:end]
        return stripped.strip()
    raise NoGraphBlock("no <graph> block and no class header in completion")


# --- Scanner ----------------------------------------------------------------

_TWO_CHAR_OPS = ("->", "==", "!=", "<=", ">=", "**", "//", "+=", "-=")
_ONE_CHAR_OPS = set("()[]{}.,:=+-*/%<>|&@;")
_OPEN = {"(": ")", "[": "]", "{": "}"}
_CLOSE = set(")]}")
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", "'": "'", '"': '"', "0": "\0"}


@dataclass(frozen=True)
class Tok:
    kind: str  # "name" | "str" | "fstr" | "int" | "op"
    text: str
    line: int
    col: int


@dataclass
class _LogicalLine:
    indent: int
    toks: list[Tok]
    line: int


@dataclass
class _ScanState:
    depth: int = 0
    triple: dict | None = None
    cur: list[Tok] = field(default_factory=list)
    cur_indent: int = 0
    cur_line: int = 0


def _scan(source: str) -> list[_LogicalLine]:
    lines: list[_LogicalLine] = []
    st = _ScanState()

    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.expandtabs(4)
        pos = 0
        if st.triple is None:
            stripped = text.strip()
            if not stripped:
                continue
            indent = len(text) - len(text.lstrip(" "))
            if st.depth == 0 and not st.cur:
                st.cur_indent, st.cur_line = indent, lineno
            pos = indent
        _scan_segment(text, pos, lineno, st)
        if st.triple is None and st.depth == 0 and st.cur:
            lines.append(_LogicalLine(st.cur_indent, st.cur, st.cur_line))
            st.cur = []
    if st.triple is not None:
        raise ParseError("unterminated triple-quoted string", st.triple["line"])
    if st.depth > 0 or st.cur:
        raise ParseError("unexpected end of source inside a bracketed expression",
                         st.cur_line or None)
    return lines


def _scan_segment(text: str, pos: int, lineno: int, st: _ScanState) -> None:
    n = len(text)
    while True:
        if st.triple is not None:
            quote = st.triple["quote"]
            end = text.find(quote, pos)
            if end < 0:
                st.triple["buf"].append(text[pos:])
                return
            st.triple["buf"].append(text[pos:end])
            joined = "\n".join(st.triple["buf"])
            st.cur.append(Tok("str", joined, st.triple["line"], st.triple["col"]))
            st.triple = None
            pos = end + 3
            continue
        while pos < n and text[pos] in " \t":
            pos += 1
        if pos >= n:
            return
        ch = text[pos]
        if ch == "#":
            return
        if ch in "\"'":
            pos = _scan_string(text, pos, lineno, st, prefix="")
            continue
        if ch.isdigit():
            start = pos
            while pos < n and text[pos].isdigit():
                pos += 1
            if pos < n and text[pos] == "." and pos + 1 < n and text[pos + 1].isdigit():
                raise ParseError("unsupported construct: float literal", lineno, start + 1)
            st.cur.append(Tok("int", text[start:pos], lineno, start + 1))
            continue
        if ch.isalpha() or ch == "_":
            start = pos
            while pos < n and (text[pos].isalnum() or text[pos] == "_"):
                pos += 1
            name = text[start:pos]
            if pos < n and text[pos] in "\"'" and name.lower() in ("f", "rf", "fr", "b", "rb"):
                pos = _scan_string(text, pos, lineno, st, prefix=name)
                continue
            st.cur.append(Tok("name", name, lineno, start + 1))
            continue
        two = text[pos:pos + 2]
        if two in _TWO_CHAR_OPS:
            st.cur.append(Tok("op", two, lineno, pos + 1))
            pos += 2
            continue
        if ch in _ONE_CHAR_OPS:
            if ch in _OPEN:
                st.depth += 1
            elif ch in _CLOSE:
                if st.depth == 0:
                    raise ParseError(f"unbalanced '{ch}'", lineno, pos + 1)
                st.depth -= 1
            st.cur.append(Tok("op", ch, lineno, pos + 1))
            pos += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", lineno, pos + 1)


def _scan_string(text: str, pos: int, lineno: int, st: _ScanState, prefix: str) -> int:
    quote = text[pos]
    kind = "fstr" if "f" in prefix.lower() else "str"
    col = pos + 1 - len(prefix)
    if text[pos:pos + 3] == quote * 3:
        end = text.find(quote * 3, pos + 3)
        if end < 0:
            st.triple = {"quote": quote * 3, "line": lineno, "col": col,
                         "buf": [text[pos + 3:]]}
            return len(text)
        st.cur.append(Tok(kind, text[pos + 3:end], lineno, col))
        return end + 3
    out: list[str] = []
    i = pos + 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\" and i + 1 < n:
            out.append(_ESCAPES.get(text[i + 1], "\\" + text[i + 1]))
            i += 2
            continue
        if ch == quote:
            st.cur.append(Tok(kind, "".join(out), lineno, col))
            return i + 1
        out.append(ch)
        i += 1
    raise ParseError("unterminated string literal", lineno, col)


# --- Token reader -----------------------------------------------------------


class _Reader:
    def __init__(self, ll: _LogicalLine):
        self.toks = ll.toks
        self.i = 0
        self.line = ll.line

    def peek(self, k: int = 0) -> Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def next(self) -> Tok:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of statement", self.line)
        self.i += 1
        return tok

    def done(self) -> bool:
        return self.i >= len(self.toks)

    def at(self, kind: str, text: str | None = None, k: int = 0) -> bool:
        tok = self.peek(k)
        return tok is not None and tok.kind == kind and (text is None or tok.text == text)

    def expect(self, kind: str, text: str | None = None) -> Tok:
        tok = self.peek()
        if tok is None or tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else f"a {kind}"
            got = f"'{tok.text}'" if tok else "end of statement"
            line = tok.line if tok else self.line
            col = tok.col if tok else None
            raise ParseError(f"expected '{want}', got {got}" if text is not None
                             else f"expected {want}, got {got}", line, col)
        self.i += 1
        return tok

    def fail(self, message: str) -> None:
        tok = self.peek()
        raise ParseError(message, tok.line if tok else self.line, tok.col if tok else None)


# --- Parser -----------------------------------------------------------------

_CTOR_IGNORED_KWARGS = {"num_candidates": "int", "output_type": "str"}


class _TemplateParser:
    def __init__(self, lines: list[_LogicalLine], max_loop_bound: int):
        self.lines = lines
        self.idx = 0
        self.max_loop_bound = max_loop_bound
        self.role_map: dict[str, RoleSpec] = {}

    # line-level navigation

    def _peek_line(self) -> _LogicalLine | None:
        return self.lines[self.idx] if self.idx < len(self.lines) else None

    def _next_line(self) -> _LogicalLine:
        ll = self._peek_line()
        if ll is None:
            raise ParseError("unexpected end of source", self.lines[-1].line if self.lines else None)
        self.idx += 1
        return ll

    def parse(self) -> tuple[tuple[RoleSpec, ...], tuple[Statement, ...]]:
        header = _Reader(self._next_line())
        header.expect("name", "class")
        header.expect("name")
        header.expect("op", ":")
        if not header.done():
            header.fail("unexpected tokens after class header")

        roles = self._parse_init()
        self.role_map = {r.id: r for r in roles}
        program = self._parse_run()
        trailing = self._peek_line()
        if trailing is not None:
            raise ParseError("unexpected content after run_workflow", trailing.line)
        return roles, program

    def _parse_def_header(self, rdr: _Reader, name: str, is_async: bool) -> None:
        if is_async:
            rdr.expect("name", "async")
        rdr.expect("name", "def")
        rdr.expect("name", name)
        rdr.expect("op", "(")
        depth = 1
        while depth:
            tok = rdr.next()
            if tok.kind == "op" and tok.text == "(":
                depth += 1
            elif tok.kind == "op" and tok.text == ")":
                depth -= 1
        if rdr.at("op", "->"):
            rdr.next()
            rdr.next()
        rdr.expect("op", ":")
        if not rdr.done():
            rdr.fail("unexpected tokens after def header")

    def _parse_init(self) -> tuple[RoleSpec, ...]:
        ll = self._next_line()
        def_indent = ll.indent
        rdr = _Reader(ll)
        if rdr.at("name", "async"):
            rdr.fail("expected __init__ before run_workflow")
        self._parse_def_header(rdr, "__init__", is_async=False)

        roles: list[RoleSpec] = []
        body_indent: int | None = None
        while True:
            nxt = self._peek_line()
            if nxt is None or nxt.indent <= def_indent:
                break
            if body_indent is None:
                body_indent = nxt.indent
            if nxt.indent != body_indent:
                raise ParseError("inconsistent indentation in constructor", nxt.line)
            self._next_line()
            role = self._parse_init_stmt(_Reader(nxt))
            if role is not None:
                roles.append(role)
        return tuple(roles)

    def _parse_init_stmt(self, rdr: _Reader) -> RoleSpec | None:
        rdr.expect("name", "self")
        rdr.expect("op", ".")
        attr = rdr.expect("name")
        rdr.expect("op", "=")
        if rdr.at("name", "operator"):
            rdr.next()
            rdr.expect("op", ".")
            kind_tok = rdr.expect("name")
            try:
                kind = OperatorKind.from_name(kind_tok.text)
            except KeyError:
                raise UnknownOperatorKind(
                    f"unknown operator kind '{kind_tok.text}'", kind_tok.line, kind_tok.col
                ) from None
            backbone, instruction = self._parse_ctor_args(rdr, kind)
            if not rdr.done():
                rdr.fail("unexpected tokens after operator constructor")
            return RoleSpec(attr.text, kind, backbone, instruction)
        # bookkeeping assignments: self.problem = problem, self.gid = None
        tok = rdr.next()
        if tok.kind == "name" and tok.text in ("problem", "None") and rdr.done():
            return None
        raise ParseError(
            f"unsupported constructor statement for 'self.{attr.text}'", tok.line, tok.col
        )

    def _parse_ctor_args(self, rdr: _Reader, kind: OperatorKind) -> tuple[str, str]:
        rdr.expect("op", "(")
        backbone: str | None = None
        instruction = ""
        first = True
        while not rdr.at("op", ")"):
            if not first:
                rdr.expect("op", ",")
                if rdr.at("op", ")"):  # trailing comma
                    break
            first = False
            if rdr.at("name") and rdr.at("op", "=", k=1):
                name_tok = rdr.next()
                rdr.next()
                kw = name_tok.text
                if kw == "instruction":
                    instruction = rdr.expect("str").text
                elif kw == "tool_name" and kind is OperatorKind.TOOL:
                    backbone = rdr.expect("str").text
                elif kw in _CTOR_IGNORED_KWARGS:
                    expected = "int" if _CTOR_IGNORED_KWARGS[kw] == "int" else "str"
                    rdr.expect(expected)
                else:
                    raise ParseError(
                        f"unexpected constructor argument '{kw}'", name_tok.line, name_tok.col
                    )
                continue
            if rdr.at("str"):
                tok = rdr.next()
                if backbone is None:
                    backbone = tok.text
                elif not instruction:
                    instruction = tok.text
                else:
                    raise ParseError("unexpected extra string argument", tok.line, tok.col)
                continue
            if rdr.at("name", "self"):
                rdr.next()
                rdr.expect("op", ".")
                rdr.expect("name")
                continue
            if rdr.at("int"):
                rdr.next()
                continue
            rdr.fail("unsupported constructor argument")
        rdr.expect("op", ")")
        if backbone is None:
            rdr.fail(f"{kind.value} constructor needs a backbone string literal"
                     if kind is not OperatorKind.TOOL
                     else "Tool constructor needs a tool name")
        return backbone, instruction

    def _parse_run(self) -> tuple[Statement, ...]:
        ll = self._next_line()
        rdr = _Reader(ll)
        is_async = rdr.at("name", "async")
        self._parse_def_header(rdr, "run_workflow", is_async=is_async)
        return self._parse_block(ll.indent, top_level=True)

    def _parse_block(self, parent_indent: int, top_level: bool) -> tuple[Statement, ...]:
        first = self._peek_line()
        if first is None or first.indent <= parent_indent:
            line = first.line if first else None
            raise ParseError("expected an indented block", line)
        block_indent = first.indent
        stmts: list[Statement] = []
        while True:
            ll = self._peek_line()
            if ll is None or ll.indent < block_indent:
                break
            if ll.indent > block_indent:
                raise ParseError("unexpected indentation", ll.line)
            self._next_line()
            stmt = self._parse_stmt(_Reader(ll), block_indent, top_level)
            if stmt is not None:
                stmts.append(stmt)
        return tuple(stmts)

    def _parse_stmt(self, rdr: _Reader, indent: int, top_level: bool) -> Statement | None:
        tok = rdr.peek()
        assert tok is not None
        if tok.kind == "str" and len(rdr.toks) == 1:
            return None  # docstring
        if tok.kind == "name" and tok.text == "return":
            rdr.next()
            if not top_level:
                raise ParseError("return inside a loop is not allowed", tok.line, tok.col)
            value = self._parse_expr(rdr)
            if not rdr.done():
                rdr.fail("unexpected tokens after return")
            return Return(value)
        if tok.kind == "name" and tok.text == "for":
            return self._parse_loop(rdr, indent)
        if tok.kind == "name" and tok.text == "if":
            return self._parse_fallback(rdr, indent)
        if tok.kind == "name" and tok.text == "while":
            raise ParseError("unsupported construct: 'while' loop", tok.line, tok.col)
        if tok.kind == "name":
            return self._parse_assign_or_append(rdr)
        rdr.fail("unsupported statement")
        return None

    def _parse_loop(self, rdr: _Reader, indent: int) -> Loop:
        for_tok = rdr.expect("name", "for")
        rdr.expect("name")  # loop variable, conventionally "_"
        rdr.expect("name", "in")
        if not rdr.at("name", "range"):
            rdr.fail("unsupported construct: only 'for _ in range(N)' loops are allowed")
        rdr.next()
        rdr.expect("op", "(")
        count_tok = rdr.expect("int")
        rdr.expect("op", ")")
        rdr.expect("op", ":")
        if not rdr.done():
            rdr.fail("loop body must be an indented block")
        count = int(count_tok.text)
        if count < 1:
            raise UnboundedLoop(
                f"loop count must be at least 1, got {count}", count_tok.line, count_tok.col
            )
        if count > self.max_loop_bound:
            raise UnboundedLoop(
                f"loop count {count} exceeds the configured bound {self.max_loop_bound}",
                count_tok.line,
                count_tok.col,
            )
        body = self._parse_block(indent, top_level=False)
        if not body:
            raise ParseError("empty loop body", for_tok.line, for_tok.col)
        return Loop(count, body)

    def _parse_fallback(self, rdr: _Reader, indent: int) -> Fallback:
        if_tok = rdr.expect("name", "if")
        rdr.expect("name", "not")
        name_tok = rdr.expect("name")
        if rdr.at("name", "or"):
            rdr.next()
            rdr.expect("name", "not")
            again = rdr.expect("name")
            if again.text != name_tok.text:
                raise ParseError(
                    "fallback guard must test a single variable", again.line, again.col
                )
            rdr.expect("op", ".")
            rdr.expect("name", "strip")
            rdr.expect("op", "(")
            rdr.expect("op", ")")
        rdr.expect("op", ":")
        if not rdr.done():
            rdr.fail("fallback body must be an indented block")
        body_lines = self._collect_simple_block(indent)
        if len(body_lines) != 1:
            raise ParseError(
                "fallback body must be a single reassignment", if_tok.line, if_tok.col
            )
        body = _Reader(body_lines[0])
        target = body.expect("name")
        if target.text != name_tok.text:
            raise ParseError(
                "fallback must reassign the guarded variable", target.line, target.col
            )
        body.expect("op", "=")
        value = self._parse_expr(body)
        if not body.done():
            body.fail("unexpected tokens in fallback body")
        return Fallback(name_tok.text, value)

    def _collect_simple_block(self, parent_indent: int) -> list[_LogicalLine]:
        first = self._peek_line()
        if first is None or first.indent <= parent_indent:
            raise ParseError("expected an indented block", first.line if first else None)
        block_indent = first.indent
        out: list[_LogicalLine] = []
        while True:
            ll = self._peek_line()
            if ll is None or ll.indent < block_indent:
                return out
            self._next_line()
            out.append(ll)

    def _parse_assign_or_append(self, rdr: _Reader) -> Statement:
        name_tok = rdr.expect("name")
        if rdr.at("op", "."):
            rdr.next()
            method = rdr.expect("name")
            if method.text != "append":
                raise ParseError(
                    f"unsupported construct: method call '.{method.text}(...)'",
                    method.line,
                    method.col,
                )
            rdr.expect("op", "(")
            value = self._parse_expr(rdr)
            rdr.expect("op", ")")
            if not rdr.done():
                rdr.fail("unexpected tokens after append")
            return Append(name_tok.text, value)
        rdr.expect("op", "=")
        return self._parse_assign_rhs(rdr, name_tok)

    def _parse_assign_rhs(self, rdr: _Reader, out_tok: Tok) -> Statement:
        if rdr.at("name", "await"):
            rdr.next()
            role_tok, args = self._parse_role_call(rdr)
            if not rdr.done():
                rdr.fail("unexpected tokens after call")
            return Call(out_tok.text, role_tok.text, args)
        if rdr.at("op", "["):
            if rdr.at("name", "await", k=1):
                return self._parse_foreach(rdr, out_tok)
            rdr.next()
            items: list[str] = []
            while not rdr.at("op", "]"):
                if items:
                    rdr.expect("op", ",")
                    if rdr.at("op", "]"):  # trailing comma
                        break
                if not rdr.at("str"):
                    rdr.fail("list initializer elements must be string literals")
                items.append(rdr.next().text)
            rdr.expect("op", "]")
            if not rdr.done():
                rdr.fail("unexpected tokens after list initializer")
            return ListInit(out_tok.text, tuple(items))
        tok = rdr.peek()
        assert tok is not None
        if tok.kind == "name" and rdr.at("op", "(", k=1):
            raise ParseError(
                f"unsupported construct: call to '{tok.text}(...)'", tok.line, tok.col
            )
        if tok.kind == "fstr":
            raise ParseError("unsupported construct: f-string", tok.line, tok.col)
        raise ParseError(
            "unsupported assignment; expected an operator call or list initializer",
            tok.line,
            tok.col,
        )

    def _parse_foreach(self, rdr: _Reader, out_tok: Tok) -> ForEachCall:
        rdr.expect("op", "[")
        rdr.expect("name", "await")
        role_tok = self._parse_self_role(rdr)
        rdr.expect("op", "(")
        arg_tok = rdr.expect("name")
        rdr.expect("op", ")")
        rdr.expect("name", "for")
        loop_var = rdr.expect("name")
        if loop_var.text != arg_tok.text:
            raise ParseError(
                "comprehension must pass its loop variable to the call",
                arg_tok.line,
                arg_tok.col,
            )
        rdr.expect("name", "in")
        source_tok = rdr.expect("name")
        rdr.expect("op", "]")
        if not rdr.done():
            rdr.fail("unexpected tokens after comprehension")
        kind = self._role_kind(role_tok)
        text_params = [p for p in operator_arity(kind) if p.type == "text" and p.required]
        if not text_params:
            raise ParseError(
                f"{kind.value} cannot take a comprehension loop variable",
                role_tok.line,
                role_tok.col,
            )
        return ForEachCall(out_tok.text, role_tok.text, text_params[0].name, source_tok.text)

    def _parse_self_role(self, rdr: _Reader) -> Tok:
        rdr.expect("name", "self")
        rdr.expect("op", ".")
        return rdr.expect("name")

    def _role_kind(self, role_tok: Tok) -> OperatorKind:
        role = self.role_map.get(role_tok.text)
        if role is None:
            raise ParseError(
                f"call to unknown role '{role_tok.text}'", role_tok.line, role_tok.col
            )
        return role.kind

    def _parse_role_call(self, rdr: _Reader) -> tuple[Tok, tuple[tuple[str, Expr], ...]]:
        role_tok = self._parse_self_role(rdr)
        rdr.expect("op", "(")
        positional: list[Expr] = []
        kwargs: list[tuple[Tok, Expr]] = []
        while not rdr.at("op", ")"):
            if positional or kwargs:
                rdr.expect("op", ",")
                if rdr.at("op", ")"):
                    break
            if rdr.at("name") and rdr.at("op", "=", k=1):
                kw_tok = rdr.next()
                rdr.next()
                kwargs.append((kw_tok, self._parse_expr(rdr)))
                continue
            if kwargs:
                rdr.fail("positional argument follows keyword argument")
            positional.append(self._parse_expr(rdr))
        rdr.expect("op", ")")
        return role_tok, self._normalize_args(role_tok, positional, kwargs)

    def _normalize_args(
        self,
        role_tok: Tok,
        positional: list[Expr],
        kwargs: list[tuple[Tok, Expr]],
    ) -> tuple[tuple[str, Expr], ...]:
        kind = self._role_kind(role_tok)
        params = operator_arity(kind)
        by_name = {p.name: p for p in params}
        out: dict[str, Expr] = {}
        if len(positional) > len(params):
            raise ParseError(
                f"too many positional arguments for {kind.value} "
                f"(takes {', '.join(p.name for p in params)})",
                role_tok.line,
                role_tok.col,
            )
        for expr, param in zip(positional, params):
            out[param.name] = expr
        for kw_tok, expr in kwargs:
            if kw_tok.text not in by_name:
                raise ParseError(
                    f"unexpected argument '{kw_tok.text}' for {kind.value} "
                    f"(expected {', '.join(p.name for p in params)})",
                    kw_tok.line,
                    kw_tok.col,
                )
            if kw_tok.text in out:
                raise ParseError(
                    f"duplicate argument '{kw_tok.text}'", kw_tok.line, kw_tok.col
                )
            out[kw_tok.text] = expr
        for param in params:
            if param.required and param.name not in out:
                raise ParseError(
                    f"missing required argument '{param.name}' for {kind.value}",
                    role_tok.line,
                    role_tok.col,
                )
        return tuple((p.name, out[p.name]) for p in params if p.name in out)

    def _parse_expr(self, rdr: _Reader) -> Expr:
        atom = self._parse_atom(rdr)
        if rdr.at("name", "if"):
            if_tok = rdr.next()
            if not isinstance(atom, Var):
                raise ParseError(
                    "unsupported conditional expression", if_tok.line, if_tok.col
                )
            guard = rdr.expect("str")
            if guard.text != atom.name:
                raise ParseError(
                    "conditional guard must test the same variable", guard.line, guard.col
                )
            rdr.expect("name", "in")
            rdr.expect("name", "locals")
            rdr.expect("op", "(")
            rdr.expect("op", ")")
            rdr.expect("name", "else")
            fallback = self._parse_expr(rdr)
            return PriorOr(atom.name, fallback)
        return atom

    def _parse_atom(self, rdr: _Reader) -> Expr:
        tok = rdr.peek()
        if tok is None:
            rdr.fail("expected an expression")
        assert tok is not None
        if tok.kind == "str":
            rdr.next()
            return Str(tok.text)
        if tok.kind == "fstr":
            raise ParseError("unsupported construct: f-string", tok.line, tok.col)
        if tok.kind == "int":
            rdr.next()
            return Num(int(tok.text))
        if tok.kind == "op" and tok.text == "[":
            rdr.next()
            items: list[Expr] = []
            while not rdr.at("op", "]"):
                if items:
                    rdr.expect("op", ",")
                    if rdr.at("op", "]"):
                        break
                items.append(self._parse_expr(rdr))
            rdr.expect("op", "]")
            return ListExpr(tuple(items))
        if tok.kind == "name" and tok.text == "self":
            rdr.next()
            rdr.expect("op", ".")
            attr = rdr.expect("name")
            if attr.text != "problem":
                raise ParseError(
                    f"unsupported attribute 'self.{attr.text}' in expression",
                    attr.line,
                    attr.col,
                )
            return ProblemRef()
        if tok.kind == "name":
            rdr.next()
            if rdr.at("op", "["):
                rdr.next()
                idx = rdr.expect("int")
                rdr.expect("op", "]")
                return Index(tok.text, int(idx.text))
            if rdr.at("op", "("):
                raise ParseError(
                    f"unsupported construct: call to '{tok.text}(...)'", tok.line, tok.col
                )
            return Var(tok.text)
        rdr.fail("expected an expression")
        raise AssertionError("unreachable")


def parse_template(source: str, max_loop_bound: int = 16) -> WorkflowTemplate:
    """Parse dialect source into a validated WorkflowTemplate.

    Raises ParseError (with line/column), UnknownOperatorKind,
    UnboundVariable, or UnboundedLoop. The returned template always
    satisfies every template invariant.
    """
    if not source or not source.strip():
        raise ParseError("empty workflow source")
    lines = _scan(source)
    roles, program = _TemplateParser(lines, max_loop_bound).parse()
    tools = frozenset(r.backbone for r in roles if r.kind is OperatorKind.TOOL)
    template = WorkflowTemplate(roles, program, tools, source_text=source)

    from .validate import validate_template  # deferred: validate imports nodes only

    report = validate_template(template, max_loop_bound=max_loop_bound)
    if report.findings:
        first = report.findings[0]
        exc_cls = {
            "UnboundVariable": UnboundVariable,
            "UnboundedLoop": UnboundedLoop,
        }.get(first.code, ParseError)
        raise exc_cls(f"{first.code}: {first.message} ({first.where})")
    return template
