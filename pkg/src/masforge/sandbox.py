"""Hermetic helpers for candidate checking and tool execution.

The sandbox runner spawns a subprocess with a wall-clock timeout, a
scrubbed environment, and a throwaway working directory; exit code 0
means pass. The expression evaluator reduces arithmetic text without
ever executing code.
"""

from __future__ import annotations

import ast
import operator as _op
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import MasforgeError

DEFAULT_TIMEOUT = 10.0

SOLUTION_PLACEHOLDER = "{solution}"


class SandboxTimeout(MasforgeError):
    pass


class ToolFailure(MasforgeError):
    pass


@dataclass(frozen=True)
class SandboxResult:
    exit_code: int
    stdout: str
    stderr: str

    @property
    def passed(self) -> bool:
        return self.exit_code == 0


class SandboxRunner:
    """Runs check commands against a candidate solution file.

    The command is a list of argv strings; every occurrence of
    ``{solution}`` is replaced by the path of a temp file holding the
    candidate text. No network access is expected; proxy and API
    variables are stripped from the child environment.
    """

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout

    def _clean_env(self) -> dict[str, str]:
        env = {k: v for k, v in os.environ.items()
               if not k.endswith("_PROXY") and not k.lower().endswith("_proxy")
               and "API_KEY" not in k and "TOKEN" not in k}
        return env

    def run_check(self, command: Sequence[str], solution_text: str) -> SandboxResult:
        if not command:
            raise ToolFailure("empty check command")
        with tempfile.TemporaryDirectory(prefix="masforge-sbx-") as tmp:
            solution_path = Path(tmp) / "solution.py"
            solution_path.write_text(solution_text, encoding="utf-8")
            argv = [arg.replace(SOLUTION_PLACEHOLDER, str(solution_path))
                    for arg in command]
            try:
                proc = subprocess.run(
                    argv,
                    cwd=tmp,
                    env=self._clean_env(),
                    capture_output=True,
                    text=True,
                    timeout=self.timeout,
                )
            except subprocess.TimeoutExpired as exc:
                raise SandboxTimeout(
                    f"check exceeded {self.timeout:.0f}s: {argv[0]}"
                ) from exc
            except OSError as exc:
                raise ToolFailure(f"could not run check command {argv[0]!r}: {exc}") from exc
            return SandboxResult(proc.returncode, proc.stdout, proc.stderr)

    def run_python(self, script_text: str) -> SandboxResult:
        """Run text as a python script inside the sandbox."""
        return self.run_check([sys.executable, SOLUTION_PLACEHOLDER], script_text)


_BIN_OPS = {
    ast.Add: _op.add,
    ast.Sub: _op.sub,
    ast.Mult: _op.mul,
    ast.Div: _op.truediv,
    ast.FloorDiv: _op.floordiv,
    ast.Mod: _op.mod,
    ast.Pow: _op.pow,
}
_UNARY_OPS = {ast.UAdd: _op.pos, ast.USub: _op.neg}


def evaluate_expression(text: str) -> str:
    """Evaluate an arithmetic expression; numbers and + - * / // % ** only."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ToolFailure(f"not an arithmetic expression: {exc.msg}") from exc

    def reduce(node: ast.AST):
        if isinstance(node, ast.Expression):
            return reduce(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.BinOp) and type(node.op) in _BIN_OPS:
            return _BIN_OPS[type(node.op)](reduce(node.left), reduce(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY_OPS:
            return _UNARY_OPS[type(node.op)](reduce(node.operand))
        raise ToolFailure(f"unsupported element in expression: {type(node).__name__}")

    try:
        value = reduce(tree)
    except ZeroDivisionError as exc:
        raise ToolFailure("division by zero") from exc
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return str(value)
