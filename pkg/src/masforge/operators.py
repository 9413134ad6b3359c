"""The agentic operator runtime.

Each operator kind is a fixed contract: assemble a prompt from the
role's instruction and the call inputs, run one completion against the
assigned backbone, and parse the reply into an OperatorOutput. Search,
Browser, and Tool are store/sandbox-backed instead of LLM-backed and
incur no exchanges.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable

from .docstore import DocStore, DocumentNotFound
from .errors import MasforgeError
from .gateway import ChatExchange, Gateway, SamplingParams
from .ir import OperatorKind, operator_arity
from .sandbox import SandboxRunner, SandboxTimeout, ToolFailure, evaluate_expression

__all__ = [
    "EnsembleSelectionFailed",
    "OperatorContext",
    "OperatorError",
    "OperatorOutput",
    "OperatorOutputMalformed",
    "SandboxTimeout",
    "ToolFailure",
    "operator_arity",
    "run_operator",
]

REVIEW_FIELDS = ("thought", "revised_solution")

_LLM_BACKED = frozenset(
    {
        OperatorKind.CUSTOM,
        OperatorKind.ANSWER_GENERATE,
        OperatorKind.CUSTOM_CODE_GENERATE,
        OperatorKind.PROGRAMMER,
        OperatorKind.REVIEW,
        OperatorKind.SC_ENSEMBLE,
        OperatorKind.TEST,
    }
)

_FENCE = re.compile(r"```[a-zA-Z0-9_+-]*\n(.*?)```", re.DOTALL)


class OperatorError(MasforgeError):
    """Base for operator-level failures that should trigger repair.

    Carries any exchanges incurred before the failure so the executor
    can still account their cost.
    """

    def __init__(self, message: str, exchanges: tuple[ChatExchange, ...] = ()):
        super().__init__(message)
        self.exchanges = exchanges


class OperatorOutputMalformed(OperatorError):
    """A structured-output operator returned an unparseable reply."""


class EnsembleSelectionFailed(OperatorError):
    """The ensemble judge did not name any offered candidate."""


@dataclass(frozen=True)
class OperatorOutput:
    text: str
    structured: dict[str, str] | None = None
    exchanges: tuple[ChatExchange, ...] = ()

    @property
    def cost_micro(self) -> int:
        return sum(e.cost_micro for e in self.exchanges)


@dataclass
class OperatorContext:
    """Everything an operator may need besides its call inputs."""

    problem: str
    gateway: Gateway
    params: SamplingParams = SamplingParams()
    doc_store: DocStore | None = None
    sandbox: SandboxRunner | None = None
    check_command: tuple[str, ...] | None = None
    repair_budget: int = 1
    tools: dict[str, Callable[[str], str]] = field(default_factory=dict)


def strip_code_fences(text: str) -> str:
    match = _FENCE.search(text)
    return match.group(1).strip() if match else text.strip()


def _validate_inputs(kind: OperatorKind, inputs: dict) -> None:
    params = {p.name: p for p in operator_arity(kind)}
    for name in inputs:
        if name not in params:
            raise ValueError(f"{kind.value} takes no input {name!r}")
    for param in params.values():
        if param.required and param.name not in inputs:
            raise ValueError(f"{kind.value} requires input {param.name!r}")
        if param.name not in inputs:
            continue
        value = inputs[param.name]
        if param.type == "text" and not isinstance(value, str):
            raise ValueError(f"{kind.value} input {param.name!r} must be text")
        if param.type == "text_list" and not (
            isinstance(value, list) and all(isinstance(v, str) for v in value)
        ):
            raise ValueError(f"{kind.value} input {param.name!r} must be a list of text")
        if param.type == "int" and not isinstance(value, int):
            raise ValueError(f"{kind.value} input {param.name!r} must be an integer")


def _complete(ctx: OperatorContext, backbone_id: str, prompt: str) -> ChatExchange:
    return ctx.gateway.complete(
        backbone_id, [{"role": "user", "content": prompt}], ctx.params
    )


def _merge_instruction(role_instruction: str, call_instruction: str) -> str:
    parts = [p for p in (role_instruction, call_instruction) if p]
    return "\n".join(parts)


def _extract_json_object(text: str) -> dict | None:
    candidates = [text.strip(), strip_code_fences(text)]
    brace = re.search(r"\{.*\}", text, re.DOTALL)
    if brace:
        candidates.append(brace.group(0))
    for candidate in candidates:
        try:
            obj = json.loads(candidate)
        except (json.JSONDecodeError, TypeError):
            continue
        if isinstance(obj, dict):
            return obj
    return None


# --- per-kind implementations ------------------------------------------------


def _run_custom(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    prompt = (
        f"{_merge_instruction(instruction, inputs.get('instruction', ''))}\n\n"
        f"Problem:\n{ctx.problem}"
    )
    exchange = _complete(ctx, backbone_id, prompt)
    return OperatorOutput(exchange.response_text.strip(), exchanges=(exchange,))


def _run_answer_generate(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    # Minimal answer-from-evidence template; see docs/operators.md.
    context = inputs.get("context", "")
    prompt = (
        "Answer the question using the evidence provided. "
        "Reply with the final answer only.\n"
        f"{instruction}\n\n"
        f"Question:\n{ctx.problem}\n\n"
        f"Evidence:\n{context if context.strip() else '(none)'}"
    )
    exchange = _complete(ctx, backbone_id, prompt)
    return OperatorOutput(exchange.response_text.strip(), exchanges=(exchange,))


def _run_code_generate(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    prompt = (
        f"{_merge_instruction(instruction, inputs.get('instruction', ''))}\n\n"
        f"Task:\n{ctx.problem}\n\n"
        "Return only the code for the solution."
    )
    exchange = _complete(ctx, backbone_id, prompt)
    return OperatorOutput(strip_code_fences(exchange.response_text), exchanges=(exchange,))


def _run_programmer(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    prompt = (
        f"{instruction or 'Produce a program-backed solution to the task.'}\n\n"
        f"Task:\n{ctx.problem}\n\n"
        f"Analysis:\n{inputs['analysis']}\n\n"
        "State the final solution at the end."
    )
    exchange = _complete(ctx, backbone_id, prompt)
    return OperatorOutput(strip_code_fences(exchange.response_text), exchanges=(exchange,))


def _run_review(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    prompt = (
        "Critique the candidate solution and produce an improved version.\n"
        f"{instruction}\n"
        'Reply with a JSON object containing exactly the fields "thought" and '
        '"revised_solution", both non-empty.\n\n'
        f"Problem:\n{ctx.problem}\n\n"
        f"Candidate solution:\n{inputs['pre_solution']}"
    )
    exchange = _complete(ctx, backbone_id, prompt)
    obj = _extract_json_object(exchange.response_text) or {}
    missing = sorted(
        name for name in REVIEW_FIELDS if not str(obj.get(name, "") or "").strip()
    )
    if missing:
        listed = ", ".join(repr(name) for name in missing)
        raise OperatorOutputMalformed(f"Missing fields: {{{listed}}}", (exchange,))
    structured = {name: str(obj[name]) for name in REVIEW_FIELDS}
    return OperatorOutput(structured["revised_solution"], structured, (exchange,))


def _candidate_labels(count: int) -> list[str]:
    if count > 26:
        raise ValueError("ensemble supports at most 26 candidates")
    return [chr(ord("A") + i) for i in range(count)]


def _run_sc_ensemble(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    solutions: list[str] = inputs["solutions"]
    if not solutions:
        raise EnsembleSelectionFailed("no candidates to select from")
    labels = _candidate_labels(len(solutions))
    answer_mapping = {label: i for i, label in enumerate(labels)}
    blocks = "\n\n".join(
        f"{label}:\n{solution}" for label, solution in zip(labels, solutions)
    )
    prompt = (
        "Several candidate solutions to the same problem are labeled with "
        "letters. Pick the best candidate and reply with its letter only.\n"
        f"{instruction}\n\n"
        f"Problem:\n{ctx.problem}\n\n"
        f"{blocks}"
    )
    exchange = _complete(ctx, backbone_id, prompt)
    answer = _first_label(exchange.response_text, set(labels))
    if answer not in answer_mapping:
        raise EnsembleSelectionFailed(f"KeyError: '{answer}'", (exchange,))
    chosen = solutions[answer_mapping[answer]]
    return OperatorOutput(chosen, {"selected": answer}, (exchange,))


def _first_label(reply: str, offered: set[str]) -> str:
    for match in re.finditer(r"\b([A-Z])\b", reply):
        if match.group(1) in offered:
            return match.group(1)
    return reply.strip()[:1] if reply.strip() and reply.strip()[0] in offered else ""


def _run_test(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    solution = inputs["solution"]
    if ctx.check_command is None or ctx.sandbox is None:
        return OperatorOutput(solution, {"passed": "skipped"})
    exchanges: list[ChatExchange] = []

    def check(text: str):
        try:
            return ctx.sandbox.run_check(ctx.check_command, text)
        except SandboxTimeout as exc:
            exc.exchanges = tuple(exchanges)
            raise

    result = check(solution)
    repairs = 0
    while not result.passed and repairs < ctx.repair_budget:
        repairs += 1
        prompt = (
            "The candidate solution failed its checks. Repair it.\n"
            f"{instruction}\n\n"
            f"Task:\n{ctx.problem}\n\n"
            f"Candidate:\n{solution}\n\n"
            f"Check output:\n{result.stdout[-2000:]}\n{result.stderr[-2000:]}\n\n"
            "Return only the corrected code."
        )
        exchange = _complete(ctx, backbone_id, prompt)
        exchanges.append(exchange)
        solution = strip_code_fences(exchange.response_text)
        result = check(solution)
    structured = {
        "passed": "true" if result.passed else "false",
        "stdout": result.stdout[-2000:],
        "stderr": result.stderr[-2000:],
        "repairs": str(repairs),
    }
    return OperatorOutput(solution, structured, tuple(exchanges))


def _run_search(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    if ctx.doc_store is None:
        raise ToolFailure("no document store configured")
    top_k = inputs.get("top_k", 5)
    hits = ctx.doc_store.search(inputs["query"], top_k=top_k)
    lines = [f"{hit.docid}\t{hit.score}\t{hit.preview}" for hit in hits]
    structured = {
        "results": json.dumps(
            [{"docid": h.docid, "score": h.score} for h in hits], sort_keys=True
        )
    }
    return OperatorOutput("\n".join(lines), structured)


def _run_browser(backbone_id, instruction, inputs, ctx) -> OperatorOutput:
    if ctx.doc_store is None:
        raise ToolFailure("no document store configured")
    try:
        body = ctx.doc_store.fetch(inputs["docid"])
    except DocumentNotFound as exc:
        raise ToolFailure(f"document not found: {inputs['docid']!r}") from exc
    return OperatorOutput(body)


def _run_tool(tool_name, instruction, inputs, ctx) -> OperatorOutput:
    text = inputs["input"]
    custom = ctx.tools.get(tool_name)
    if custom is not None:
        return OperatorOutput(custom(text))
    if tool_name in ("calc", "eval"):
        return OperatorOutput(evaluate_expression(text))
    if tool_name == "python":
        if ctx.sandbox is None:
            raise ToolFailure("no sandbox configured for the python tool")
        result = ctx.sandbox.run_python(text)
        if not result.passed:
            raise ToolFailure(f"python tool failed: {result.stderr[-500:]}")
        return OperatorOutput(result.stdout.strip(), {"stderr": result.stderr[-2000:]})
    raise ToolFailure(f"unknown tool {tool_name!r}")


_RUNNERS = {
    OperatorKind.CUSTOM: _run_custom,
    OperatorKind.ANSWER_GENERATE: _run_answer_generate,
    OperatorKind.CUSTOM_CODE_GENERATE: _run_code_generate,
    OperatorKind.PROGRAMMER: _run_programmer,
    OperatorKind.REVIEW: _run_review,
    OperatorKind.SC_ENSEMBLE: _run_sc_ensemble,
    OperatorKind.TEST: _run_test,
    OperatorKind.SEARCH: _run_search,
    OperatorKind.BROWSER: _run_browser,
}


def run_operator(
    kind: OperatorKind,
    backbone_id: str,
    instruction: str,
    inputs: dict,
    ctx: OperatorContext,
) -> OperatorOutput:
    """Run one operator call and return its parsed output.

    ``backbone_id`` is the assigned backbone for LLM-backed kinds and
    the tool name for Tool. Raises OperatorOutputMalformed,
    EnsembleSelectionFailed, ToolFailure, or SandboxTimeout on the
    operator's own failure modes; gateway errors propagate as-is.
    """
    _validate_inputs(kind, inputs)
    if kind is OperatorKind.TOOL:
        return _run_tool(backbone_id, instruction, inputs, ctx)
    return _RUNNERS[kind](backbone_id, instruction, inputs, ctx)
