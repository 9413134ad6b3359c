"""Monitored execution of instantiated workflows.

Interprets the workflow program statement by statement, accounting
every exchange's cost into the running state. After each operator call
the repair trigger is checked; when it fires, the rectifier is asked
for a corrected workflow, execution resumes at the earliest statement
whose inputs the edit invalidated (or restarts when variables were
renamed), and the cycle is bounded by the rectification budget. Every
error path folds into a TrajectoryOutcome — nothing escapes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .docstore import DocStore
from .errors import MasforgeError
from .gateway import ChatExchange, Gateway, SamplingParams
from .ir import (
    Append,
    Call,
    Fallback,
    ForEachCall,
    InstantiatedWorkflow,
    ListInit,
    Loop,
    Return,
    Statement,
    WorkflowTemplate,
    expr_vars,
)
from .ir.canonical import obj_to_template, template_to_obj
from .ir.nodes import (
    BackboneAssignment,
    Expr,
    Index,
    ListExpr,
    Num,
    PriorOr,
    ProblemRef,
    Str,
    Var,
)
from .meta import (
    BudgetForbidden,
    MetaAgentConfig,
    MetaAgentTeam,
    RectificationParseFailed,
    RectificationRequest,
    should_rectify,
)
from .money import format_micro
from .operators import OperatorContext, OperatorError, run_operator
from .sandbox import SandboxRunner, SandboxTimeout, ToolFailure

TRAJECTORY_SCHEMA = 1
DEFAULT_STEP_CEILING = 256

Value = Any  # str | int | list[str]


class Outcome(Enum):
    NOMINAL = "nominal"
    FAILURE = "failure"


@dataclass(frozen=True)
class Event:
    seq: int
    kind: str
    detail: dict

    def to_obj(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "detail": self.detail}

    @classmethod
    def from_obj(cls, obj: dict) -> "Event":
        return cls(int(obj["seq"]), obj["kind"], dict(obj.get("detail", {})))


@dataclass
class ExecutionState:
    """Running snapshot: cumulative cost, progress, outcome flag, log."""

    cumulative_cost_micro: int = 0
    steps_completed: int = 0
    outcome_flag: Outcome = Outcome.NOMINAL
    bindings: dict[str, Value] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.outcome_flag is Outcome.FAILURE

    def snapshot(self) -> dict:
        return {
            "cumulative_cost_micro": self.cumulative_cost_micro,
            "steps_completed": self.steps_completed,
            "outcome": self.outcome_flag.value,
        }


class JudgeCommandFailure(MasforgeError):
    """The command judge could not run (distinct from ran-and-failed)."""


@dataclass(frozen=True)
class Judge:
    """Pure answer check realizing the per-benchmark success signal."""

    kind: str  # exact-match | numeric-tolerance | containment | external-command
    reference: str = ""
    tolerance: float = 1e-6
    command: tuple[str, ...] = ()

    def __post_init__(self):
        kinds = ("exact-match", "numeric-tolerance", "containment", "external-command")
        if self.kind not in kinds:
            raise ValueError(f"unknown judge kind {self.kind!r} (expected one of {kinds})")


_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def _norm_text(text: str) -> str:
    return " ".join(text.split()).casefold()


def _parse_number(text: str) -> float | None:
    try:
        return float(text.strip())
    except ValueError:
        matches = _NUMBER.findall(text)
        return float(matches[-1]) if matches else None


def evaluate_judge(judge: Judge, answer: str, sandbox: SandboxRunner | None = None) -> bool:
    """Apply the judge to an answer. Pure given (answer, reference)."""
    if judge.kind == "exact-match":
        return _norm_text(answer) == _norm_text(judge.reference)
    if judge.kind == "numeric-tolerance":
        got = _parse_number(answer)
        want = _parse_number(judge.reference)
        if got is None or want is None:
            return False
        return abs(got - want) <= judge.tolerance
    if judge.kind == "containment":
        return _norm_text(judge.reference) in _norm_text(answer)
    # external-command
    if not judge.command:
        raise JudgeCommandFailure("command judge has no command")
    runner = sandbox or SandboxRunner()
    try:
        result = runner.run_check(list(judge.command), answer)
    except (SandboxTimeout, ToolFailure) as exc:
        raise JudgeCommandFailure(str(exc)) from exc
    return result.passed


@dataclass
class ExecutionEnv:
    """Operator context shared by every statement of a trajectory."""

    gateway: Gateway
    team: MetaAgentTeam | None = None
    doc_store: DocStore | None = None
    sandbox: SandboxRunner | None = None
    check_command: tuple[str, ...] | None = None
    params: SamplingParams = SamplingParams()
    tools: dict = field(default_factory=dict)
    repair_budget: int = 1
    step_ceiling: int = DEFAULT_STEP_CEILING


@dataclass(frozen=True)
class TrajectoryOutcome:
    """Terminal record of one workflow execution."""

    final_answer: str | None
    success: bool
    total_cost_micro: int
    rectification_count: int
    events: tuple[Event, ...]
    workflow_versions: tuple[InstantiatedWorkflow, ...]

    def to_obj(self) -> dict:
        return {
            "schema": TRAJECTORY_SCHEMA,
            "final_answer": self.final_answer,
            "success": self.success,
            "total_cost_micro": self.total_cost_micro,
            "rectification_count": self.rectification_count,
            "events": [e.to_obj() for e in self.events],
            "workflow_versions": [
                {
                    "template": template_to_obj(w.template),
                    "assignment": w.assignment.as_dict(),
                }
                for w in self.workflow_versions
            ],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "TrajectoryOutcome":
        if obj.get("schema") != TRAJECTORY_SCHEMA:
            raise MasforgeError(
                f"unsupported trajectory schema {obj.get('schema')!r}"
            )
        versions = tuple(
            InstantiatedWorkflow(
                obj_to_template(v["template"]),
                BackboneAssignment.of(v["assignment"]),
            )
            for v in obj["workflow_versions"]
        )
        return cls(
            final_answer=obj.get("final_answer"),
            success=bool(obj["success"]),
            total_cost_micro=int(obj["total_cost_micro"]),
            rectification_count=int(obj["rectification_count"]),
            events=tuple(Event.from_obj(e) for e in obj.get("events", [])),
            workflow_versions=versions,
        )


def format_events(events: list[Event]) -> str:
    return "\n".join(
        f"[{e.seq}] {e.kind}: {json.dumps(e.detail, sort_keys=True)}" for e in events
    )


class _RectifyInterrupt(Exception):
    pass


class _StepCeilingExceeded(Exception):
    pass


class _Run:
    def __init__(self, workflow: InstantiatedWorkflow, problem: str, judge: Judge,
                 cfg: MetaAgentConfig, env: ExecutionEnv, sample_tag: int = 0):
        self.problem = problem
        self.judge = judge
        self.cfg = cfg
        self.env = env
        self.sample_tag = sample_tag
        self.versions: list[InstantiatedWorkflow] = [workflow]
        self.resolved: WorkflowTemplate = workflow.resolve()
        self.state = ExecutionState()
        self.pc = 0
        self.snapshots: dict[int, dict[str, Value]] = {}
        self.rect_count = 0
        self.statements_run = 0

    # --- events and accounting ---

    def _event(self, kind: str, detail: dict) -> None:
        self.state.events.append(Event(len(self.state.events), kind, detail))

    def _account(self, exchanges: tuple[ChatExchange, ...], label: str) -> None:
        for ex in exchanges:
            self.state.cumulative_cost_micro += ex.cost_micro
            self._event("exchange", {
                "label": label,
                "backbone": ex.backbone_id,
                "prompt_tokens": ex.prompt_tokens,
                "completion_tokens": ex.completion_tokens,
                "cost_micro": ex.cost_micro,
            })

    def _emit_meta(self, kind: str, detail: dict) -> None:
        # rectifier completions accrue to trajectory cost like any other
        if kind == "meta-exchange":
            self.state.cumulative_cost_micro += int(detail.get("cost_micro", 0))
            self._event("exchange", {
                "label": f"meta:{detail.get('agent', '?')}",
                "backbone": detail.get("backbone", ""),
                "prompt_tokens": detail.get("prompt_tokens", 0),
                "completion_tokens": detail.get("completion_tokens", 0),
                "cost_micro": int(detail.get("cost_micro", 0)),
            })
        else:
            self._event(kind, detail)

    # --- main loop ---

    def run(self) -> TrajectoryOutcome:
        self._event("start", {
            "roles": len(self.resolved.roles),
            "statements": len(self.resolved.program),
            "cost_budget_micro": self.cfg.cost_budget_micro,
        })
        while True:
            program = self.resolved.program
            if self.pc >= len(program):
                return self._finish_failed("NoReturn", "program ended without a return")
            stmt = program[self.pc]
            self.snapshots[self.pc] = self._copy_bindings()
            try:
                result = self._exec_stmt(stmt)
                if isinstance(stmt, Return):
                    return self._finish_with_answer(result)
                self.pc += 1
            except _RectifyInterrupt:
                terminal = self._handle_rectification()
                if terminal is not None:
                    return terminal
            except _StepCeilingExceeded:
                return self._finish_failed(
                    "StepCeiling", f"exceeded {self.env.step_ceiling} statements"
                )

    def _copy_bindings(self) -> dict[str, Value]:
        return {k: list(v) if isinstance(v, list) else v
                for k, v in self.state.bindings.items()}

    # --- statements ---

    def _exec_stmt(self, stmt: Statement) -> Value:
        self.statements_run += 1
        if self.statements_run > self.env.step_ceiling:
            raise _StepCeilingExceeded()
        if isinstance(stmt, Call):
            inputs = {name: self._eval(expr) for name, expr in stmt.args}
            self.state.bindings[stmt.out] = self._run_call(stmt.role, inputs)
            return None
        if isinstance(stmt, ListInit):
            self.state.bindings[stmt.out] = list(stmt.items)
            return None
        if isinstance(stmt, Append):
            value = self._eval(stmt.value)
            self.state.bindings[stmt.target].append(value)
            return None
        if isinstance(stmt, Loop):
            for _ in range(stmt.count):
                for inner in stmt.body:
                    self._exec_stmt(inner)
            return None
        if isinstance(stmt, ForEachCall):
            source = self.state.bindings[stmt.source]
            collected = []
            for item in source:
                collected.append(self._run_call(stmt.role, {stmt.param: item}))
            self.state.bindings[stmt.out] = collected
            return None
        if isinstance(stmt, Fallback):
            current = self.state.bindings.get(stmt.target)
            empty = (
                current is None
                or (isinstance(current, str) and not current.strip())
                or (isinstance(current, list) and not current)
            )
            if empty:
                self.state.bindings[stmt.target] = self._eval(stmt.value)
                self._event("fallback-applied", {"variable": stmt.target})
            return None
        if isinstance(stmt, Return):
            return self._stringify(self._eval(stmt.value))
        raise AssertionError(f"unknown statement {stmt!r}")

    def _run_call(self, role_id: str, inputs: dict) -> str:
        role = self.resolved.role_map()[role_id]
        self._event("operator-start", {
            "role": role_id, "kind": role.kind.value, "backbone": role.backbone,
        })
        ctx = OperatorContext(
            problem=self.problem,
            gateway=self.env.gateway,
            params=self.env.params,
            doc_store=self.env.doc_store,
            sandbox=self.env.sandbox,
            check_command=self.env.check_command,
            repair_budget=self.env.repair_budget,
            tools=self.env.tools,
        )
        try:
            output = run_operator(role.kind, role.backbone, role.instruction, inputs, ctx)
        except (OperatorError, ToolFailure, SandboxTimeout, MasforgeError) as exc:
            self._account(tuple(getattr(exc, "exchanges", ()) or ()), f"op:{role_id}")
            self._event("operator-error", {
                "role": role_id,
                "kind": role.kind.value,
                "error": type(exc).__name__,
                "message": str(exc),
            })
            self.state.outcome_flag = Outcome.FAILURE
            self._checkpoint()
            raise AssertionError("failure checkpoint must interrupt")
        self._account(output.exchanges, f"op:{role_id}")
        self.state.steps_completed += 1
        detail = {"role": role_id, "kind": role.kind.value,
                  "cost_micro": output.cost_micro}
        if output.structured:
            detail["structured"] = {
                k: v[:200] for k, v in output.structured.items()
            }
        self._event("operator-finish", detail)
        self._checkpoint()
        return output.text

    def _checkpoint(self) -> None:
        trigger = should_rectify(self.state, self.cfg.cost_budget_micro)
        self._event("checkpoint", {
            "cost_micro": self.state.cumulative_cost_micro,
            "outcome": self.state.outcome_flag.value,
            "trigger": trigger,
        })
        if trigger:
            raise _RectifyInterrupt()

    # --- expression evaluation ---

    def _eval(self, expr: Expr) -> Value:
        if isinstance(expr, Str):
            return expr.value
        if isinstance(expr, Num):
            return expr.value
        if isinstance(expr, Var):
            return self.state.bindings[expr.name]
        if isinstance(expr, ProblemRef):
            return self.problem
        if isinstance(expr, ListExpr):
            return [self._eval(item) for item in expr.items]
        if isinstance(expr, Index):
            return self.state.bindings[expr.name][expr.index]
        if isinstance(expr, PriorOr):
            if expr.name in self.state.bindings:
                return self.state.bindings[expr.name]
            return self._eval(expr.fallback)
        raise AssertionError(f"unknown expression {expr!r}")

    @staticmethod
    def _stringify(value: Value) -> str:
        if isinstance(value, list):
            return "\n".join(str(v) for v in value)
        return str(value)

    # --- rectification ---

    def _handle_rectification(self) -> TrajectoryOutcome | None:
        budget_arm = self.state.cumulative_cost_micro > self.cfg.cost_budget_micro
        failure_arm = self.state.failed
        reason = "failure" if failure_arm else "budget"

        while True:
            if self.rect_count >= self.cfg.max_rectifications:
                if failure_arm:
                    return self._finish_failed(
                        "RectificationsExhausted",
                        f"failure persisted after {self.rect_count} rectifications",
                    )
                return self._finish_failed(
                    "BudgetBreach",
                    f"cost {format_micro(self.state.cumulative_cost_micro)} above "
                    f"budget {format_micro(self.cfg.cost_budget_micro)} with no "
                    "rectifications left",
                )
            if self.env.team is None:
                return self._finish_failed("NoRectifier", "no meta-agent team wired in")

            error_log = self._error_log(budget_arm)
            request = RectificationRequest(
                workflow=self.versions[-1],
                error_log=error_log,
                state=self.state.snapshot(),
                attempt=self.rect_count,
                sample_tag=self.sample_tag,
            )
            self._event("rectification-triggered", {
                "reason": reason, "attempt": self.rect_count,
            })
            try:
                corrected = self.env.team.rectify(request, emit=self._emit_meta)
            except BudgetForbidden as exc:
                return self._finish_failed("BudgetForbidden", str(exc))
            except RectificationParseFailed as exc:
                self.rect_count += 1
                self._event("rectification-failed", {"error": str(exc)})
                continue
            self.rect_count += 1
            self.versions.append(corrected)
            old_program = self.resolved.program
            self.resolved = corrected.resolve()
            resume = self._resume_index(old_program, self.resolved.program)
            self._event("rectification-applied", {
                "version": len(self.versions) - 1,
                "resume_statement": resume,
            })
            if resume == 0:
                self.state.bindings = {}
            else:
                self.state.bindings = {
                    k: list(v) if isinstance(v, list) else v
                    for k, v in self.snapshots[resume].items()
                }
            self.pc = resume
            self.state.outcome_flag = Outcome.NOMINAL
            return None

    def _error_log(self, budget_arm: bool) -> str:
        if budget_arm and not self.state.failed:
            return (
                "BudgetBreach: cumulative execution cost "
                f"{format_micro(self.state.cumulative_cost_micro)} exceeded the "
                f"configured cost budget {format_micro(self.cfg.cost_budget_micro)}; "
                "execution paused for repair. Reduce the remaining work or route "
                "to cheaper backbones."
            )
        return format_events(self.state.events)[-self.cfg.error_log_tail:]

    def _resume_index(self, old: tuple[Statement, ...], new: tuple[Statement, ...]) -> int:
        """Earliest statement invalidated by the edit, capped at the
        interrupted statement; falls back to a full restart when the
        remaining program reads variables that no longer exist."""
        limit = min(len(old), len(new))
        first_diff = limit
        for i in range(limit):
            if old[i] != new[i]:
                first_diff = i
                break
        resume = min(first_diff, self.pc)
        if resume == 0:
            return 0
        available = set(self.snapshots.get(resume, {}))
        if self._reads_satisfied(new[resume:], available):
            return resume
        return 0

    def _reads_satisfied(self, stmts: tuple[Statement, ...], bound: set[str]) -> bool:
        bound = set(bound)

        def walk(seq: tuple[Statement, ...]) -> bool:
            for stmt in seq:
                if isinstance(stmt, Call):
                    for _, expr in stmt.args:
                        if not set(expr_vars(expr)) <= bound:
                            return False
                    bound.add(stmt.out)
                elif isinstance(stmt, ListInit):
                    bound.add(stmt.out)
                elif isinstance(stmt, Append):
                    if stmt.target not in bound:
                        return False
                    if not set(expr_vars(stmt.value)) <= bound:
                        return False
                elif isinstance(stmt, Loop):
                    if not walk(stmt.body):
                        return False
                elif isinstance(stmt, ForEachCall):
                    if stmt.source not in bound:
                        return False
                    bound.add(stmt.out)
                elif isinstance(stmt, Fallback):
                    if not set(expr_vars(stmt.value)) <= bound:
                        return False
                elif isinstance(stmt, Return):
                    if not set(expr_vars(stmt.value)) <= bound:
                        return False
            return True

        return walk(stmts)

    # --- terminal paths ---

    def _finish_with_answer(self, answer: str) -> TrajectoryOutcome:
        self._event("return", {"answer": answer[:2000]})
        try:
            ok = evaluate_judge(self.judge, answer, self.env.sandbox)
        except JudgeCommandFailure as exc:
            self._event("judge-command-failure", {"message": str(exc)})
            self._event("terminal", {"status": "failed", "reason": "JudgeCommandFailure"})
            return self._outcome(final_answer=None, success=False)
        self._event("judge", {"kind": self.judge.kind, "success": ok})
        self._event("terminal", {
            "status": "success" if ok else "wrong-answer",
            "reason": "Success" if ok else "WrongAnswer",
        })
        return self._outcome(final_answer=answer, success=ok)

    def _finish_failed(self, reason: str, message: str) -> TrajectoryOutcome:
        self._event("terminal", {"status": "failed", "reason": reason,
                                 "message": message})
        return self._outcome(final_answer=None, success=False)

    def _outcome(self, final_answer: str | None, success: bool) -> TrajectoryOutcome:
        return TrajectoryOutcome(
            final_answer=final_answer,
            success=success,
            total_cost_micro=self.state.cumulative_cost_micro,
            rectification_count=self.rect_count,
            events=tuple(self.state.events),
            workflow_versions=tuple(self.versions),
        )


def execute(
    workflow: InstantiatedWorkflow,
    problem: str,
    judge: Judge,
    cfg: MetaAgentConfig,
    env: ExecutionEnv,
    sample_tag: int = 0,
) -> TrajectoryOutcome:
    """Run one workflow to a terminal outcome under monitoring.

    ``sample_tag`` varies the rectifier's sampling seed so alternative
    repairs of the same failure can be drawn as separate trajectories.
    """
    return _Run(workflow, problem, judge, cfg, env, sample_tag).run()
