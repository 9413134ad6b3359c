"""The three meta-agent policies: generate, instantiate, rectify.

Each policy is a stateless prompt-assembly + completion + parse pipeline
over the gateway. The generator drafts workflow templates for a query,
the implementer fills backbone slots from the priced pool, and the
rectifier repairs a broken workflow from its error log. The repair
trigger fires on budget breach (strictly above the cost budget) or on
explicit failure.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Protocol

from .errors import MasforgeError, UnknownBackbone
from .gateway import Catalog, Gateway, SamplingParams
from .ir import (
    PLACEHOLDER,
    BackboneAssignment,
    InstantiatedWorkflow,
    NoGraphBlock,
    OperatorKind,
    ParseError,
    WorkflowTemplate,
    extract_graph_block,
    operator_arity,
    parse_template,
    serialize_template,
    to_dialect,
    workflow_to_dialect,
)

Emit = Callable[[str, dict], None]


def _no_emit(kind: str, detail: dict) -> None:
    return None


class MetaAgentError(MasforgeError):
    pass


class AllCandidatesInvalid(MetaAgentError):
    """No completion survived the parse/validate pipeline."""


class StructureTampered(MetaAgentError):
    """An implementer completion differs from the template beyond slots."""


class IncompleteSubstitution(MetaAgentError):
    def __init__(self, role_id: str):
        super().__init__(f"role {role_id!r} still holds the backbone placeholder")
        self.role_id = role_id


class RectificationParseFailed(MetaAgentError):
    """The rectifier's completion could not be turned into a workflow."""


class BudgetForbidden(MetaAgentError):
    """Budget already breached and policy forbids further spend."""


@dataclass(frozen=True)
class MetaAgentConfig:
    """Settings for the meta-agent team and the repair trigger."""

    generator_backbone: str = "qwen/qwen3-8b"
    implementer_backbone: str = "qwen/qwen3-8b"
    rectifier_backbone: str = "qwen/qwen3-8b"
    temperature: float = 0.8
    max_tokens: int = 2048
    branch_count: int = 4  # candidate templates per query
    variants_per_template: int = 2  # instantiations per template
    cost_budget_micro: int = 1_000_000  # repair trigger threshold
    max_rectifications: int = 2
    rectify_over_budget: bool = True
    rectifier_samples: int = 1  # >1 re-samples repairs for sibling branches
    max_loop_bound: int = 16
    error_log_tail: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.branch_count < 1:
            raise ValueError("branch_count must be at least 1")
        if self.variants_per_template < 1:
            raise ValueError("variants_per_template must be at least 1")
        if self.cost_budget_micro <= 0:
            raise ValueError("cost_budget_micro must be positive")
        if self.max_rectifications < 0:
            raise ValueError("max_rectifications must be non-negative")
        if self.rectifier_samples < 1:
            raise ValueError("rectifier_samples must be at least 1")


def budget_from_calibration(costs_micro: list[int], factor: int = 5) -> int:
    """Cost budget as a multiple of the mean cost of a calibration run."""
    if not costs_micro:
        raise ValueError("calibration needs at least one trajectory cost")
    return max(1, factor * sum(costs_micro) // len(costs_micro))


class _StateLike(Protocol):
    cumulative_cost_micro: int
    failed: bool


def should_rectify(state: _StateLike, cost_budget_micro: int) -> bool:
    """Repair trigger: cost strictly above budget, or explicit failure."""
    return state.cumulative_cost_micro > cost_budget_micro or state.failed


@dataclass
class RectificationRequest:
    """Everything the rectifier prompt needs, plus the live workflow."""

    workflow: InstantiatedWorkflow
    error_log: str
    state: dict
    template_guide: str | None = None
    attempt: int = 0
    sample_tag: int = 0

    @property
    def broken_workflow(self) -> str:
        return workflow_to_dialect(self.workflow)


def _load_prompt(name: str) -> str:
    return resources.files("masforge").joinpath(f"prompts/{name}.txt").read_text(
        encoding="utf-8"
    )


def _derive_seed(base: int, *parts) -> int:
    key = ":".join([str(base), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "big")


def _mask_slots(template: WorkflowTemplate) -> WorkflowTemplate:
    return template.with_backbones({r.id: "__slot__" for r in template.slot_roles()})


def parse_assignment(
    response: str, template: WorkflowTemplate, catalog: Catalog
) -> BackboneAssignment:
    """Extract the backbone assignment from an implementer completion.

    The completion must re-state the template exactly, with every slot
    replaced by a catalog backbone id. Any other difference — including
    completions that no longer parse — is tampering.
    """
    try:
        source = extract_graph_block(response)
        parsed = parse_template(source)
    except (NoGraphBlock, ParseError) as exc:
        raise StructureTampered(f"completion does not parse as a workflow: {exc}") from exc
    if serialize_template(_mask_slots(parsed)) != serialize_template(_mask_slots(template)):
        raise StructureTampered(
            "completion differs from the template beyond backbone slots"
        )
    mapping: dict[str, str] = {}
    for role in parsed.slot_roles():
        if role.backbone == PLACEHOLDER:
            raise IncompleteSubstitution(role.id)
        if role.backbone not in catalog:
            raise UnknownBackbone(role.backbone)
        mapping[role.id] = role.backbone
    return BackboneAssignment.of(mapping)


_OPERATOR_BLURBS = {
    OperatorKind.CUSTOM: "Produces text from an instruction.",
    OperatorKind.ANSWER_GENERATE: "Generates a concise final answer from evidence.",
    OperatorKind.CUSTOM_CODE_GENERATE: "Generates code.",
    OperatorKind.PROGRAMMER: "Produces a program-backed solution from an analysis.",
    OperatorKind.REVIEW: "Critiques and refines a solution.",
    OperatorKind.SC_ENSEMBLE: "Selects the best solution from a list.",
    OperatorKind.TEST: "Modifies a solution using test cases.",
    OperatorKind.SEARCH: "Retrieves scored document references for a query.",
    OperatorKind.BROWSER: "Fetches a document body by id.",
    OperatorKind.TOOL: "Runs a named sandboxed tool on its input.",
}

_PARAM_TYPES = {"text": "str", "text_list": "List[str]", "int": "int"}


def operator_guide(kinds: list[OperatorKind]) -> str:
    """Numbered operator format guide for the rectifier prompt."""
    lines = []
    for i, kind in enumerate(dict.fromkeys(kinds), 1):
        sig = ", ".join(
            f"{p.name}: {_PARAM_TYPES[p.type]}" for p in operator_arity(kind)
        )
        lines.append(f"{i}.  **{kind.value}**: {_OPERATOR_BLURBS[kind]}")
        lines.append(f"    - **Format**: `{kind.value.lower()}({sig}) -> str`")
    return "\n".join(lines)


class MetaAgentTeam:
    """Generator, implementer, and rectifier over one gateway and pool.

    ``pool`` is the list of backbone ids offered to the implementer;
    it defaults to the full catalog. All three policies are pure
    pipelines, so one team instance may serve concurrent callers.
    """

    def __init__(
        self,
        cfg: MetaAgentConfig,
        gateway: Gateway,
        pool: list[str] | None = None,
    ):
        self.cfg = cfg
        self.gateway = gateway
        self.catalog = gateway.catalog
        self.pool = list(pool) if pool is not None else list(self.catalog.ids())
        self._generator_prompt = _load_prompt("generator")
        self._implementer_prompt = _load_prompt("implementer")
        self._rectifier_prompt = _load_prompt("rectifier")

    # --- generator ---

    def generate_templates(
        self, query: str, k: int | None = None, emit: Emit = _no_emit
    ) -> list[WorkflowTemplate]:
        k = self.cfg.branch_count if k is None else k
        if k < 1:
            raise ValueError("k must be at least 1")
        prompt = self._generator_prompt.replace("{problem}", query)
        out: list[WorkflowTemplate] = []
        seen: set[str] = set()
        for branch in range(k):
            template = None
            for attempt in range(2):
                seed = _derive_seed(self.cfg.seed, "generator", branch, attempt)
                text = self._complete(self.cfg.generator_backbone, prompt, seed, emit,
                                      agent="generator")
                try:
                    template = parse_template(
                        extract_graph_block(text), self.cfg.max_loop_bound
                    )
                    break
                except (NoGraphBlock, ParseError) as exc:
                    emit("candidate-dropped", {
                        "agent": "generator", "branch": branch, "attempt": attempt,
                        "reason": str(exc),
                    })
            if template is None:
                continue
            key = serialize_template(template)
            if key in seen:
                emit("duplicate-template", {"branch": branch})
                continue
            seen.add(key)
            out.append(template)
        if not out:
            raise AllCandidatesInvalid(
                f"no valid workflow template in {k} generator branches"
            )
        return out

    # --- implementer ---

    def instantiate(
        self,
        template: WorkflowTemplate,
        n: int | None = None,
        emit: Emit = _no_emit,
    ) -> list[InstantiatedWorkflow]:
        n = self.cfg.variants_per_template if n is None else n
        if n < 1:
            raise ValueError("n must be at least 1")
        if not self.pool:
            raise MetaAgentError("backbone pool is empty")
        cards = [self.catalog.get(bid) for bid in self.pool]
        prompt = (
            self._implementer_prompt
            .replace("{available_llms}", "\n".join(f"- **{c.id}**" for c in cards))
            .replace("{catalog}",
                     "\n".join(f"- **{c.id}**: {c.description}" for c in cards))
            .replace("{workflow_code}", to_dialect(template).rstrip("\n"))
        )
        out: list[InstantiatedWorkflow] = []
        for variant in range(n):
            for attempt in range(2):
                seed = _derive_seed(self.cfg.seed, "implementer", variant, attempt,
                                    serialize_template(template))
                text = self._complete(self.cfg.implementer_backbone, prompt, seed, emit,
                                      agent="implementer")
                try:
                    assignment = parse_assignment(text, template, self.catalog)
                except (StructureTampered, IncompleteSubstitution, UnknownBackbone) as exc:
                    emit("candidate-dropped", {
                        "agent": "implementer", "variant": variant, "attempt": attempt,
                        "reason": str(exc),
                    })
                    continue
                out.append(InstantiatedWorkflow(template, assignment))
                break
        if not out:
            raise AllCandidatesInvalid(
                f"no valid instantiation in {n} implementer variants"
            )
        return out

    # --- rectifier ---

    def rectify(self, req: RectificationRequest, emit: Emit = _no_emit) -> InstantiatedWorkflow:
        """One repair attempt; returns the corrected workflow.

        The corrected program may restructure the workflow (drop calls,
        add fallbacks). Slots left as the placeholder inherit the
        current assignment; concrete slots may re-route to any catalog
        backbone.
        """
        cost = int(req.state.get("cumulative_cost_micro", 0))
        if cost > self.cfg.cost_budget_micro and not self.cfg.rectify_over_budget:
            raise BudgetForbidden(
                f"cost {cost} already above budget {self.cfg.cost_budget_micro} "
                "and over-budget repair is disabled"
            )
        template = req.workflow.template
        guide = req.template_guide or to_dialect(template).rstrip("\n")
        prompt = (
            self._rectifier_prompt
            .replace("{template_guide}", guide)
            .replace("{operator_guide}", operator_guide([r.kind for r in template.roles]))
            .replace("{broken_workflow}", req.broken_workflow.rstrip("\n"))
            .replace("{error_log}", req.error_log[-self.cfg.error_log_tail:])
        )
        seed = _derive_seed(self.cfg.seed, "rectifier", req.attempt, req.sample_tag)
        text = self._complete(self.cfg.rectifier_backbone, prompt, seed, emit,
                              agent="rectifier")
        try:
            parsed = parse_template(extract_graph_block(text), self.cfg.max_loop_bound)
        except (NoGraphBlock, ParseError) as exc:
            raise RectificationParseFailed(str(exc)) from exc

        prior = req.workflow.assignment.as_dict()
        mapping: dict[str, str] = {}
        for role in parsed.slot_roles():
            if role.backbone == PLACEHOLDER:
                if role.id not in prior:
                    raise RectificationParseFailed(
                        f"new role {role.id!r} has a placeholder slot and no prior backbone"
                    )
                mapping[role.id] = prior[role.id]
            else:
                if role.backbone not in self.catalog:
                    raise RectificationParseFailed(
                        f"rectified workflow names unknown backbone {role.backbone!r}"
                    )
                mapping[role.id] = role.backbone
        return InstantiatedWorkflow(parsed, BackboneAssignment.of(mapping))

    # --- shared ---

    def _complete(self, backbone_id: str, prompt: str, seed: int, emit: Emit,
                  agent: str) -> str:
        params = SamplingParams(
            temperature=self.cfg.temperature, max_tokens=self.cfg.max_tokens, seed=seed
        )
        exchange = self.gateway.complete(
            backbone_id, [{"role": "user", "content": prompt}], params
        )
        emit("meta-exchange", {
            "agent": agent,
            "backbone": backbone_id,
            "cost_micro": exchange.cost_micro,
            "prompt_tokens": exchange.prompt_tokens,
            "completion_tokens": exchange.completion_tokens,
        })
        return exchange.response_text

