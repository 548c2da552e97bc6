"""Department knowledge bases and the guidance rule engine.

Two guidance products come out of here: a free-text inquiry-guidance block
that steers what gets asked next, and structured classification directives
(recommend / exclude / versus) that steer the routing decision when the
candidate set is ambiguous. Both are pure functions of immutable inputs, so
two loads of the same KB directory produce identical output for identical
arguments.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .domain import HPI, DepartmentRef, DepartmentTaxonomy, resolve_department
from .errors import KBError, UnknownDepartment

logger = logging.getLogger(__name__)

PATTERN_KINDS = ("substring", "regex")


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that tags every mapping with its source line."""

    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping["__line__"] = node.start_mark.line + 1
        return mapping


def _line(entry, default="?"):
    if isinstance(entry, dict):
        return entry.get("__line__", default)
    return default


@dataclass(frozen=True)
class TextPattern:
    """A substring or regex matcher against clinical free text."""

    pattern: str
    kind: str = "substring"

    def __post_init__(self) -> None:
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"pattern kind must be one of {PATTERN_KINDS}")
        if self.kind == "regex":
            object.__setattr__(self, "_compiled", re.compile(self.pattern, re.IGNORECASE))

    def matches(self, text: str) -> bool:
        if self.kind == "substring":
            return self.pattern.casefold() in text.casefold()
        return bool(getattr(self, "_compiled").search(text))


@dataclass(frozen=True)
class ExclusionRule:
    target_department: DepartmentRef
    probe: str


@dataclass(frozen=True)
class DifferentiationProbe:
    pair: tuple[DepartmentRef, DepartmentRef]
    probe: str


@dataclass(frozen=True)
class InquiryKBEntry:
    department: DepartmentRef
    core_inquiry: tuple[str, ...] = ()
    avoid_detail: tuple[TextPattern, ...] = ()
    exclusion_rules: tuple[ExclusionRule, ...] = ()
    secondary_differentiation: tuple[DifferentiationProbe, ...] = ()


@dataclass(frozen=True)
class ComparisonRule:
    """A prioritized pairwise classification rule: when the condition holds,
    the verdict department wins the pair."""

    dept_a: DepartmentRef
    dept_b: DepartmentRef
    require: frozenset[str]
    forbid: frozenset[str]
    verdict: DepartmentRef
    priority: int
    note: str = ""
    order: int = 0  # position in KB load order; tie-break after priority

    def __post_init__(self) -> None:
        if self.dept_a == self.dept_b:
            raise ValueError("comparison rule must name two distinct departments")
        if self.verdict not in (self.dept_a, self.dept_b):
            raise ValueError("verdict must be one of the compared departments")

    def pair_key(self) -> frozenset[DepartmentRef]:
        return frozenset((self.dept_a, self.dept_b))

    def condition_key(self) -> tuple[frozenset[str], frozenset[str]]:
        return (self.require, self.forbid)

    def satisfied_by(self, findings: frozenset[str]) -> bool:
        return self.require <= findings and not (self.forbid & findings)

    def loser(self) -> DepartmentRef:
        return self.dept_b if self.verdict == self.dept_a else self.dept_a


@dataclass(frozen=True)
class Directive:
    kind: str  # exclude | versus | recommend
    department: DepartmentRef
    reason: str


@dataclass(frozen=True)
class GuidanceDirectives:
    directives: tuple[Directive, ...] = ()
    rendered: str = ""

    def excluded(self) -> tuple[DepartmentRef, ...]:
        return tuple(d.department for d in self.directives if d.kind == "exclude")

    def recommended(self) -> tuple[DepartmentRef, ...]:
        return tuple(d.department for d in self.directives if d.kind == "recommend")

    @classmethod
    def empty(cls) -> "GuidanceDirectives":
        return cls()


EMPTY_DIRECTIVES = GuidanceDirectives()


@dataclass(frozen=True)
class KBSet:
    """Everything loaded from one KB directory: per-department inquiry
    entries, the flat prioritized comparison-rule list, and the finding
    pattern table that bridges free text to rule conditions."""

    inquiry: Mapping[DepartmentRef, InquiryKBEntry]
    classification: tuple[ComparisonRule, ...]
    findings: Mapping[str, tuple[TextPattern, ...]]

    @classmethod
    def empty(cls) -> "KBSet":
        return cls(inquiry={}, classification=(), findings={})


def _parse_patterns(raw, where: str) -> tuple[TextPattern, ...]:
    patterns = []
    for i, item in enumerate(raw or []):
        if isinstance(item, str):
            patterns.append(TextPattern(item))
            continue
        if not isinstance(item, dict) or "pattern" not in item:
            raise KBError(f"{where}[{i}]: expected a pattern string or {{pattern, kind}}")
        kind = item.get("kind", "substring")
        try:
            patterns.append(TextPattern(str(item["pattern"]), kind))
        except (ValueError, re.error) as exc:
            raise KBError(f"{where}[{i}] (line {_line(item)}): {exc}") from exc
    return tuple(patterns)


def _resolve(name, taxonomy: DepartmentTaxonomy, where: str) -> DepartmentRef:
    try:
        return resolve_department(str(name), taxonomy)
    except UnknownDepartment as exc:
        raise KBError(f"{where}: {exc}") from exc


def _load_kb_file(path: Path, taxonomy: DepartmentTaxonomy, order_start: int):
    try:
        raw = yaml.load(path.read_text(encoding="utf-8"), Loader=_LineLoader)
    except yaml.YAMLError as exc:
        raise KBError(f"{path}: not valid YAML: {exc}") from exc
    if raw is None:
        return None, [], {}, order_start
    if not isinstance(raw, dict) or "department" not in raw:
        raise KBError(f"{path}: expected a mapping with a 'department' key")

    dept = _resolve(raw["department"], taxonomy, f"{path}: department (line {_line(raw)})")

    core = tuple(str(x) for x in raw.get("core_inquiry") or [])
    avoid = _parse_patterns(raw.get("avoid_detail"), f"{path}: avoid_detail")

    exclusions = []
    for i, item in enumerate(raw.get("exclusion_rules") or []):
        where = f"{path}: exclusion_rules[{i}] (line {_line(item)})"
        if not isinstance(item, dict) or "target_department" not in item or "probe" not in item:
            raise KBError(f"{where}: expected {{target_department, probe}}")
        exclusions.append(
            ExclusionRule(_resolve(item["target_department"], taxonomy, where), str(item["probe"]))
        )

    differentiation = []
    for i, item in enumerate(raw.get("secondary_differentiation") or []):
        where = f"{path}: secondary_differentiation[{i}] (line {_line(item)})"
        pair = item.get("pair") if isinstance(item, dict) else None
        if not isinstance(item, dict) or not isinstance(pair, list) or len(pair) != 2 or "probe" not in item:
            raise KBError(f"{where}: expected {{pair: [a, b], probe}}")
        differentiation.append(
            DifferentiationProbe(
                (_resolve(pair[0], taxonomy, where), _resolve(pair[1], taxonomy, where)),
                str(item["probe"]),
            )
        )

    findings: dict[str, tuple[TextPattern, ...]] = {}
    raw_findings = raw.get("findings") or {}
    if not isinstance(raw_findings, dict):
        raise KBError(f"{path}: findings must map tag -> pattern list")
    for tag, patterns in raw_findings.items():
        if tag == "__line__":
            continue
        findings[str(tag)] = _parse_patterns(patterns, f"{path}: findings[{tag}]")

    rules = []
    order = order_start
    for i, item in enumerate(raw.get("comparison_rules") or []):
        where = f"{path}: comparison_rules[{i}] (line {_line(item)})"
        if not isinstance(item, dict):
            raise KBError(f"{where}: expected a mapping")
        required_keys = {"dept_a", "dept_b", "verdict"}
        if not required_keys <= set(item):
            raise KBError(f"{where}: requires keys {sorted(required_keys)}")
        try:
            rule = ComparisonRule(
                dept_a=_resolve(item["dept_a"], taxonomy, where),
                dept_b=_resolve(item["dept_b"], taxonomy, where),
                require=frozenset(str(t) for t in item.get("require") or []),
                forbid=frozenset(str(t) for t in item.get("forbid") or []),
                verdict=_resolve(item["verdict"], taxonomy, where),
                priority=int(item.get("priority", 0)),
                note=str(item.get("note", "")),
                order=order,
            )
        except ValueError as exc:
            raise KBError(f"{where}: {exc}") from exc
        rules.append((rule, where))
        order += 1

    entry = InquiryKBEntry(
        department=dept,
        core_inquiry=core,
        avoid_detail=avoid,
        exclusion_rules=tuple(exclusions),
        secondary_differentiation=tuple(differentiation),
    )
    return entry, rules, findings, order


def load_kbs(kb_dir: str | Path, taxonomy: DepartmentTaxonomy) -> KBSet:
    """Load every ``*.yaml`` KB file under ``kb_dir`` (sorted by filename so
    rule order is reproducible) and validate the whole set against the
    taxonomy. An empty directory yields an empty, usable KBSet."""
    kb_dir = Path(kb_dir)
    inquiry: dict[DepartmentRef, InquiryKBEntry] = {}
    classification: list[ComparisonRule] = []
    findings: dict[str, tuple[TextPattern, ...]] = {}
    seen_rules: dict[tuple, str] = {}
    order = 0
    for path in sorted(kb_dir.glob("*.yaml")) + sorted(kb_dir.glob("*.yml")):
        entry, rules, file_findings, order = _load_kb_file(path, taxonomy, order)
        if entry is None:
            continue
        if entry.department in inquiry:
            raise KBError(f"{path}: duplicate KB entry for {entry.department.display()}")
        inquiry[entry.department] = entry
        for rule, where in rules:
            key = (rule.pair_key(), rule.condition_key())
            if key in seen_rules:
                raise KBError(f"{where}: duplicate rule (same pair and condition as {seen_rules[key]})")
            seen_rules[key] = where
            classification.append(rule)
        for tag, patterns in file_findings.items():
            findings[tag] = findings.get(tag, ()) + patterns
    return KBSet(inquiry=inquiry, classification=tuple(classification), findings=findings)


def default_kb_dir() -> Path:
    return Path(str(importlib_resources.files("triage") / "data" / "kb"))


def load_default_kbs(taxonomy: DepartmentTaxonomy) -> KBSet:
    return load_kbs(default_kb_dir(), taxonomy)


def _entry_for(ref: DepartmentRef, kbs: KBSet) -> InquiryKBEntry | None:
    entry = kbs.inquiry.get(ref)
    if entry is None and ref.secondary is not None:
        entry = kbs.inquiry.get(ref.primary_only())
    return entry


def _pair_matches(
    pair: tuple[DepartmentRef, DepartmentRef], a: DepartmentRef, b: DepartmentRef
) -> bool:
    x, y = pair
    return (x.covers(a) and y.covers(b)) or (x.covers(b) and y.covers(a))


def _orient(
    rule: ComparisonRule, a: DepartmentRef, b: DepartmentRef
) -> tuple[DepartmentRef, DepartmentRef]:
    """Map the rule's verdict onto the concrete candidate pair, returning
    (winner, loser) in candidate terms."""
    if rule.dept_a.covers(a) and rule.dept_b.covers(b):
        return (a, b) if rule.verdict == rule.dept_a else (b, a)
    return (b, a) if rule.verdict == rule.dept_a else (a, b)


def inquiry_guidance_for(
    current: DepartmentRef,
    candidates: Sequence[DepartmentRef],
    kbs: KBSet,
) -> str:
    """Render the question-steering block for the current decision: the
    current department's core inquiry and bans, exclusion probes aimed at the
    candidates, and differentiation probes for candidate pairs. Empty text
    when nothing applies."""
    lines: list[str] = []
    entry = _entry_for(current, kbs)
    if entry is not None:
        if entry.core_inquiry:
            lines.append("Core inquiry focus:")
            lines.extend(f"- {q}" for q in entry.core_inquiry)
        if entry.avoid_detail:
            lines.append("Avoid detail entanglement; do not ask about:")
            lines.extend(f"- {p.pattern}" for p in entry.avoid_detail)
        relevant = [
            rule
            for rule in entry.exclusion_rules
            if any(rule.target_department.covers(c) or c.covers(rule.target_department) for c in candidates)
        ]
        if relevant:
            lines.append("Rule out:")
            lines.extend(
                f"- {r.target_department.display()}: {r.probe}" for r in relevant
            )
    probes: list[str] = []
    seen_pairs: set[frozenset] = set()
    candidate_list = list(candidates)
    for i, a in enumerate(candidate_list):
        for b in candidate_list[i + 1 :]:
            pair_id = frozenset((a, b))
            if pair_id in seen_pairs:
                continue
            seen_pairs.add(pair_id)
            for ref in sorted(kbs.inquiry):
                for diff in kbs.inquiry[ref].secondary_differentiation:
                    if _pair_matches(diff.pair, a, b):
                        probes.append(
                            f"- {a.display()} vs {b.display()}: {diff.probe}"
                        )
    if probes:
        lines.append("Differentiate candidates:")
        lines.extend(probes)
    return "\n".join(lines)


def avoid_patterns_for(current: DepartmentRef, kbs: KBSet) -> tuple[TextPattern, ...]:
    entry = _entry_for(current, kbs)
    return entry.avoid_detail if entry is not None else ()


def render_directives(directives: Iterable[Directive]) -> str:
    lines = []
    for d in directives:
        lines.append(f"- {d.kind.upper()} {d.department.display()}: {d.reason}")
    return "\n".join(lines)


def classification_guidance_for(
    findings: Iterable[str],
    candidates: Sequence[DepartmentRef],
    kbs: KBSet,
) -> GuidanceDirectives:
    """Evaluate every comparison rule applicable to the candidate pairs.

    A satisfied rule emits exclude(loser) then recommend(verdict); directives
    are ordered by descending priority, ties broken by KB load order. A pair
    that has rules none of which fire yields a single versus directive, after
    all fired ones, signalling unresolved differentiation.
    """
    candidate_list = list(candidates)
    if len(candidate_list) < 2:
        return EMPTY_DIRECTIVES
    finding_set = frozenset(findings)
    decided: list[tuple[ComparisonRule, DepartmentRef, DepartmentRef]] = []
    unresolved: list[tuple[DepartmentRef, DepartmentRef]] = []
    seen_pairs: set[frozenset] = set()
    for i, a in enumerate(candidate_list):
        for b in candidate_list[i + 1 :]:
            pair_id = frozenset((a, b))
            if pair_id in seen_pairs:
                continue
            seen_pairs.add(pair_id)
            pair_rules = [
                r for r in kbs.classification if _pair_matches((r.dept_a, r.dept_b), a, b)
            ]
            if not pair_rules:
                continue
            pair_fired = sorted(
                (r for r in pair_rules if r.satisfied_by(finding_set)),
                key=lambda r: (-r.priority, r.order),
            )
            if not pair_fired:
                unresolved.append((a, b))
                continue
            top = pair_fired[0]
            winner, loser = _orient(top, a, b)
            for other in pair_fired[1:]:
                if other.priority != top.priority:
                    break
                if _orient(other, a, b)[0] != winner:
                    logger.warning(
                        "conflicting comparison rules at priority %d for %s vs %s; "
                        "keeping the earlier-loaded verdict %s",
                        top.priority,
                        a.display(),
                        b.display(),
                        winner.display(),
                    )
            decided.append((top, winner, loser))
    decided.sort(key=lambda item: (-item[0].priority, item[0].order))
    directives: list[Directive] = []
    emitted: set[tuple[str, DepartmentRef]] = set()
    for rule, winner, loser in decided:
        reason = rule.note or (
            f"findings {sorted(rule.require)} favour {winner.display()}"
        )
        for kind, dept in (("exclude", loser), ("recommend", winner)):
            key = (kind, dept)
            if key in emitted:
                continue
            emitted.add(key)
            directives.append(Directive(kind, dept, reason))
    for a, b in unresolved:
        directives.append(
            Directive(
                "versus",
                b,
                f"differentiation between {a.display()} and {b.display()} is "
                "unresolved; ask a distinguishing question",
            )
        )
    if not directives:
        return EMPTY_DIRECTIVES
    return GuidanceDirectives(tuple(directives), render_directives(directives))


def extract_findings(hpi: HPI, kbs: KBSet) -> frozenset[str]:
    """Match the KB-declared finding patterns against the HPI text."""
    text = hpi.full_text()
    if not text.strip():
        return frozenset()
    return frozenset(
        tag
        for tag, patterns in kbs.findings.items()
        if any(p.matches(text) for p in patterns)
    )
