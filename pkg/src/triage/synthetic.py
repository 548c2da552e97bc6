"""Deterministic stand-in provider for recording scripted fixtures.

The responder implements the gateway Backend protocol and answers every
agent prompt with rule-based, fully deterministic replies that honour each
agent's output contract (and follow guidance directives the way a
well-behaved model would). Wrapping it in a RecordingBackend yields fixture
files that the scripted backend can replay byte-identically, which is how
the test suite and the demo pipeline run whole sessions without a provider.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .agents import TemplateSet, token_jaccard
from .domain import (
    DepartmentRef,
    DepartmentTaxonomy,
    PatientRecord,
    resolve_department,
)
from .errors import UnknownDepartment
from .llm_gateway import ChatExchange, CompletionResult, RecordingBackend
from .orchestrator import Resources, SessionConfig, SessionTrace, run_batch

_SECTION_RE_TEMPLATE = r"^### {header}\n(.*?)(?=\n### |\Z)"

_STOPWORDS = frozenset(
    """a an and are as at been before by did do does during for had has have how
    i in is it its make makes me my of on or that the there this to was were
    what when with you your any such""".split()
)

GENERIC_QUESTIONS = (
    "How long has this been going on, and did it come on suddenly or gradually?",
    "Do you have any other symptoms along with it, such as fever, nausea, or changes in your vision?",
    "Do you have any relevant medical history, such as hypertension, diabetes, or a similar episode before?",
    "Did anything happen before it started, such as a fall, an injury, or unusual exertion?",
    "Does anything make it better or worse, for example rest, food, or movement?",
)

# Wrong-but-plausible first guesses: the classic confusable sibling when one
# exists, so classification guidance has something to resolve.
_CONFUSABLE = {
    "Gastroenterology": "General Surgery",
    "General Surgery": "Gastroenterology",
    "Neurology": "Neurosurgery",
    "Neurosurgery": "Neurology",
    "Obstetrics": "Gynecology",
    "Gynecology": "Obstetrics",
    "Neonatology": "General Pediatrics",
    "General Pediatrics": "Neonatology",
}

_KEYWORD_DEPARTMENTS = (
    ("headache", "Neurology"),
    ("chest pain", "Cardiology"),
    ("cough", "Respiratory Medicine"),
    ("stomach", "Gastroenterology"),
    ("abdominal", "Gastroenterology"),
    ("urinat", "Urology"),
    ("rash", "Dermatology"),
    ("eye", "Ophthalmology"),
    ("ear", "Otorhinolaryngology"),
    ("tooth", "Stomatology"),
    ("sleep", "Psychiatry"),
    ("mood", "Psychiatry"),
    ("pregnan", "Obstetrics"),
    ("newborn", "Neonatology"),
    ("child", "General Pediatrics"),
    ("fracture", "Orthopedics"),
    ("lump", "Medical Oncology"),
)


def _section(text: str, header: str) -> str:
    match = re.search(
        _SECTION_RE_TEMPLATE.format(header=re.escape(header)),
        text,
        re.DOTALL | re.MULTILINE,
    )
    if not match:
        return ""
    value = match.group(1).strip()
    return "" if value == "(none)" else value


def _stable_int(key: str) -> int:
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "big")


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"[.;\n]+", text) if s.strip()]


def _content_tokens(text: str) -> frozenset[str]:
    return frozenset(
        t for t in re.findall(r"\w+", text.casefold()) if t not in _STOPWORDS
    )


def _fenced(payload: Mapping) -> str:
    return "```json\n" + json.dumps(payload, ensure_ascii=False, sort_keys=True) + "\n```"


def _display_to_name(display: str) -> str:
    # "Primary / Secondary" -> secondary name; bare primary stays as-is
    return display.split(" / ", 1)[1] if " / " in display else display


@dataclass(frozen=True)
class ResponderPolicy:
    """How the simulated decision-maker behaves across rounds.

    ``challenging`` forces the first-round guess wrong and the final round
    right for every session, which is exactly the shape the
    challenging-yet-solvable ablation set needs.
    """

    rounds: int = 4
    challenging: bool = False

    def correct_from(self, session_id: str) -> int:
        if self.challenging:
            return self.rounds
        return 1 + (_stable_int(session_id) % self.rounds)


class SyntheticResponder:
    """Deterministic rule-based replies for all six agent prompts."""

    def __init__(
        self,
        taxonomy: DepartmentTaxonomy,
        records: Mapping[str, PatientRecord] | None = None,
        policy: ResponderPolicy = ResponderPolicy(),
    ) -> None:
        self.taxonomy = taxonomy
        self.records = dict(records or {})
        self.policy = policy

    # -- Backend protocol ------------------------------------------------

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        user = exchange.messages[1].content
        handler = {
            "patient": self._patient,
            "recipient": self._recipient,
            "department": self._department,
            "inquirer": self._inquirer,
            "evaluator": self._evaluator,
            "imputer": self._imputer,
        }[exchange.agent_tag]
        return CompletionResult(text=handler(exchange, user), attempt=1)

    # -- patient ----------------------------------------------------------

    def _patient(self, exchange: ChatExchange, user: str) -> str:
        record = json.loads(_section(user, "Health record"))
        round_ = int(_section(user, "Round") or "1")
        question = _section(user, "Question")
        if round_ == 1 or not question:
            return _fenced({"reply": record["chief_complaint"]})
        pool = _sentences(record.get("present_illness", "")) + _sentences(
            record.get("history", "") or ""
        )
        q_tokens = _content_tokens(question)
        best_sentence = ""
        best_overlap = 0
        for sentence in pool:
            overlap = len(q_tokens & _content_tokens(sentence))
            if overlap > best_overlap:
                best_overlap = overlap
                best_sentence = sentence
        if best_overlap == 0:
            return _fenced({"reply": "I'm not sure about that."})
        return _fenced({"reply": best_sentence + "."})

    # -- recipient ----------------------------------------------------------

    def _recipient(self, exchange: ChatExchange, user: str) -> str:
        description = _section(user, "Patient description")
        prev_raw = _section(user, "Current structured record")
        prev = json.loads(prev_raw) if prev_raw else None
        prev_sections = (prev or {}).get("sections", {})

        sections = {k: v for k, v in prev_sections.items() if v}
        if not sections.get("chief_complaint"):
            sections["chief_complaint"] = description
        lowered = description.casefold()
        duration = re.search(
            r"\b(?:for\s+|since\s+)?((?:\d+|a|an|one|two|three|four|five|six|seven|eight|nine|ten)"
            r"\s*(?:hour|day|week|month|year)s?)\b",
            lowered,
        )
        if duration and not sections.get("duration"):
            sections["duration"] = duration.group(1)
        if "sudden" in lowered and not sections.get("onset"):
            sections["onset"] = "sudden"
        elif "gradual" in lowered and not sections.get("onset"):
            sections["onset"] = "gradual"
        if re.search(r"\b(no|denies|not|without|never)\b", lowered):
            existing = sections.get("negatives", "")
            if description not in existing:
                sections["negatives"] = (existing + "; " + description).strip("; ")
        if re.search(r"history|hypertension|diabetes|gastritis|surgery before", lowered):
            existing = sections.get("relevant_history", "")
            if description not in existing:
                sections["relevant_history"] = (existing + "; " + description).strip("; ")
        if prev is not None and sections.get("chief_complaint") != description:
            existing = sections.get("associated_symptoms", "")
            if description not in existing:
                sections["associated_symptoms"] = (existing + "; " + description).strip("; ")

        narrative = (prev or {}).get("narrative", "")
        narrative = (narrative + " " + description).strip() if narrative else description
        return _fenced(
            {
                "narrative": narrative,
                "sections": sections,
                "new_facts": _sentences(description),
                "superseded": [],
            }
        )

    # -- department ----------------------------------------------------------

    def _resolve(self, name: str) -> DepartmentRef | None:
        try:
            return resolve_department(name, self.taxonomy)
        except UnknownDepartment:
            return None

    def _guidance_directives(self, guidance: str) -> tuple[list[str], list[str]]:
        recommended, excluded = [], []
        for line in guidance.splitlines():
            match = re.match(r"- (RECOMMEND|EXCLUDE) (.+?): ", line)
            if not match:
                continue
            name = _display_to_name(match.group(2))
            if match.group(1) == "RECOMMEND":
                recommended.append(name)
            else:
                excluded.append(name)
        return recommended, excluded

    def _detour(self, truth: DepartmentRef, excluded: Sequence[str]) -> DepartmentRef:
        sibling = _CONFUSABLE.get(truth.secondary or "")
        if sibling and sibling not in excluded:
            ref = self._resolve(sibling)
            if ref is not None and ref != truth:
                return ref
        primaries = self.taxonomy.primaries
        index = next(
            (i for i, p in enumerate(primaries) if p.name == truth.primary), 0
        )
        for step in range(1, len(primaries) + 1):
            dept = primaries[(index + step) % len(primaries)]
            name = dept.secondaries[0] if dept.secondaries else dept.name
            if name not in excluded:
                ref = self._resolve(name)
                if ref is not None and ref != truth:
                    return ref
        return truth

    def _keyword_department(self, text: str) -> DepartmentRef:
        lowered = text.casefold()
        for keyword, name in _KEYWORD_DEPARTMENTS:
            if keyword in lowered:
                ref = self._resolve(name)
                if ref is not None:
                    return ref
        ref = self._resolve("General Internal Medicine")
        if ref is not None:
            return ref
        first = self.taxonomy.primaries[0]
        return resolve_department(
            first.secondaries[0] if first.secondaries else first.name, self.taxonomy
        )

    def _department(self, exchange: ChatExchange, user: str) -> str:
        guidance = _section(user, "Guidance")
        recommended, excluded = self._guidance_directives(guidance)
        record = self.records.get(exchange.session_id)

        def reply(best: DepartmentRef, candidates: list[DepartmentRef], why: str) -> str:
            names = [c.secondary or c.primary for c in candidates]
            return _fenced(
                {
                    "best": best.secondary or best.primary,
                    "ambiguous": bool(names),
                    "candidates": names,
                    "rationale": why,
                }
            )

        for name in recommended:
            if name in excluded:
                continue
            ref = self._resolve(name)
            if ref is not None:
                return reply(ref, [], f"Guidance resolves the differential toward {name}.")

        if record is not None:
            truth = record.truth
            correct_from = self.policy.correct_from(exchange.session_id)
            truth_name = truth.secondary or truth.primary
            if exchange.round >= correct_from and truth_name not in excluded:
                return reply(truth, [], "The accumulated record fits this department best.")
            detour = self._detour(truth, excluded)
            if detour == truth:
                return reply(truth, [], "The accumulated record fits this department best.")
            return reply(
                detour,
                [detour, truth],
                "Presentation is compatible with more than one department at this point.",
            )

        hpi_text = _section(user, "Structured record")
        best = self._keyword_department(hpi_text)
        banned = {n for n in excluded}
        if (best.secondary or best.primary) in banned:
            best = self._detour(best, excluded)
        sibling = _CONFUSABLE.get(best.secondary or "")
        if exchange.round == 1 and sibling and sibling not in banned:
            sibling_ref = self._resolve(sibling)
            if sibling_ref is not None:
                return reply(
                    best,
                    [best, sibling_ref],
                    "The opening complaint is compatible with two similar departments.",
                )
        return reply(best, [], "The described pattern points to this department.")

    # -- inquirer ----------------------------------------------------------

    def _inquirer(self, exchange: ChatExchange, user: str) -> str:
        guidance = _section(user, "Guidance")
        history_block = _section(user, "Prior questions")
        asked = [
            re.sub(r"^\d+\.\s*", "", line).strip()
            for line in history_block.splitlines()
            if line.strip()
        ]
        probes: list[str] = []
        in_diff = False
        for line in guidance.splitlines():
            if line.startswith("Differentiate candidates:"):
                in_diff = True
                continue
            if in_diff:
                match = re.match(r"- .+?: (.+)$", line)
                if match:
                    probes.append(match.group(1))
                else:
                    in_diff = False
        pool = probes + list(GENERIC_QUESTIONS)
        for candidate in pool:
            if all(token_jaccard(candidate, prior) < 0.8 for prior in asked):
                tags = sorted(_content_tokens(candidate))[:2]
                return _fenced({"question": candidate, "intent_tags": tags})
        fallback = f"Is there anything else about round {exchange.round} you want to add?"
        return _fenced({"question": fallback, "intent_tags": ["anything_else"]})

    # -- evaluator ----------------------------------------------------------

    def _evaluator(self, exchange: ChatExchange, user: str) -> str:
        truth_display = _section(user, "Actual department")
        transcript = _section(user, "Transcript")
        final = ""
        for line in transcript.splitlines():
            if line.startswith("Final recommendation: "):
                final = line[len("Final recommendation: ") :].strip()
        if final == truth_display:
            triage = 5
        elif final.split(" / ", 1)[0] == truth_display.split(" / ", 1)[0]:
            triage = 3
        else:
            triage = 1
        scores = {
            "inquiry_logic": 4,
            "triage_accuracy": triage,
            "diagnostic_reasoning": 3,
            "communication": 4,
            "consistency": 4,
            "professionalism": 4,
        }
        justifications = {
            "inquiry_logic": "Questions were targeted and non-repetitive.",
            "triage_accuracy": f"Final routing was {final or 'missing'} against {truth_display}.",
            "diagnostic_reasoning": "Reasoning was serviceable with some gaps.",
            "communication": "Phrasing stayed clear and accessible.",
            "consistency": "Later rounds built on earlier information.",
            "professionalism": "Conduct matched standard clinical competency.",
        }
        return _fenced({"scores": scores, "justifications": justifications})

    # -- imputer ----------------------------------------------------------

    def _imputer(self, exchange: ChatExchange, user: str) -> str:
        record = json.loads(_section(user, "Record") or "{}")
        missing_raw = _section(user, "Missing fields")
        missing = [m.strip() for m in re.split(r"[,\n]", missing_raw) if m.strip()]
        complaint = str(record.get("chief_complaint", "")).strip()
        filled: dict[str, object] = {}
        for field_name in missing:
            if field_name == "present_illness":
                filled[field_name] = (
                    f"Reports {complaint or 'the stated complaint'}; symptoms began "
                    "recently and have persisted without clear relief."
                )
            elif field_name == "age":
                filled[field_name] = 45
            elif field_name == "sex":
                filled[field_name] = "female"
            elif field_name == "truth_primary":
                filled[field_name] = self._keyword_department(complaint).primary
            elif field_name == "truth_secondary":
                ref = self._keyword_department(complaint)
                filled[field_name] = ref.secondary or ref.primary
            elif field_name == "history":
                filled[field_name] = "No significant past medical history."
            else:
                filled[field_name] = "unknown"
        return _fenced(filled)


def build_synthetic_resources(
    config: SessionConfig,
    records: Sequence[PatientRecord] = (),
    fixture_path: str | Path | None = None,
    challenging: bool = False,
) -> Resources:
    """Resources whose backends all answer synthetically, optionally
    recording every completion into ``fixture_path``."""
    from .agents import load_default_templates
    from .domain import load_default_taxonomy, taxonomy_load
    from .guidance import load_default_kbs, load_kbs

    taxonomy = (
        taxonomy_load(config.taxonomy_path) if config.taxonomy_path else load_default_taxonomy()
    )
    kbs = load_kbs(config.kb_dir, taxonomy) if config.kb_dir else load_default_kbs(taxonomy)
    templates = (
        TemplateSet(config.template_dir) if config.template_dir else load_default_templates()
    )
    responder = SyntheticResponder(
        taxonomy,
        records={r.id: r for r in records},
        policy=ResponderPolicy(rounds=config.rounds, challenging=challenging),
    )
    backend = (
        RecordingBackend(responder, fixture_path) if fixture_path is not None else responder
    )
    backends = {tag: backend for tag in ("recipient", "inquirer", "department", "patient", "evaluator", "imputer")}
    return Resources(taxonomy, kbs, templates, backends)


def record_reply_fixtures(
    records: Sequence[PatientRecord],
    config: SessionConfig,
    fixture_path: str | Path,
    challenging: bool = False,
    workers: int = 1,
) -> list[SessionTrace]:
    """Run every record through a synthetic session, recording all replies
    into a fixture file that the scripted backend can replay."""
    resources = build_synthetic_resources(
        config, records, fixture_path=fixture_path, challenging=challenging
    )
    return run_batch(records, config, resources, workers=workers)
