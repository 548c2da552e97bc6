"""Core domain types: the department taxonomy, patient records, structured
illness history, dialogue primitives, and match-level scoring.

Everything here is immutable after construction and safe to share across
threads. Name resolution is centralised in :func:`resolve_department` so all
modules normalise department names the same way.
"""

from __future__ import annotations

import enum
import json
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .errors import DatasetError, TaxonomyError, UnknownDepartment

SEXES = ("male", "female", "other")

HPI_SECTIONS = (
    "chief_complaint",
    "onset",
    "duration",
    "associated_symptoms",
    "relevant_history",
    "negatives",
)

FACT_STATUSES = ("added", "superseded")

DATASET_FIELDS = (
    "id",
    "age",
    "sex",
    "chief_complaint",
    "present_illness",
    "history",
    "truth_primary",
    "truth_secondary",
    "provenance",
)

_WS_RE = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Normalise a department name for lookup: trim, collapse whitespace,
    unicode width-fold (NFKC), case-fold."""
    folded = unicodedata.normalize("NFKC", name)
    return _WS_RE.sub(" ", folded).strip().casefold()


@dataclass(frozen=True, order=True)
class DepartmentRef:
    """A canonical (primary, optional secondary) department reference."""

    primary: str
    secondary: str | None = None

    def display(self) -> str:
        if self.secondary:
            return f"{self.primary} / {self.secondary}"
        return self.primary

    def primary_only(self) -> "DepartmentRef":
        return DepartmentRef(self.primary)

    def covers(self, other: "DepartmentRef") -> bool:
        """True when this ref names ``other`` at its own granularity:
        a primary-level ref covers every ref under that primary."""
        if self.primary != other.primary:
            return False
        return self.secondary is None or self.secondary == other.secondary


class MatchLevel(enum.IntEnum):
    """Agreement between a predicted and a true department; total order."""

    NONE = 0
    PRIMARY_ONLY = 1
    FULL = 2

    @property
    def label(self) -> str:
        return self.name.lower()


def match_level(pred: DepartmentRef, truth: DepartmentRef) -> MatchLevel:
    """Grade a prediction: FULL needs both levels equal (a missing predicted
    secondary never counts as full when the truth carries one)."""
    if pred.primary == truth.primary and pred.secondary == truth.secondary:
        return MatchLevel.FULL
    if pred.primary == truth.primary:
        return MatchLevel.PRIMARY_ONLY
    return MatchLevel.NONE


@dataclass(frozen=True)
class PrimaryDepartment:
    name: str
    secondaries: tuple[str, ...] = ()


@dataclass(frozen=True)
class DepartmentTaxonomy:
    """The two-level department structure of one institution, plus synonyms.

    The taxonomy is always a runtime input: nothing else in the package
    hard-codes department names, so heterogeneous hospital layouts are just
    different files.
    """

    primaries: tuple[PrimaryDepartment, ...]
    synonyms: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lookup: dict[str, DepartmentRef] = {}
        seen_primary: set[str] = set()
        for dept in self.primaries:
            key = normalize_name(dept.name)
            if key in seen_primary:
                raise TaxonomyError(f"duplicate primary department {dept.name!r}")
            seen_primary.add(key)
            lookup[key] = DepartmentRef(dept.name)
        for dept in self.primaries:
            for sec in dept.secondaries:
                key = normalize_name(sec)
                if key in lookup:
                    other = lookup[key]
                    where = (
                        f"also a primary department"
                        if other.secondary is None and other.primary == sec
                        else f"also under {other.primary!r}"
                    )
                    raise TaxonomyError(
                        f"duplicate secondary department {sec!r} under {dept.name!r} ({where})"
                    )
                lookup[key] = DepartmentRef(dept.name, sec)
        for alias, target in self.synonyms.items():
            if normalize_name(target) not in lookup:
                raise TaxonomyError(
                    f"synonym {alias!r} targets unknown department {target!r}"
                )
        object.__setattr__(self, "_lookup", lookup)

    @property
    def primary_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.primaries)

    @property
    def secondary_names(self) -> tuple[str, ...]:
        return tuple(s for d in self.primaries for s in d.secondaries)

    def size(self) -> tuple[int, int]:
        return (len(self.primaries), len(self.secondary_names))

    def contains(self, ref: DepartmentRef) -> bool:
        try:
            resolved = resolve_department(
                ref.secondary if ref.secondary else ref.primary, self
            )
        except UnknownDepartment:
            return False
        return resolved.primary == ref.primary and resolved.secondary == ref.secondary

    def render_list(self) -> str:
        """One line per primary with its secondaries, for prompt injection."""
        lines = []
        for dept in self.primaries:
            if dept.secondaries:
                lines.append(f"{dept.name}: {', '.join(dept.secondaries)}")
            else:
                lines.append(dept.name)
        return "\n".join(lines)


def resolve_department(name: str, taxonomy: DepartmentTaxonomy) -> DepartmentRef:
    """Resolve free-text ``name`` to a canonical ref.

    Normalisation covers trimming, case folding, unicode width folding and
    synonym lookup. A secondary name resolves to (its primary, itself); a
    primary name resolves to (itself, None).
    """
    key = normalize_name(name)
    lookup: Mapping[str, DepartmentRef] = getattr(taxonomy, "_lookup")
    ref = lookup.get(key)
    if ref is not None:
        return ref
    for alias, target in taxonomy.synonyms.items():
        if normalize_name(alias) == key:
            return lookup[normalize_name(target)]
    raise UnknownDepartment(f"department {name!r} not found in taxonomy")


def taxonomy_load(path: str | Path) -> DepartmentTaxonomy:
    """Load and validate a taxonomy YAML file.

    Expected shape: top-level ``primaries:`` list of ``{name, secondaries}``
    plus an optional ``synonyms: {alias: canonical}`` mapping.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise TaxonomyError(f"{path}: not valid YAML: {exc}") from exc
    except OSError as exc:
        raise TaxonomyError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict) or "primaries" not in raw:
        raise TaxonomyError(f"{path}: expected a mapping with a 'primaries' list")
    primaries = []
    raw_primaries = raw["primaries"]
    if not isinstance(raw_primaries, list) or not raw_primaries:
        raise TaxonomyError(f"{path}: 'primaries' must be a non-empty list")
    for i, entry in enumerate(raw_primaries):
        where = f"{path}: primaries[{i}]"
        if not isinstance(entry, dict) or "name" not in entry:
            raise TaxonomyError(f"{where}: expected a mapping with a 'name'")
        name = entry["name"]
        if not isinstance(name, str) or not name.strip():
            raise TaxonomyError(f"{where}: 'name' must be non-empty text")
        secondaries = entry.get("secondaries") or []
        if not isinstance(secondaries, list) or not all(
            isinstance(s, str) and s.strip() for s in secondaries
        ):
            raise TaxonomyError(f"{where}: 'secondaries' must be a list of names")
        primaries.append(PrimaryDepartment(name.strip(), tuple(s.strip() for s in secondaries)))
    synonyms = raw.get("synonyms") or {}
    if not isinstance(synonyms, dict):
        raise TaxonomyError(f"{path}: 'synonyms' must be a mapping alias -> canonical")
    try:
        return DepartmentTaxonomy(tuple(primaries), dict(synonyms))
    except TaxonomyError as exc:
        raise TaxonomyError(f"{path}: {exc}") from exc


def default_taxonomy_path() -> Path:
    return Path(str(importlib_resources.files("triage") / "data" / "taxonomy.yaml"))


def load_default_taxonomy() -> DepartmentTaxonomy:
    return taxonomy_load(default_taxonomy_path())


@dataclass(frozen=True)
class Demographics:
    age: int
    sex: str

    def __post_init__(self) -> None:
        if self.age < 0:
            raise ValueError(f"age must be >= 0, got {self.age}")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")


@dataclass(frozen=True)
class PatientRecord:
    """A structured health record: the ground truth a simulated patient
    answers from, and the label a prediction is scored against."""

    id: str
    demographics: Demographics
    chief_complaint: str
    present_illness: str
    history: str | None
    truth: DepartmentRef
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.chief_complaint.strip():
            raise ValueError(f"record {self.id!r}: chief_complaint must be non-empty")
        for fname, origin in self.provenance.items():
            if origin not in ("original", "imputed"):
                raise ValueError(
                    f"record {self.id!r}: provenance[{fname!r}] must be "
                    f"'original' or 'imputed', got {origin!r}"
                )


@dataclass(frozen=True)
class FactEntry:
    round: int
    fact: str
    status: str = "added"

    def __post_init__(self) -> None:
        if self.status not in FACT_STATUSES:
            raise ValueError(f"fact status must be one of {FACT_STATUSES}")


@dataclass(frozen=True)
class HPI:
    """Structured present-illness history accumulated across rounds.

    ``fact_log`` is append-only: later rounds may mark an entry superseded
    but never remove it, so the whole collection history stays auditable.
    """

    narrative: str = ""
    sections: Mapping[str, str] = field(default_factory=dict)
    fact_log: tuple[FactEntry, ...] = ()

    def __post_init__(self) -> None:
        unknown = set(self.sections) - set(HPI_SECTIONS)
        if unknown:
            raise ValueError(f"unknown HPI sections: {sorted(unknown)}")
        rounds = [f.round for f in self.fact_log]
        if any(b < a for a, b in zip(rounds, rounds[1:])):
            raise ValueError("fact_log rounds must be non-decreasing")

    def section(self, name: str) -> str:
        return self.sections.get(name, "")

    def full_text(self) -> str:
        parts = [self.narrative]
        parts.extend(self.sections.get(s, "") for s in HPI_SECTIONS)
        return " ".join(p for p in parts if p)

    def to_dict(self) -> dict:
        return {
            "narrative": self.narrative,
            "sections": {s: self.sections.get(s, "") for s in HPI_SECTIONS},
            "fact_log": [
                {"round": f.round, "fact": f.fact, "status": f.status}
                for f in self.fact_log
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HPI":
        return cls(
            narrative=data.get("narrative", ""),
            sections={k: v for k, v in (data.get("sections") or {}).items() if v},
            fact_log=tuple(
                FactEntry(f["round"], f["fact"], f.get("status", "added"))
                for f in data.get("fact_log", [])
            ),
        )


@dataclass(frozen=True)
class DialogueTurn:
    round: int
    speaker: str
    text: str

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError("round must be >= 1")
        if self.speaker not in ("patient", "system"):
            raise ValueError(f"speaker must be 'patient' or 'system', got {self.speaker!r}")


@dataclass(frozen=True)
class Question:
    round: int
    text: str
    intent_tags: frozenset[str] = frozenset()
    differentiation_targets: tuple[DepartmentRef, ...] = ()

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("question text must be non-empty")


@dataclass(frozen=True)
class Recommendation:
    """One round's routing decision: best department plus, only under
    self-reported ambiguity, a 2-3 candidate set containing the best."""

    round: int
    best: DepartmentRef
    candidates: tuple[DepartmentRef, ...] = ()
    rationale: str = ""
    ambiguous: bool = False

    def __post_init__(self) -> None:
        if bool(self.candidates) != self.ambiguous:
            raise ValueError("candidates are non-empty exactly when ambiguous is true")
        if self.candidates:
            if not (2 <= len(self.candidates) <= 3):
                raise ValueError("candidate set must hold 2-3 departments")
            if self.best not in self.candidates:
                raise ValueError("candidate set must contain the best department")


def ref_to_pair(ref: DepartmentRef) -> tuple[str, str | None]:
    return (ref.primary, ref.secondary)


def _record_to_row(record: PatientRecord) -> dict:
    return {
        "id": record.id,
        "age": record.demographics.age,
        "sex": record.demographics.sex,
        "chief_complaint": record.chief_complaint,
        "present_illness": record.present_illness,
        "history": record.history,
        "truth_primary": record.truth.primary,
        "truth_secondary": record.truth.secondary,
        "provenance": dict(record.provenance),
    }


def _row_to_record(row: Mapping, taxonomy: DepartmentTaxonomy, where: str) -> PatientRecord:
    missing = [k for k in DATASET_FIELDS if k not in row]
    if missing:
        raise DatasetError(f"{where}: missing fields {missing}")
    name = row["truth_secondary"] or row["truth_primary"]
    try:
        truth = resolve_department(str(name), taxonomy)
    except UnknownDepartment as exc:
        raise DatasetError(f"{where}: {exc}") from exc
    if row["truth_secondary"] and truth.primary != resolve_department(
        str(row["truth_primary"]), taxonomy
    ).primary:
        raise DatasetError(
            f"{where}: truth_secondary {row['truth_secondary']!r} does not belong to "
            f"truth_primary {row['truth_primary']!r}"
        )
    try:
        return PatientRecord(
            id=str(row["id"]),
            demographics=Demographics(int(row["age"]), str(row["sex"])),
            chief_complaint=str(row["chief_complaint"]),
            present_illness=str(row["present_illness"] or ""),
            history=row["history"] if row["history"] is None else str(row["history"]),
            truth=truth,
            provenance=dict(row["provenance"] or {}),
        )
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def load_dataset(path: str | Path, taxonomy: DepartmentTaxonomy) -> list[PatientRecord]:
    """Read a JSON Lines dataset, validating every record (including that
    each truth department resolves in ``taxonomy``)."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            records.append(_row_to_record(row, taxonomy, f"{path}:{lineno}"))
    return records


def save_dataset(records: Iterable[PatientRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(_record_to_row(record), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def record_public_view(record: PatientRecord) -> dict:
    """The record as the patient-simulation prompt sees it: no truth label."""
    return {
        "age": record.demographics.age,
        "sex": record.demographics.sex,
        "chief_complaint": record.chief_complaint,
        "present_illness": record.present_illness,
        "history": record.history or "",
    }
