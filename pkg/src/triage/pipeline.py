"""Dataset construction: ingestion, cleaning, integrity checking, LLM-based
imputation, and a deterministic synthetic-record generator.

The cleaning order is fixed — dedup, then integrity, then imputation — and
every stage only ever shrinks or completes records; an original field value
is never altered.
"""

from __future__ import annotations

import csv
import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .agents import TemplateSet, _run_structured, _Invalid
from .domain import (
    Demographics,
    DepartmentTaxonomy,
    PatientRecord,
    resolve_department,
)
from .errors import DatasetError, RejectUnimputable, UnknownDepartment
from .llm_gateway import Backend

REQUIRED_FIELDS = (
    "chief_complaint",
    "present_illness",
    "age",
    "sex",
    "truth_primary",
    "truth_secondary",
)

TEMPLATED_MIN_SOURCES = 3  # identical (complaint, HPI) across this many ids


@dataclass(frozen=True)
class RawRecord:
    source_id: str
    fields: Mapping[str, str]

    def get(self, name: str) -> str:
        value = self.fields.get(name)
        return "" if value is None else str(value).strip()


@dataclass(frozen=True)
class IntegrityReport:
    record_id: str
    missing: frozenset[str]
    templated: bool = False


@dataclass(frozen=True)
class DroppedRecord:
    source_id: str
    rule: str  # exact | templated
    duplicate_of: str


@dataclass
class AttritionReport:
    ingested: int = 0
    after_dedup: int = 0
    rejected_unimputable: int = 0
    imputed: int = 0
    complete: int = 0
    dropped: list[DroppedRecord] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "ingested": self.ingested,
            "after_dedup": self.after_dedup,
            "rejected_unimputable": self.rejected_unimputable,
            "imputed": self.imputed,
            "complete": self.complete,
            "dropped_exact": sum(1 for d in self.dropped if d.rule == "exact"),
            "dropped_templated": sum(1 for d in self.dropped if d.rule == "templated"),
        }


def ingest_raw(path: str | Path) -> list[RawRecord]:
    """Read a raw export (CSV or JSON Lines, picked by extension) without
    any filtering; every row must carry a source_id."""
    path = Path(path)
    records: list[RawRecord] = []
    if path.suffix.lower() == ".csv":
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for rowno, row in enumerate(reader, start=2):  # header is line 1
                sid = (row.get("source_id") or "").strip()
                if not sid:
                    raise DatasetError(f"{path}: row {rowno}: missing source_id")
                records.append(
                    RawRecord(sid, {k: v for k, v in row.items() if k != "source_id" and v is not None})
                )
    else:
        with path.open(encoding="utf-8") as fh:
            for rowno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}: row {rowno}: not valid JSON: {exc}") from exc
                sid = str(row.get("source_id") or "").strip()
                if not sid:
                    raise DatasetError(f"{path}: row {rowno}: missing source_id")
                records.append(
                    RawRecord(sid, {k: v for k, v in row.items() if k != "source_id"})
                )
    return records


def _normalize_value(value) -> str:
    return " ".join(str(value).split()) if value is not None else ""


def dedup_filter(
    records: Sequence[RawRecord], templated_min_sources: int = TEMPLATED_MIN_SOURCES
) -> tuple[list[RawRecord], list[DroppedRecord]]:
    """Drop exact duplicates (all fields identical after whitespace
    normalization; first kept) and templated batches (identical chief
    complaint and present illness across >= K distinct source ids; first
    kept)."""
    kept: list[RawRecord] = []
    dropped: list[DroppedRecord] = []
    seen_exact: dict[tuple, str] = {}
    for record in records:
        key = tuple(sorted((k, _normalize_value(v)) for k, v in record.fields.items()))
        if key in seen_exact:
            dropped.append(DroppedRecord(record.source_id, "exact", seen_exact[key]))
            continue
        seen_exact[key] = record.source_id
        kept.append(record)

    groups: dict[tuple[str, str], list[RawRecord]] = {}
    for record in kept:
        gkey = (
            _normalize_value(record.get("chief_complaint")).casefold(),
            _normalize_value(record.get("present_illness")).casefold(),
        )
        groups.setdefault(gkey, []).append(record)

    templated_drop_ids: dict[str, str] = {}
    for (complaint, illness), members in groups.items():
        if not complaint and not illness:
            continue
        distinct = {m.source_id for m in members}
        if len(distinct) >= templated_min_sources:
            keeper = members[0]
            for member in members[1:]:
                templated_drop_ids[member.source_id] = keeper.source_id
    if templated_drop_ids:
        final = []
        for record in kept:
            if record.source_id in templated_drop_ids:
                dropped.append(
                    DroppedRecord(record.source_id, "templated", templated_drop_ids[record.source_id])
                )
            else:
                final.append(record)
        kept = final
    return kept, dropped


def integrity_check(record: RawRecord, templated: bool = False) -> IntegrityReport:
    """Report which required fields are absent or blank."""
    missing = frozenset(name for name in REQUIRED_FIELDS if not record.get(name))
    return IntegrityReport(record_id=record.source_id, missing=missing, templated=templated)


_SEXES = {"male": "male", "m": "male", "female": "female", "f": "female"}


def _build_record(
    raw: RawRecord, values: Mapping[str, str], provenance: Mapping[str, str],
    taxonomy: DepartmentTaxonomy,
) -> PatientRecord:
    sex = _SEXES.get(str(values["sex"]).strip().casefold(), "other")
    name = values.get("truth_secondary") or values["truth_primary"]
    truth = resolve_department(str(name), taxonomy)
    return PatientRecord(
        id=raw.source_id,
        demographics=Demographics(int(values["age"]), sex),
        chief_complaint=str(values["chief_complaint"]),
        present_illness=str(values["present_illness"]),
        history=str(values["history"]) if values.get("history") else None,
        truth=truth,
        provenance=dict(provenance),
    )


def impute(
    record: RawRecord,
    report: IntegrityReport,
    backend: Backend | None,
    taxonomy: DepartmentTaxonomy,
    templates: TemplateSet,
    *,
    max_attempts: int = 3,
) -> PatientRecord:
    """Fill the missing fields of one raw record via the completion backend.

    Fields that were present are carried over byte-identically; each filled
    field is marked imputed in the record's provenance. Records without a
    chief complaint are rejected rather than imputed.
    """
    if "chief_complaint" in report.missing:
        raise RejectUnimputable(
            f"record {record.source_id!r} lacks a chief complaint and cannot be imputed"
        )
    values = {name: record.get(name) for name in REQUIRED_FIELDS}
    values["history"] = record.get("history")
    provenance = {
        name: "original" for name in list(REQUIRED_FIELDS) + ["history"] if values.get(name)
    }
    missing = sorted(report.missing)
    if missing:
        if backend is None:
            raise ValueError("records with missing fields require a completion backend")
        system, user = templates.render(
            "imputer",
            record=json.dumps(
                {k: v for k, v in values.items() if v}, ensure_ascii=False, sort_keys=True, indent=2
            ),
            missing=", ".join(missing),
            taxonomy=taxonomy.render_list(),
        )

        def validate(parsed: dict) -> dict:
            filled = {}
            for name in missing:
                if name not in parsed or not str(parsed[name]).strip():
                    raise _Invalid(f"reply must fill the missing field {name!r}.")
                filled[name] = str(parsed[name]).strip()
            if "age" in filled and not re.fullmatch(r"\d{1,3}", filled["age"]):
                raise _Invalid("age must be a whole number of years.")
            for dept_field in ("truth_primary", "truth_secondary"):
                if dept_field in filled:
                    try:
                        resolve_department(filled[dept_field], taxonomy)
                    except UnknownDepartment as exc:
                        raise _Invalid(f"{exc}.") from exc
            return filled

        filled, _ = _run_structured(
            backend,
            "imputer",
            record.source_id,
            0,
            system,
            user,
            validate,
            max_attempts,
        )
        for name, value in filled.items():
            values[name] = value
            provenance[name] = "imputed"
    return _build_record(record, values, provenance, taxonomy)


@dataclass(frozen=True)
class _Scenario:
    primary: str
    secondary: str
    complaint: str
    present_illness: str
    history: str | None = None


# One pool per primary department of the bundled taxonomy; several scenarios
# deliberately carry the wording that fires the bundled comparison rules.
_SCENARIOS = (
    _Scenario(
        "Internal Medicine",
        "Neurology",
        "sudden severe headache",
        "Sudden severe headache since this morning with vomiting. Denies trauma or injury. "
        "Light makes the headache worse.",
    ),
    _Scenario(
        "Internal Medicine",
        "Gastroenterology",
        "burning stomach pain after meals",
        "Chronic gastritis for years with burning pain in the upper stomach after meals. "
        "Worse with spicy food and stress. Has been taking antacids with partial relief.",
        "chronic gastritis diagnosed three years ago",
    ),
    _Scenario(
        "Internal Medicine",
        "Cardiology",
        "chest pain for two hours",
        "Chest pain for two hours, pressing in character, started at rest. "
        "History of hypertension for five years. Sweating but no fever.",
        "hypertension, on medication",
    ),
    _Scenario(
        "Internal Medicine",
        "Respiratory Medicine",
        "cough with fever for a week",
        "Cough for a week with fever and yellow sputum. Short of breath when climbing stairs. "
        "No chest pain at rest.",
    ),
    _Scenario(
        "Internal Medicine",
        "Endocrinology",
        "very thirsty and losing weight",
        "Thirsty for a month and drinking large amounts of water. Weight loss of five "
        "kilograms without dieting. Family history of diabetes.",
    ),
    _Scenario(
        "Surgery",
        "General Surgery",
        "acute abdominal pain",
        "Acute abdominal pain since this morning with rebound tenderness and a rigid abdomen. "
        "Started suddenly and keeps getting worse. One episode of vomiting.",
    ),
    _Scenario(
        "Surgery",
        "Neurosurgery",
        "headache after hitting my head",
        "Hit my head after a fall from a ladder yesterday. Headache since then with one "
        "episode of vomiting. Brief loss of consciousness right after the fall.",
    ),
    _Scenario(
        "Surgery",
        "Orthopedics",
        "ankle pain after twisting it",
        "Twisted the ankle during a football game yesterday. The ankle is swollen and painful "
        "when standing. No other injuries.",
    ),
    _Scenario(
        "Surgery",
        "Urology",
        "pain when urinating",
        "Burning pain when urinating for three days. Going to the toilet more often than "
        "usual. No fever so far.",
    ),
    _Scenario(
        "Obstetrics & Gynecology",
        "Obstetrics",
        "pregnant with cramping",
        "Eight weeks pregnant with mild cramping since yesterday. No bleeding. "
        "First pregnancy, otherwise feeling well.",
    ),
    _Scenario(
        "Obstetrics & Gynecology",
        "Gynecology",
        "irregular bleeding between periods",
        "Irregular bleeding between periods for two months with mild lower abdominal "
        "discomfort. Cycles were regular before.",
    ),
    _Scenario(
        "Pediatrics",
        "General Pediatrics",
        "my son has fever and a rash",
        "My son is five years old with fever for two days and a faint rash on the trunk. "
        "Still drinking well and reasonably active.",
    ),
    _Scenario(
        "Pediatrics",
        "Neonatology",
        "newborn feeding poorly",
        "Two-week-old newborn feeding poorly since yesterday and sleepier than usual. "
        "Fewer wet nappies today.",
    ),
    _Scenario(
        "Otorhinolaryngology, Ophthalmology & Stomatology",
        "Ophthalmology",
        "red painful eye",
        "Right eye red and painful since yesterday with blurred vision in that eye. "
        "No injury to the eye.",
    ),
    _Scenario(
        "Otorhinolaryngology, Ophthalmology & Stomatology",
        "Otorhinolaryngology",
        "earache and hearing loss",
        "Earache for three days with mild hearing loss on the same side. Had a cold last "
        "week. No discharge from the ear.",
    ),
    _Scenario(
        "Dermatology & Venereology",
        "Dermatology",
        "itchy rash on both arms",
        "Itchy rash on both arms for a week, slowly spreading. No new cosmetics or "
        "detergents. Worse at night.",
    ),
    _Scenario(
        "Psychiatry & Psychology",
        "Psychiatry",
        "cannot sleep and feeling low",
        "Trouble sleeping for a month and low mood most of the day. Lost interest in "
        "hobbies. Appetite reduced.",
    ),
    _Scenario(
        "Oncology",
        "Medical Oncology",
        "weight loss and a neck lump",
        "Weight loss of six kilograms over two months and a painless lump in the neck. "
        "Diagnosed with cancer of the thyroid last year, follow-up overdue.",
        "thyroid cancer, treated last year",
    ),
    _Scenario(
        "Traditional Chinese Medicine",
        "Acupuncture & Moxibustion",
        "chronic shoulder stiffness",
        "Chronic shoulder stiffness for months, worse in cold weather. Prefers acupuncture "
        "and herbal treatment. No injury.",
    ),
)


def synth_fixtures(
    seed: int,
    n: int,
    taxonomy: DepartmentTaxonomy,
    one_per_primary: bool = False,
) -> list[PatientRecord]:
    """Generate ``n`` deterministic synthetic patient records whose truth
    departments always resolve in ``taxonomy``.

    With ``one_per_primary`` the generator walks the taxonomy's primaries in
    order (so n == len(primaries) covers each primary exactly once).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    # keep only scenarios whose departments exist in the active taxonomy
    usable: list[_Scenario] = []
    for scenario in _SCENARIOS:
        try:
            ref = resolve_department(scenario.secondary, taxonomy)
        except UnknownDepartment:
            try:
                ref = resolve_department(scenario.primary, taxonomy)
            except UnknownDepartment:
                continue
        usable.append(scenario if ref.secondary else _Scenario(
            ref.primary, "", scenario.complaint, scenario.present_illness, scenario.history
        ))
    if not usable:
        raise ValueError("taxonomy shares no departments with the scenario pools")
    by_primary: dict[str, list[_Scenario]] = {}
    for scenario in usable:
        by_primary.setdefault(scenario.primary, []).append(scenario)

    records: list[PatientRecord] = []
    primaries = [p.name for p in taxonomy.primaries if p.name in by_primary]
    for i in range(n):
        if one_per_primary and primaries:
            pool = by_primary[primaries[i % len(primaries)]]
            scenario = pool[(i // len(primaries)) % len(pool)]
        else:
            scenario = usable[rng.randrange(len(usable))]
        age = rng.randint(1, 16) if scenario.primary == "Pediatrics" else rng.randint(18, 85)
        sex = "female" if scenario.primary == "Obstetrics & Gynecology" else rng.choice(
            ("male", "female")
        )
        truth = resolve_department(scenario.secondary or scenario.primary, taxonomy)
        records.append(
            PatientRecord(
                id=f"syn-{seed}-{i:04d}",
                demographics=Demographics(age, sex),
                chief_complaint=scenario.complaint,
                present_illness=scenario.present_illness,
                history=scenario.history,
                truth=truth,
                provenance={
                    name: "original"
                    for name in ("chief_complaint", "present_illness", "age", "sex")
                },
            )
        )
    return records


def build_dataset(
    raw_path: str | Path,
    taxonomy: DepartmentTaxonomy,
    templates: TemplateSet,
    backend: Backend | None = None,
    templated_min_sources: int = TEMPLATED_MIN_SOURCES,
) -> tuple[list[PatientRecord], AttritionReport]:
    """The full cleaning pipeline: ingest -> dedup -> integrity -> impute."""
    report = AttritionReport()
    raw_records = ingest_raw(raw_path)
    report.ingested = len(raw_records)
    kept, dropped = dedup_filter(raw_records, templated_min_sources)
    report.dropped = dropped
    report.after_dedup = len(kept)
    records: list[PatientRecord] = []
    for raw in kept:
        integrity = integrity_check(raw)
        try:
            record = impute(raw, integrity, backend, taxonomy, templates)
        except RejectUnimputable:
            report.rejected_unimputable += 1
            continue
        if integrity.missing:
            report.imputed += 1
        records.append(record)
    report.complete = len(records)
    return records, report
