"""Dataset construction pipeline: ingest, dedup, integrity, impute, synth."""

import json

import pytest

from triage.agents import load_default_templates
from triage.domain import load_default_taxonomy
from triage.errors import DatasetError, RejectUnimputable, UnparseableAgentOutput
from triage.pipeline import (
    RawRecord,
    build_dataset,
    dedup_filter,
    impute,
    ingest_raw,
    integrity_check,
    synth_fixtures,
)

from helpers import ListBackend, fenced


@pytest.fixture(scope="module")
def taxonomy():
    return load_default_taxonomy()


@pytest.fixture(scope="module")
def templates():
    return load_default_templates()


def raw(sid, **fields):
    base = {
        "chief_complaint": "cough for a week",
        "present_illness": "Cough for a week with fever.",
        "age": "40",
        "sex": "female",
        "truth_primary": "Internal Medicine",
        "truth_secondary": "Respiratory Medicine",
    }
    base.update(fields)
    return RawRecord(sid, base)


class TestIngest:
    def test_jsonl_three_rows(self, tmp_path):
        f = tmp_path / "raw.jsonl"
        rows = [{"source_id": f"r{i}", "chief_complaint": f"c{i}"} for i in range(3)]
        f.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        records = ingest_raw(f)
        assert [r.source_id for r in records] == ["r0", "r1", "r2"]

    def test_csv_round_trip(self, tmp_path):
        f = tmp_path / "raw.csv"
        f.write_text(
            "source_id,chief_complaint,age\n"
            "a1,headache,30\n"
            "a2,cough,41\n"
        )
        records = ingest_raw(f)
        assert len(records) == 2
        assert records[0].get("chief_complaint") == "headache"

    def test_missing_source_id_reports_row(self, tmp_path):
        f = tmp_path / "raw.jsonl"
        f.write_text(json.dumps({"source_id": "ok"}) + "\n" + json.dumps({"x": 1}) + "\n")
        with pytest.raises(DatasetError, match="row 2"):
            ingest_raw(f)

    def test_empty_file(self, tmp_path):
        f = tmp_path / "raw.jsonl"
        f.write_text("")
        assert ingest_raw(f) == []


class TestDedupFilter:
    def test_byte_identical_records_collapse(self):
        records = [raw("a"), raw("b")]
        kept, dropped = dedup_filter(records)
        assert [r.source_id for r in kept] == ["a"]
        assert len(dropped) == 1
        assert dropped[0].rule == "exact"
        assert dropped[0].duplicate_of == "a"

    def test_whitespace_variants_are_still_exact_duplicates(self):
        records = [raw("a"), raw("b", chief_complaint="cough   for a week ")]
        kept, dropped = dedup_filter(records)
        assert len(kept) == 1
        assert dropped[0].rule == "exact"

    def test_templated_batch_keeps_first(self):
        records = [raw(f"t{i}", age=str(30 + i)) for i in range(5)]
        kept, dropped = dedup_filter(records)
        assert [r.source_id for r in kept] == ["t0"]
        assert len(dropped) == 4
        assert {d.rule for d in dropped} == {"templated"}
        assert {d.duplicate_of for d in dropped} == {"t0"}

    def test_two_shared_records_below_threshold_kept(self):
        records = [raw("x1", age="30"), raw("x2", age="31")]
        kept, dropped = dedup_filter(records)
        assert len(kept) == 2
        assert dropped == []

    def test_all_distinct_batch_untouched(self):
        records = [raw(f"d{i}", chief_complaint=f"complaint {i}") for i in range(4)]
        kept, dropped = dedup_filter(records)
        assert len(kept) == 4
        assert dropped == []


class TestIntegrityCheck:
    def test_missing_present_illness(self):
        report = integrity_check(raw("r", present_illness=""))
        assert report.missing == frozenset({"present_illness"})

    def test_complete_record(self):
        assert integrity_check(raw("r")).missing == frozenset()

    def test_missing_age_and_sex(self):
        report = integrity_check(raw("r", age="", sex=None))
        assert report.missing == frozenset({"age", "sex"})


class TestImpute:
    def test_fills_missing_field_with_provenance(self, taxonomy, templates):
        record = raw("r1", present_illness="")
        report = integrity_check(record)
        backend = ListBackend([fenced({"present_illness": "Cough with sputum for one week."})])
        result = impute(record, report, backend, taxonomy, templates)
        assert result.present_illness == "Cough with sputum for one week."
        assert result.provenance["present_illness"] == "imputed"
        assert result.provenance["chief_complaint"] == "original"
        # originals untouched byte for byte
        assert result.chief_complaint == record.get("chief_complaint")

    def test_complete_record_never_calls_backend(self, taxonomy, templates):
        record = raw("r2")
        report = integrity_check(record)

        class ExplodingBackend:
            def complete(self, exchange):
                raise AssertionError("backend must not be called")

        result = impute(record, report, ExplodingBackend(), taxonomy, templates)
        assert all(v == "original" for v in result.provenance.values())

    def test_missing_chief_complaint_rejected(self, taxonomy, templates):
        record = raw("r3", chief_complaint="")
        report = integrity_check(record)
        with pytest.raises(RejectUnimputable):
            impute(record, report, ListBackend([]), taxonomy, templates)

    def test_unresolvable_imputed_department_errors(self, taxonomy, templates):
        record = raw("r4", truth_secondary="", truth_primary="")
        report = integrity_check(record)
        backend = ListBackend(
            [fenced({"truth_primary": "Wizardry", "truth_secondary": "Telepathy"})] * 3
        )
        with pytest.raises(UnparseableAgentOutput):
            impute(record, report, backend, taxonomy, templates)


class TestSynthFixtures:
    def test_deterministic_for_fixed_seed(self, taxonomy):
        a = synth_fixtures(42, 20, taxonomy)
        b = synth_fixtures(42, 20, taxonomy)
        assert a == b

    def test_different_seeds_differ(self, taxonomy):
        a = synth_fixtures(1, 20, taxonomy)
        b = synth_fixtures(2, 20, taxonomy)
        assert a != b

    def test_one_per_primary_covers_all_nine(self, taxonomy):
        records = synth_fixtures(7, 9, taxonomy, one_per_primary=True)
        assert len({r.truth.primary for r in records}) == 9

    def test_truths_always_resolve(self, taxonomy):
        from triage.domain import resolve_department

        for record in synth_fixtures(3, 50, taxonomy):
            resolved = resolve_department(
                record.truth.secondary or record.truth.primary, taxonomy
            )
            assert resolved == record.truth

    def test_n_must_be_positive(self, taxonomy):
        with pytest.raises(ValueError):
            synth_fixtures(1, 0, taxonomy)


class TestBuildDataset:
    def test_crafted_batch_counts(self, tmp_path, taxonomy, templates):
        # 10 rows: 1 exact dup, 3-strong templated group (2 dropped),
        # 1 missing chief complaint (rejected), 1 missing present illness (imputed)
        rows = [
            raw("k1"),
            raw("k1b"),  # exact duplicate of k1 (same fields)
            raw("k2", chief_complaint="headache", present_illness="Headache for two days."),
            raw("t1", chief_complaint="template", present_illness="Same text.", age="20"),
            raw("t2", chief_complaint="template", present_illness="Same text.", age="21"),
            raw("t3", chief_complaint="template", present_illness="Same text.", age="22"),
            raw("m1", chief_complaint="", present_illness="No complaint given."),
            raw("m2", present_illness="", chief_complaint="dizzy spells"),
            raw("k3", chief_complaint="ankle pain", present_illness="Twisted ankle yesterday.",
                truth_primary="Surgery", truth_secondary="Orthopedics"),
            raw("k4", chief_complaint="itchy rash", present_illness="Rash on arms.",
                truth_primary="Dermatology & Venereology", truth_secondary="Dermatology"),
        ]
        path = tmp_path / "raw.jsonl"
        with path.open("w") as fh:
            for r in rows:
                fh.write(json.dumps({"source_id": r.source_id, **r.fields}) + "\n")
        backend = ListBackend([fenced({"present_illness": "Dizzy spells for a month."})])
        records, report = build_dataset(path, taxonomy, templates, backend)
        assert report.ingested == 10
        assert report.after_dedup == 7  # -1 exact, -2 templated
        assert report.rejected_unimputable == 1
        assert report.imputed == 1
        assert report.complete == 6
        assert {r.id for r in records} == {"k1", "k2", "t1", "m2", "k3", "k4"}
        imputed = next(r for r in records if r.id == "m2")
        assert imputed.provenance["present_illness"] == "imputed"
