"""Objective metrics over completed session traces.

Definitions used throughout (also stamped into report headers):
  * primary accuracy    — predicted primary equals the true primary;
  * secondary accuracy  — predicted secondary label equals the true secondary
                          label, compared independently of the primary;
  * overall accuracy    — full match on both levels;
  * gain                — overall(final round) minus overall(round 1);
  * effective round     — a round whose overall accuracy strictly improves
                          on the previous round.

Percentages are reported to one decimal. Every function here is a pure
function over immutable traces and is cheap enough to brute-force, which the
test suite exploits by recounting everything independently.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .agents import SCORE_DIMENSIONS, SixDimScore
from .domain import DepartmentRef, DepartmentTaxonomy, MatchLevel, match_level
from .orchestrator import SessionTrace

SECONDARY_DEFINITION_NOTE = (
    "secondary accuracy compares secondary labels independently of the primary"
)


def percent(count: int, total: int) -> float:
    """Share of ``total`` as a percentage rounded to one decimal."""
    if total == 0:
        raise ValueError("cannot take a percentage of zero cases")
    return round(100.0 * count / total, 1)


def _decimal_sum(values: Iterable[float]) -> Decimal:
    return sum((Decimal(str(v)) for v in values), Decimal("0"))


@dataclass(frozen=True)
class RoundAccuracy:
    round: int
    primary: float
    secondary: float
    overall: float
    n: int


@dataclass(frozen=True)
class Flow:
    from_truth: DepartmentRef
    to_pred: DepartmentRef
    count: int

    @property
    def correct(self) -> bool:
        return self.from_truth == self.to_pred


@dataclass(frozen=True)
class ErrorDecomposition:
    """Final-round outcome split plus the misclassification flow list.

    The three rates always close to 100.0 when summed as the one-decimal
    numbers they are reported as (``closure`` checks this exactly).
    """

    n: int
    correct: float
    secondary_only_error: float
    primary_error: float
    flows: tuple[Flow, ...]

    def closure(self) -> Decimal:
        return _decimal_sum((self.correct, self.secondary_only_error, self.primary_error))


@dataclass(frozen=True)
class DepartmentAccuracy:
    primary_dept: str
    accuracy: float
    n: int


@dataclass(frozen=True)
class EfficiencyReport:
    effective_rounds: int
    candidate_rounds: int

    @property
    def ratio(self) -> int:
        if self.candidate_rounds == 0:
            return 0
        return round(100 * self.effective_rounds / self.candidate_rounds)

    def formatted(self) -> str:
        return f"{self.ratio}% ({self.effective_rounds} of {self.candidate_rounds})"


@dataclass(frozen=True)
class RubricSummary:
    means: Mapping[str, float]
    overall: float
    n: int

    def radar_rows(self) -> list[dict]:
        return [{"dimension": dim, "mean": self.means[dim]} for dim in SCORE_DIMENSIONS]


def _aligned_truth(trace: SessionTrace, truths: Mapping[str, DepartmentRef]) -> DepartmentRef:
    if trace.session_id not in truths:
        raise ValueError(f"no truth label for session {trace.session_id!r}")
    return truths[trace.session_id]


def _completed(traces: Sequence[SessionTrace]) -> list[SessionTrace]:
    usable = [t for t in traces if t.recommendations]
    if not usable:
        raise ValueError("no traces with recommendations to evaluate")
    return usable


def accuracy_by_round(
    traces: Sequence[SessionTrace], truths: Mapping[str, DepartmentRef]
) -> list[RoundAccuracy]:
    """Primary / secondary / overall accuracy for every round."""
    usable = _completed(traces)
    rounds = len(usable[0].recommendations)
    if any(len(t.recommendations) != rounds for t in usable):
        raise ValueError("all traces must have completed the same round count")
    results = []
    n = len(usable)
    for index in range(rounds):
        primary_hits = secondary_hits = full_hits = 0
        for trace in usable:
            truth = _aligned_truth(trace, truths)
            pred = trace.recommendations[index].best
            level = match_level(pred, truth)
            if level >= MatchLevel.PRIMARY_ONLY:
                primary_hits += 1
            if pred.secondary == truth.secondary:
                secondary_hits += 1
            if level is MatchLevel.FULL:
                full_hits += 1
        results.append(
            RoundAccuracy(
                round=index + 1,
                primary=percent(primary_hits, n),
                secondary=percent(secondary_hits, n),
                overall=percent(full_hits, n),
                n=n,
            )
        )
    return results


def overall_gain(round_accuracy: Sequence[RoundAccuracy]) -> float:
    """Reported gain: final overall minus first-round overall, one decimal."""
    if not round_accuracy:
        raise ValueError("need at least one round")
    return round(round_accuracy[-1].overall - round_accuracy[0].overall, 1)


def department_accuracy(
    traces: Sequence[SessionTrace],
    truths: Mapping[str, DepartmentRef],
    taxonomy: DepartmentTaxonomy,
) -> tuple[list[DepartmentAccuracy], float]:
    """Final-round full-match rate grouped by true primary department, plus
    the unweighted (macro) average over the groups."""
    usable = _completed(traces)
    groups: dict[str, list[bool]] = {}
    for trace in usable:
        truth = _aligned_truth(trace, truths)
        pred = trace.recommendations[-1].best
        groups.setdefault(truth.primary, []).append(
            match_level(pred, truth) is MatchLevel.FULL
        )
    order = {name: i for i, name in enumerate(taxonomy.primary_names)}
    rows = [
        DepartmentAccuracy(
            primary_dept=name,
            accuracy=percent(sum(hits), len(hits)),
            n=len(hits),
        )
        for name, hits in sorted(groups.items(), key=lambda kv: (order.get(kv[0], 99), kv[0]))
    ]
    macro = round(sum(r.accuracy for r in rows) / len(rows), 1)
    return rows, macro


def error_flows(
    traces: Sequence[SessionTrace], truths: Mapping[str, DepartmentRef]
) -> ErrorDecomposition:
    """Split final-round outcomes into correct / secondary-only / primary
    errors and tally (truth -> prediction) flows, self-flows included."""
    usable = _completed(traces)
    n = len(usable)
    counts = {"correct": 0, "secondary": 0, "primary": 0}
    flow_counts: dict[tuple[DepartmentRef, DepartmentRef], int] = {}
    for trace in usable:
        truth = _aligned_truth(trace, truths)
        pred = trace.recommendations[-1].best
        level = match_level(pred, truth)
        if level is MatchLevel.FULL:
            counts["correct"] += 1
        elif level is MatchLevel.PRIMARY_ONLY:
            counts["secondary"] += 1
        else:
            counts["primary"] += 1
        key = (truth, pred)
        flow_counts[key] = flow_counts.get(key, 0) + 1
    flows = tuple(
        Flow(from_truth=src, to_pred=dst, count=count)
        for (src, dst), count in sorted(
            flow_counts.items(), key=lambda kv: (kv[0][0].display(), kv[0][1].display())
        )
    )
    return ErrorDecomposition(
        n=n,
        correct=percent(counts["correct"], n),
        secondary_only_error=percent(counts["secondary"], n),
        primary_error=percent(counts["primary"], n),
        flows=flows,
    )


def sankey_links(decomposition: ErrorDecomposition) -> list[dict]:
    """Primary-level link list directly consumable by diagram tooling."""
    grouped: dict[tuple[str, str, bool], int] = {}
    for flow in decomposition.flows:
        key = (flow.from_truth.primary, flow.to_pred.primary, flow.correct)
        grouped[key] = grouped.get(key, 0) + flow.count
    return [
        {"source": src, "target": dst, "value": value, "correct": correct}
        for (src, dst, correct), value in sorted(grouped.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2]))
    ]


def select_challenging(
    traces: Sequence[SessionTrace], truths: Mapping[str, DepartmentRef]
) -> list[str]:
    """Sessions wrong at round 1 but fully correct at the final round."""
    usable = _completed(traces)
    if any(len(t.recommendations) < 2 for t in usable):
        raise ValueError("challenging-case selection needs at least two rounds")
    selected = []
    for trace in usable:
        truth = _aligned_truth(trace, truths)
        first = match_level(trace.recommendations[0].best, truth)
        final = match_level(trace.recommendations[-1].best, truth)
        if first is not MatchLevel.FULL and final is MatchLevel.FULL:
            selected.append(trace.session_id)
    return selected


def inquiry_efficiency(round_accuracy: Sequence[RoundAccuracy]) -> EfficiencyReport:
    """Round t >= 2 is effective iff overall accuracy strictly improved."""
    if len(round_accuracy) < 2:
        raise ValueError("inquiry efficiency needs at least two rounds")
    effective = sum(
        1
        for prev, cur in zip(round_accuracy, round_accuracy[1:])
        if cur.overall > prev.overall
    )
    return EfficiencyReport(
        effective_rounds=effective, candidate_rounds=len(round_accuracy) - 1
    )


def rubric_aggregate(scores: Sequence[SixDimScore]) -> RubricSummary:
    """Arithmetic per-dimension means (two decimals) plus the overall mean."""
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    means = {
        dim: round(sum(getattr(s, dim) for s in scores) / len(scores), 2)
        for dim in SCORE_DIMENSIONS
    }
    overall = round(
        sum(getattr(s, dim) for s in scores for dim in SCORE_DIMENSIONS)
        / (len(scores) * len(SCORE_DIMENSIONS)),
        2,
    )
    return RubricSummary(means=means, overall=overall, n=len(scores))


@dataclass(frozen=True)
class AblationRow:
    variant: str
    overall: float
    primary: float
    secondary: float
    gain: float


def ablation_row(variant: str, round_accuracy: Sequence[RoundAccuracy]) -> AblationRow:
    final = round_accuracy[-1]
    return AblationRow(
        variant=variant,
        overall=final.overall,
        primary=final.primary,
        secondary=final.secondary,
        gain=overall_gain(round_accuracy),
    )


@dataclass
class ReportBundle:
    """Everything export_report can write; fill in whatever a run produced."""

    round_accuracy: list[RoundAccuracy] = field(default_factory=list)
    department_accuracy: list[DepartmentAccuracy] = field(default_factory=list)
    macro_average: float | None = None
    decomposition: ErrorDecomposition | None = None
    rubric: RubricSummary | None = None
    ablation: list[AblationRow] = field(default_factory=list)
    efficiency: list[tuple[str, EfficiencyReport]] = field(default_factory=list)


def _write_csv(path: Path, header_note: str, fieldnames: list[str], rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header_note}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _write_json(path: Path, header_note: str, rows) -> None:
    path.write_text(
        json.dumps({"note": header_note, "rows": rows}, ensure_ascii=False, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )


def export_report(
    results: ReportBundle,
    out_dir: str | Path,
    formats: Iterable[str] = ("csv", "json"),
) -> list[Path]:
    """Write every populated table in every requested format; returns the
    file list."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    formats = set(formats)
    unknown = formats - {"csv", "json"}
    if unknown:
        raise ValueError(f"unsupported report formats: {sorted(unknown)}")
    written: list[Path] = []

    def emit(name: str, note: str, fieldnames: list[str], rows: list[dict]) -> None:
        if "csv" in formats:
            path = out_dir / f"{name}.csv"
            _write_csv(path, note, fieldnames, rows)
            written.append(path)
        if "json" in formats:
            path = out_dir / f"{name}.json"
            _write_json(path, note, rows)
            written.append(path)

    if results.round_accuracy:
        emit(
            "accuracy_by_round",
            SECONDARY_DEFINITION_NOTE,
            ["round", "primary", "secondary", "overall", "n"],
            [
                {
                    "round": r.round,
                    "primary": r.primary,
                    "secondary": r.secondary,
                    "overall": r.overall,
                    "n": r.n,
                }
                for r in results.round_accuracy
            ],
        )
    if results.department_accuracy:
        note = "final-round full-match rate per true primary department"
        if results.macro_average is not None:
            note += f"; macro (unweighted) average = {results.macro_average}"
        emit(
            "department_accuracy",
            note,
            ["primary_dept", "accuracy", "n"],
            [
                {"primary_dept": r.primary_dept, "accuracy": r.accuracy, "n": r.n}
                for r in results.department_accuracy
            ],
        )
    if results.decomposition is not None:
        d = results.decomposition
        emit(
            "sankey_links",
            "truth -> prediction flows at primary level; correct marks full matches; "
            f"outcome split over n={d.n}: correct {d.correct}, "
            f"secondary-only error {d.secondary_only_error}, primary error {d.primary_error}",
            ["source", "target", "value", "correct"],
            sankey_links(d),
        )
    if results.rubric is not None:
        emit(
            "radar",
            f"per-dimension means over {results.rubric.n} sessions; overall = {results.rubric.overall}",
            ["dimension", "mean"],
            results.rubric.radar_rows(),
        )
    if results.ablation:
        emit(
            "ablation_comparison",
            "final-round accuracy per variant; gain = overall(final) - overall(round 1)",
            ["variant", "overall", "primary", "secondary", "gain"],
            [
                {
                    "variant": r.variant,
                    "overall": r.overall,
                    "primary": r.primary,
                    "secondary": r.secondary,
                    "gain": r.gain,
                }
                for r in results.ablation
            ],
        )
    if results.efficiency:
        emit(
            "inquiry_efficiency",
            "effective rounds strictly improve overall accuracy",
            ["variant", "effective_inquiry_rounds"],
            [
                {"variant": variant, "effective_inquiry_rounds": report.formatted()}
                for variant, report in results.efficiency
            ],
        )
    return written
