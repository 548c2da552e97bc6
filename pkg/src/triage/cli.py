"""Command-line surface: batch simulation, ablation harness, metrics,
dataset construction, KB linting, fixture generation, and the HTTP service."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from .domain import load_dataset, load_default_taxonomy, save_dataset, taxonomy_load
from .errors import TriageError
from .evaluation import (
    ReportBundle,
    ablation_row,
    accuracy_by_round,
    department_accuracy,
    error_flows,
    export_report,
    inquiry_efficiency,
    rubric_aggregate,
    select_challenging,
)
from .guidance import load_kbs
from .llm_gateway import ENV_ENDPOINT, ENV_MODEL, BackendConfig
from .orchestrator import (
    VARIANTS,
    Resources,
    SessionConfig,
    ablation_config,
    load_traces,
    run_batch,
    save_traces,
    uniform_backends,
)
from .pipeline import build_dataset, synth_fixtures
from .synthetic import record_reply_fixtures


def _load_taxonomy(path: str | None):
    return taxonomy_load(path) if path else load_default_taxonomy()


def _session_config(
    rounds: int,
    variant: str,
    backend: str,
    fixtures: str | None,
    taxonomy: str | None,
    kb: str | None,
    templates: str | None,
    evaluate: bool = False,
) -> SessionConfig:
    if backend == "scripted":
        if not fixtures:
            raise click.UsageError("--fixtures is required with the scripted backend")
        backend_config = BackendConfig(kind="scripted", fixture_path=Path(fixtures))
    else:
        backend_config = BackendConfig(
            kind="live",
            endpoint=os.environ.get(ENV_ENDPOINT, ""),
            model_id=os.environ.get(ENV_MODEL, ""),
        )
    return SessionConfig(
        rounds=rounds,
        variant=variant,
        backends=uniform_backends(backend_config),
        taxonomy_path=taxonomy,
        kb_dir=kb,
        template_dir=templates,
        evaluate=evaluate,
    )


@click.group()
def cli() -> None:
    """Multi-agent interactive triage toolkit."""


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--rounds", default=4, show_default=True, type=int)
@click.option("--variant", default="full", type=click.Choice(VARIANTS), show_default=True)
@click.option("--backend", default="scripted", type=click.Choice(["scripted", "live"]), show_default=True)
@click.option("--fixtures", type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
@click.option("--kb", type=click.Path(exists=True, file_okay=False))
@click.option("--templates", type=click.Path(exists=True, file_okay=False))
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--evaluate", is_flag=True, help="Score each completed session on the six-dimension rubric.")
def simulate(data, out, rounds, variant, backend, fixtures, taxonomy, kb, templates, workers, evaluate):
    """Run simulated sessions over a dataset and write a trace file."""
    config = _session_config(rounds, variant, backend, fixtures, taxonomy, kb, templates, evaluate)
    active_taxonomy = _load_taxonomy(taxonomy)
    records = load_dataset(data, active_taxonomy)
    resources = Resources.load(config)
    traces = run_batch(records, config, resources, workers=workers)
    save_traces(traces, out)
    completed = sum(t.completed for t in traces)
    click.echo(f"sessions: {len(traces)}  completed: {completed}  aborted: {len(traces) - completed}")
    if completed:
        truths = {r.id: r.truth for r in records}
        usable = [t for t in traces if t.completed]
        acc = accuracy_by_round(usable, truths)
        final = acc[-1]
        click.echo(
            f"final-round accuracy: overall {final.overall}%  "
            f"primary {final.primary}%  secondary {final.secondary}%"
        )
    click.echo(f"traces written to {out}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--challenging", "challenging_traces", type=click.Path(exists=True, dir_okay=False),
              help="Baseline trace file; restricts the run to sessions wrong at round 1 but correct at the end.")
@click.option("--rounds", default=4, show_default=True, type=int)
@click.option("--fixtures-dir", type=click.Path(file_okay=False),
              help="Directory of per-variant reply fixtures (replies_<variant>.jsonl).")
@click.option("--record-fixtures", is_flag=True,
              help="Record per-variant fixtures with the deterministic synthetic responder first.")
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
@click.option("--kb", type=click.Path(exists=True, file_okay=False))
@click.option("--templates", type=click.Path(exists=True, file_okay=False))
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--formats", default="csv,json", show_default=True)
def ablate(data, out, challenging_traces, rounds, fixtures_dir, record_fixtures,
           taxonomy, kb, templates, workers, formats):
    """Run all guidance ablation variants and emit comparison reports."""
    active_taxonomy = _load_taxonomy(taxonomy)
    records = load_dataset(data, active_taxonomy)
    truths = {r.id: r.truth for r in records}
    if challenging_traces:
        baseline = [t for t in load_traces(challenging_traces) if t.completed]
        ids = set(select_challenging(baseline, truths))
        records = [r for r in records if r.id in ids]
        if not records:
            raise click.ClickException("no challenging sessions found in the baseline traces")
        click.echo(f"challenging subset: {len(records)} of {len(truths)} sessions")
    fixtures_base = Path(fixtures_dir) if fixtures_dir else Path(out) / "fixtures"
    base = SessionConfig(rounds=rounds, taxonomy_path=taxonomy, kb_dir=kb, template_dir=templates)
    bundle = ReportBundle()
    for variant in VARIANTS:
        variant_config = ablation_config(base, variant)
        fixture_path = fixtures_base / f"replies_{variant}.jsonl"
        if record_fixtures or not fixture_path.exists():
            fixture_path.parent.mkdir(parents=True, exist_ok=True)
            record_reply_fixtures(records, variant_config, fixture_path,
                                  challenging=bool(challenging_traces))
        replay_config = SessionConfig(
            rounds=rounds,
            variant=variant,
            backends=uniform_backends(BackendConfig(kind="scripted", fixture_path=fixture_path)),
            taxonomy_path=taxonomy,
            kb_dir=kb,
            template_dir=templates,
        )
        resources = Resources.load(replay_config)
        traces = run_batch(records, replay_config, resources, workers=workers)
        usable = [t for t in traces if t.completed]
        if not usable:
            raise click.ClickException(f"variant {variant}: no completed sessions")
        acc = accuracy_by_round(usable, truths)
        bundle.ablation.append(ablation_row(variant, acc))
        bundle.efficiency.append((variant, inquiry_efficiency(acc)))
        recipient_calls = resources.call_count("recipient")
        click.echo(
            f"{variant:8s} overall {acc[-1].overall:5.1f}  gain {bundle.ablation[-1].gain:+5.1f}  "
            f"efficiency {bundle.efficiency[-1][1].formatted()}  recipient calls {recipient_calls}"
        )
        if variant == "no_hpi" and recipient_calls != 0:
            raise click.ClickException("no_hpi variant must never invoke the recipient backend")
    files = export_report(bundle, out, formats=[f.strip() for f in formats.split(",") if f.strip()])
    click.echo(f"reports written: {', '.join(str(f) for f in files)}")


@cli.command()
@click.option("--traces", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--formats", default="csv,json", show_default=True)
def evaluate(traces, data, taxonomy, out, formats):
    """Compute all objective metrics over a saved trace file."""
    active_taxonomy = _load_taxonomy(taxonomy)
    records = load_dataset(data, active_taxonomy)
    truths = {r.id: r.truth for r in records}
    loaded = [t for t in load_traces(traces) if t.completed]
    if not loaded:
        raise click.ClickException("trace file contains no completed sessions")
    acc = accuracy_by_round(loaded, truths)
    table, macro = department_accuracy(loaded, truths, active_taxonomy)
    bundle = ReportBundle(
        round_accuracy=acc,
        department_accuracy=table,
        macro_average=macro,
        decomposition=error_flows(loaded, truths),
    )
    scores = [t.score for t in loaded if t.score is not None]
    if scores:
        bundle.rubric = rubric_aggregate(scores)
    if len(acc) >= 2:
        bundle.efficiency = [("run", inquiry_efficiency(acc))]
    files = export_report(bundle, out, formats=[f.strip() for f in formats.split(",") if f.strip()])
    click.echo(f"final-round overall accuracy: {acc[-1].overall}%  (n={acc[-1].n})")
    click.echo(f"reports written: {', '.join(str(f) for f in files)}")


@cli.group()
def dataset() -> None:
    """Dataset construction commands."""


@dataset.command("build")
@click.option("--in", "raw_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
@click.option("--templates", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", default="none", type=click.Choice(["none", "scripted", "live"]), show_default=True)
@click.option("--fixtures", type=click.Path(exists=True, dir_okay=False))
def dataset_build(raw_path, out, taxonomy, templates, backend, fixtures):
    """Clean a raw export into the JSON Lines dataset format."""
    from .agents import TemplateSet, load_default_templates
    from .llm_gateway import backend_for

    active_taxonomy = _load_taxonomy(taxonomy)
    template_set = TemplateSet(templates) if templates else load_default_templates()
    completion_backend = None
    if backend == "scripted":
        if not fixtures:
            raise click.UsageError("--fixtures is required with the scripted backend")
        completion_backend = backend_for(BackendConfig(kind="scripted", fixture_path=Path(fixtures)))
    elif backend == "live":
        completion_backend = backend_for(
            BackendConfig(kind="live", endpoint=os.environ.get(ENV_ENDPOINT, ""),
                          model_id=os.environ.get(ENV_MODEL, ""))
        )
    records, report = build_dataset(raw_path, active_taxonomy, template_set, completion_backend)
    save_dataset(records, out)
    click.echo(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    click.echo(f"dataset written to {out}")


@cli.command("kb-lint")
@click.argument("kb_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
def kb_lint(kb_dir, taxonomy):
    """Validate a knowledge-base directory against a taxonomy."""
    active_taxonomy = _load_taxonomy(taxonomy)
    kbs = load_kbs(kb_dir, active_taxonomy)
    click.echo(
        f"OK: {len(kbs.inquiry)} department entries, {len(kbs.classification)} comparison rules, "
        f"{len(kbs.findings)} finding tags"
    )


@cli.command()
@click.option("--addr", default=None, help="host:port (default from $TRIAGE_HTTP_ADDR or 127.0.0.1:8321)")
@click.option("--db", default="triage_sessions.db", show_default=True, type=click.Path(dir_okay=False))
@click.option("--rounds", default=4, show_default=True, type=int)
@click.option("--variant", default="full", type=click.Choice(VARIANTS), show_default=True)
@click.option("--backend", default="live", type=click.Choice(["scripted", "live"]), show_default=True)
@click.option("--fixtures", type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
@click.option("--kb", type=click.Path(exists=True, file_okay=False))
@click.option("--templates", type=click.Path(exists=True, file_okay=False))
@click.option("--expiry", default=1800.0, show_default=True, type=float,
              help="Idle session expiry in seconds.")
@click.option("--static", "static_dir", type=click.Path(file_okay=False),
              help="Directory of built console assets to serve at /.")
def serve(addr, db, rounds, variant, backend, fixtures, taxonomy, kb, templates, expiry, static_dir):
    """Start the HTTP session service."""
    import uvicorn

    from .service import ENV_HTTP_ADDR as _addr_env
    from .service import ENV_HTTP_TOKEN, ServiceConfig, create_app

    addr = addr or os.environ.get(_addr_env, "127.0.0.1:8321")
    host, _, port = addr.partition(":")
    session_config = _session_config(rounds, variant, backend, fixtures, taxonomy, kb, templates)
    config = ServiceConfig(
        session_config=session_config,
        db_path=Path(db),
        idle_expiry_seconds=expiry,
        bearer_token=os.environ.get(ENV_HTTP_TOKEN) or None,
        static_dir=Path(static_dir) if static_dir else None,
    )
    app = create_app(config)
    click.echo(f"serving on http://{addr}")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or "8321"), log_level="warning")


@cli.group()
def fixtures() -> None:
    """Synthetic fixture generation."""


@fixtures.command("gen")
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--n", default=20, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False))
@click.option("--one-per-primary", is_flag=True)
@click.option("--replies", type=click.Path(dir_okay=False),
              help="Also record a scripted reply fixture for these records.")
@click.option("--rounds", default=4, show_default=True, type=int)
@click.option("--variant", default="full", type=click.Choice(VARIANTS), show_default=True)
@click.option("--challenging", is_flag=True,
              help="Force first-round-wrong, final-round-right reply trajectories.")
@click.option("--evaluate", is_flag=True, help="Record evaluator replies too.")
def fixtures_gen(seed, n, out, taxonomy, one_per_primary, replies, rounds, variant, challenging, evaluate):
    """Generate synthetic patient records (and optionally reply fixtures)."""
    active_taxonomy = _load_taxonomy(taxonomy)
    records = synth_fixtures(seed, n, active_taxonomy, one_per_primary=one_per_primary)
    save_dataset(records, out)
    click.echo(f"{len(records)} records written to {out}")
    if replies:
        config = SessionConfig(
            rounds=rounds, variant=variant, taxonomy_path=taxonomy, evaluate=evaluate
        )
        traces = record_reply_fixtures(records, config, replies, challenging=challenging)
        completed = sum(t.completed for t in traces)
        click.echo(f"reply fixture written to {replies} ({completed}/{len(traces)} sessions completed)")


def cli_dispatch(argv) -> int:
    """Programmatic entry point: returns the exit status instead of exiting."""
    try:
        cli.main(args=list(argv), standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return 1
    except TriageError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
