"""Batch access to the pipeline for scripting and CI.

Exit codes: 0 success (validate: conformant), 1 data or validation
failure, 2 usage error, 3 I/O error.  Diagnostics go to standard error;
stdout carries only command output, and convert/mcode write the exact
bundle wire text so shell pipelines and the HTTP service byte-match.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from . import conformance, extraction, fhir_builder, fhir_core, mcode
from .extraction import BackendFailureError, EmptyNoteError, RawNote
from .matching import NoPatientError, facts_from_bundle, match_all
from .registry import ParseError, load_registry, paginate


class DataError(click.ClickException):
    exit_code = 1


class IoError(click.ClickException):
    exit_code = 3


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_output(text: str, out_path: Path | None) -> None:
    if out_path is None:
        click.echo(text, nl=False)
        return
    try:
        out_path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {out_path}: {exc}") from exc


def _parse_bundle_file(path: Path) -> fhir_core.Bundle:
    try:
        return fhir_core.parse_bundle(_read_text(path))
    except (
        fhir_core.WireSyntaxError,
        fhir_core.SchemaError,
        fhir_core.DanglingReferenceError,
    ) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _extractor() -> extraction.ExtractorContract:
    url = os.environ.get("ONCO_EXTRACTOR_URL")
    if url:
        return extraction.http_extractor(url)
    return extraction.baseline_extractor()


@click.group()
def main() -> None:
    """Oncology note standardization and clinical trial matching."""


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
def convert(in_path: Path, out_path: Path | None) -> None:
    """Extract a clinical note into a document bundle."""
    text = _read_text(in_path)
    try:
        variables = extraction.run_extractor(_extractor(), RawNote(text=text))
    except (EmptyNoteError, BackendFailureError) as exc:
        raise DataError(str(exc)) from exc
    _write_output(fhir_core.serialize_bundle(fhir_builder.build_bundle(variables)), out_path)


@main.command(name="mcode")
@click.option("--in", "in_path", required=True, type=click.Path(path_type=Path))
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
def mcode_command(in_path: Path, out_path: Path | None) -> None:
    """Tag a bundle with oncology profiles."""
    bundle = _parse_bundle_file(in_path)
    _write_output(fhir_core.serialize_bundle(mcode.to_mcode_bundle(bundle)), out_path)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(path_type=Path))
@click.pass_context
def validate(ctx: click.Context, in_path: Path) -> None:
    """Check a bundle against the shipped profiles; exit 0 iff conformant."""
    report = conformance.validate_bundle(_parse_bundle_file(in_path))
    for issue in report.bundle_issues:
        click.echo(f"{issue.severity.value} bundle {issue.path}: {issue.message}")
    for entry_id, issues in report.entry_issues:
        for issue in issues:
            click.echo(f"{issue.severity.value} {entry_id} {issue.path}: {issue.message}")
    if report.conformant:
        click.echo("conformant")
        return
    errors = sum(1 for i in report.issues if i.severity is conformance.Severity.ERROR)
    click.echo(f"{errors} error(s)")
    ctx.exit(1)


@main.command()
@click.option("--bundle", "bundle_path", required=True, type=click.Path(path_type=Path))
@click.option("--registry", "registry_path", type=click.Path(path_type=Path), default=None)
@click.option("--page", default=1, show_default=True)
@click.option("--page-size", default=10, show_default=True)
@click.option("--recruitment", default=None)
@click.option("--phase", default=None)
@click.option("--study-type", default=None)
@click.option("--condition-term", default=None)
def match(
    bundle_path: Path,
    registry_path: Path | None,
    page: int,
    page_size: int,
    recruitment: str | None,
    phase: str | None,
    study_type: str | None,
    condition_term: str | None,
) -> None:
    """Rank registry trials against the patient bundle."""
    bundle = _parse_bundle_file(bundle_path)
    try:
        registry = load_registry(registry_path)
    except OSError as exc:
        raise IoError(f"cannot read registry: {exc}") from exc
    except ParseError as exc:
        raise DataError(f"registry: {exc}") from exc
    try:
        facts = facts_from_bundle(bundle)
        results = match_all(
            registry,
            facts,
            recruitment=recruitment,
            phase=phase,
            study_type=study_type,
            condition_term=condition_term,
        )
        chunk, _, label = paginate(results, page, page_size)
    except (NoPatientError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    click.echo(label)
    for result in chunk:
        record = registry.get(result.trial_id)
        title = record.title if record else ""
        if len(title) > 60:
            title = title[:57] + "..."
        click.echo(
            f"{result.trial_id:<12} {result.likelihood.value:<14} "
            f"{float(result.score):>5.2f}  {title}"
        )


@main.command()
@click.option("--corpus", "corpus_dir", type=click.Path(path_type=Path), default=None)
def score(corpus_dir: Path | None) -> None:
    """Score the extractor against an annotated corpus."""
    try:
        pairs = conformance.load_corpus(corpus_dir)
    except OSError as exc:
        raise IoError(f"cannot read corpus: {exc}") from exc
    except (conformance.CorpusFormatError, conformance.EmptyCorpusError) as exc:
        raise DataError(str(exc)) from exc
    extractor = _extractor()
    try:
        report = conformance.score(
            [
                (extraction.run_extractor(extractor, RawNote(text=text)), gold)
                for text, gold in pairs
            ]
        )
    except (EmptyNoteError, BackendFailureError, conformance.EmptyCorpusError) as exc:
        raise DataError(str(exc)) from exc
    for system, accuracy in sorted(report.per_system_accuracy.items()):
        click.echo(f"{system.value} accuracy: {accuracy} ({float(accuracy):.3f})")
    click.echo(
        f"Conformance rate: {report.conformance_rate} "
        f"({float(report.conformance_rate):.3f})"
    )
    click.echo(
        f"Disagreement accuracy: {report.disagreement_accuracy} "
        f"({float(report.disagreement_accuracy):.3f})"
    )


@main.command()
@click.option("--port", default=None, type=int)
@click.option("--registry", "registry_path", type=click.Path(path_type=Path), default=None)
@click.option("--data-dir", type=click.Path(path_type=Path), default=None)
@click.option("--extractor-url", default=None)
@click.option("--cors-origin", default=None)
def serve(
    port: int | None,
    registry_path: Path | None,
    data_dir: Path | None,
    extractor_url: str | None,
    cors_origin: str | None,
) -> None:
    """Run the HTTP service (blocking)."""
    from . import service

    if data_dir is not None:
        os.environ["ONCO_DATA_DIR"] = str(data_dir)
    config = service.config_from_env()
    if port is not None:
        try:
            config.port = port
            config.__post_init__()
        except ValueError as exc:
            raise click.UsageError(str(exc)) from exc
    if registry_path is not None:
        config.registry_path = registry_path
    if data_dir is not None:
        config.data_dir = data_dir
    if extractor_url is not None:
        config.extractor_url = extractor_url
    if cors_origin is not None:
        config.cors_allowed_origin = cors_origin
    service.run(config)


if __name__ == "__main__":
    sys.exit(main())
