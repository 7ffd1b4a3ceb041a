"""HTTP facade over extraction, bundling, validation, and trial matching.

Every handler reads the registry reference once, so a concurrent reload
(an atomic swap) never mixes two registries inside one request.  Bundle
responses use the canonical wire text with the FHIR JSON content type;
everything else is plain JSON.  Error responses always carry a
machine-readable {code, message, path?} body.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any

from fastapi import FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import __version__, conformance, extraction, fhir_builder, fhir_core, mcode
from .conformance import MetricsReport, ValidationIssue, ValidationReport
from .extraction import BackendFailureError, EmptyNoteError, RawNote
from .matching import NoPatientError, facts_from_bundle, match_all, to_searchset
from .registry import (
    Registry,
    filter_trials,
    load_registry,
    page_count,
    paginate,
    record_to_dict,
)

FHIR_JSON = "application/fhir+json"

_PAGINATION_HEADERS = (
    "X-Total-Count",
    "X-Range-Label",
    "X-Page",
    "X-Page-Size",
    "X-Page-Count",
)


@dataclass
class ServiceConfig:
    port: int = 8765
    registry_path: Path | None = None
    data_dir: Path | None = None
    extractor_url: str | None = None
    cors_allowed_origin: str = "http://localhost:5173"

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")


def config_from_env() -> ServiceConfig:
    registry = os.environ.get("ONCO_REGISTRY")
    data_dir = os.environ.get("ONCO_DATA_DIR")
    return ServiceConfig(
        port=int(os.environ.get("ONCO_PORT", "8765")),
        registry_path=Path(registry) if registry else None,
        data_dir=Path(data_dir) if data_dir else None,
        extractor_url=os.environ.get("ONCO_EXTRACTOR_URL") or None,
    )


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, path: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.path = path

    def body(self) -> dict[str, str]:
        out = {"code": self.code, "message": self.message}
        if self.path is not None:
            out["path"] = self.path
        return out


def _schema_path(message: str) -> str | None:
    # Schema diagnostics lead with the element path ("a.b: detail").
    head, sep, _ = message.partition(": ")
    if sep and head and " " not in head:
        return head
    return None


def _parse_wire_bundle(raw: bytes) -> fhir_core.Bundle:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ApiError(400, "SyntaxError", f"body is not UTF-8: {exc}") from exc
    try:
        return fhir_core.parse_bundle(text)
    except fhir_core.WireSyntaxError as exc:
        raise ApiError(400, "SyntaxError", str(exc)) from exc
    except (fhir_core.SchemaError, fhir_core.DanglingReferenceError) as exc:
        raise ApiError(400, "SchemaError", str(exc), path=_schema_path(str(exc))) from exc


def _bundle_response(bundle: fhir_core.Bundle, headers: dict[str, str] | None = None) -> Response:
    return Response(
        content=fhir_core.serialize_bundle(bundle),
        media_type=FHIR_JSON,
        headers=headers or {},
    )


def _fraction_dict(f: Fraction) -> dict[str, Any]:
    return {"numerator": f.numerator, "denominator": f.denominator, "value": float(f)}


def metrics_report_dict(report: MetricsReport) -> dict[str, Any]:
    return {
        "perSystemAccuracy": {
            system.value: _fraction_dict(accuracy)
            for system, accuracy in sorted(report.per_system_accuracy.items())
        },
        "conformanceRate": _fraction_dict(report.conformance_rate),
        "disagreementAccuracy": _fraction_dict(report.disagreement_accuracy),
    }


def _issue_dict(issue: ValidationIssue) -> dict[str, str]:
    return {
        "severity": issue.severity.value,
        "path": issue.path,
        "rule": issue.rule,
        "message": issue.message,
    }


def validation_report_dict(report: ValidationReport) -> dict[str, Any]:
    return {
        "conformant": report.conformant,
        "bundleIssues": [_issue_dict(i) for i in report.bundle_issues],
        "entryIssues": [
            {"entry": entry_id, "issues": [_issue_dict(i) for i in issues]}
            for entry_id, issues in report.entry_issues
        ],
    }


def _match_filters(recruitment, phase, study_type, condition_term) -> dict[str, Any]:
    return {
        "recruitment": recruitment,
        "phase": phase,
        "study_type": study_type,
        "condition_term": condition_term,
    }


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or config_from_env()
    app = FastAPI(
        title="oncopipe",
        version=__version__,
        description="Clinical note standardization and trial matching service.",
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[config.cors_allowed_origin],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=list(_PAGINATION_HEADERS),
    )
    app.state.config = config
    if config.extractor_url:
        app.state.extractor = extraction.http_extractor(config.extractor_url)
    else:
        app.state.extractor = extraction.baseline_extractor()
    app.state.registry = load_registry(config.registry_path)

    @app.exception_handler(ApiError)
    async def api_error_handler(request: Request, exc: ApiError):
        return JSONResponse(exc.body(), status_code=exc.status)

    @app.exception_handler(RequestValidationError)
    async def query_error_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        path = ".".join(str(part) for part in first.get("loc", ()) if part != "query")
        body = {
            "code": "InvalidParameter",
            "message": first.get("msg", "invalid request parameter"),
            "path": path,
        }
        return JSONResponse(body, status_code=400)

    @app.post("/api/convert")
    async def convert(request: Request) -> Response:
        raw = await request.body()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ApiError(400, "SyntaxError", f"body is not UTF-8: {exc}") from exc
        try:
            variables = extraction.run_extractor(app.state.extractor, RawNote(text=text))
        except EmptyNoteError as exc:
            raise ApiError(400, "EmptyNote", str(exc)) from exc
        except BackendFailureError as exc:
            raise ApiError(502, "BackendFailure", str(exc)) from exc
        return _bundle_response(fhir_builder.build_bundle(variables))

    @app.post("/api/mcode")
    async def to_mcode(request: Request) -> Response:
        bundle = _parse_wire_bundle(await request.body())
        return _bundle_response(mcode.to_mcode_bundle(bundle))

    @app.post("/api/validate")
    async def validate(request: Request) -> JSONResponse:
        bundle = _parse_wire_bundle(await request.body())
        return JSONResponse(validation_report_dict(conformance.validate_bundle(bundle)))

    @app.get("/api/metrics")
    async def metrics() -> JSONResponse:
        pairs = conformance.load_corpus()
        scored = conformance.score(
            [
                (extraction.run_extractor(app.state.extractor, RawNote(text=text)), gold)
                for text, gold in pairs
            ]
        )
        return JSONResponse(metrics_report_dict(scored))

    @app.post("/api/match")
    async def match(
        request: Request,
        page: int = Query(1),
        page_size: int = Query(10, alias="pageSize"),
        recruitment: str | None = Query(None),
        phase: str | None = Query(None),
        study_type: str | None = Query(None, alias="studyType"),
        condition_term: str | None = Query(None, alias="conditionTerm"),
    ) -> Response:
        registry: Registry = app.state.registry
        bundle = _parse_wire_bundle(await request.body())
        try:
            facts = facts_from_bundle(bundle)
        except NoPatientError as exc:
            raise ApiError(400, "NoPatient", str(exc)) from exc
        try:
            results = match_all(
                registry,
                facts,
                **_match_filters(recruitment, phase, study_type, condition_term),
            )
        except ValueError as exc:
            raise ApiError(400, "InvalidFilter", str(exc)) from exc
        try:
            _, total, label = paginate(results, page, page_size)
            searchset = to_searchset(results, page, page_size, registry=registry)
        except ValueError as exc:
            raise ApiError(400, "InvalidParameter", str(exc)) from exc
        return _bundle_response(
            searchset,
            headers={
                "X-Total-Count": str(total),
                "X-Range-Label": label,
                "X-Page": str(page),
                "X-Page-Size": str(page_size),
                "X-Page-Count": str(page_count(total, page_size)),
            },
        )

    @app.get("/api/trials")
    async def trials(
        page: int = Query(1),
        page_size: int = Query(10, alias="pageSize"),
        recruitment: str | None = Query(None),
        phase: str | None = Query(None),
        study_type: str | None = Query(None, alias="studyType"),
        condition_term: str | None = Query(None, alias="conditionTerm"),
    ) -> JSONResponse:
        registry: Registry = app.state.registry
        try:
            records = filter_trials(
                registry,
                recruitment=recruitment,
                phase=phase,
                study_type=study_type,
                condition_term=condition_term,
            )
        except ValueError as exc:
            raise ApiError(400, "InvalidFilter", str(exc)) from exc
        try:
            chunk, total, label = paginate(records, page, page_size)
        except ValueError as exc:
            raise ApiError(400, "InvalidParameter", str(exc)) from exc
        return JSONResponse(
            {
                "items": [record_to_dict(r) for r in chunk],
                "total": total,
                "page": page,
                "pageSize": page_size,
                "pageCount": page_count(total, page_size),
                "label": label,
            }
        )

    @app.get("/api/trials/{trial_id}")
    async def trial_detail(trial_id: str) -> JSONResponse:
        registry: Registry = app.state.registry
        record = registry.get(trial_id)
        if record is None:
            raise ApiError(404, "UnknownTrial", f"no trial with id {trial_id!r}")
        return JSONResponse(record_to_dict(record))

    @app.post("/api/reload")
    async def reload() -> JSONResponse:
        try:
            fresh = load_registry(config.registry_path)
        except Exception as exc:
            raise ApiError(500, "RegistryError", str(exc)) from exc
        app.state.registry = fresh
        return JSONResponse({"trials": len(fresh)})

    return app


def run(config: ServiceConfig | None = None) -> None:
    """Start a blocking uvicorn server for the app."""
    import uvicorn

    config = config or config_from_env()
    uvicorn.run(create_app(config), host="127.0.0.1", port=config.port, log_level="warning")
