"""FHIR R4 resource subset: parsing, canonical serialization, bundles.

The wire format is FHIR-style JSON with a fixed key order (resourceType,
id, meta, extension, then the type's schema order, then unknown keys
sorted), 2-space indent, UTF-8, and ISO-8601 UTC timestamps.  Texts
produced here re-serialize byte-for-byte; foreign texts are normalized
onto the canonical form while unknown keys ride along losslessly.

Only the resource types this pipeline emits are supported.  Elements the
pipeline does not interpret structurally (names, identifiers, reactions)
pass through as opaque JSON.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Any, Iterator

from .terminology import CodeSystem, SYSTEM_URI, valueset


class WireSyntaxError(Exception):
    """Input is not well-formed JSON or not a JSON object."""


class SchemaError(Exception):
    """Input violates the resource subset schema; message carries the path."""


class DanglingReferenceError(Exception):
    """A document/collection bundle references resources it does not contain."""

    def __init__(self, missing: list[str]):
        super().__init__("dangling references: " + ", ".join(sorted(missing)))
        self.missing = sorted(missing)


class ReferenceNotFoundError(Exception):
    """resolve_reference target is absent from the bundle."""


@dataclass(frozen=True)
class ResourceSchema:
    elements: tuple[str, ...]
    statuses: tuple[tuple[str, str], ...] = ()   # (element, value-set name)
    datetimes: tuple[str, ...] = ()              # dotted paths, [] marks lists
    references: tuple[str, ...] = ()


SCHEMAS: dict[str, ResourceSchema] = {
    "Patient": ResourceSchema(
        elements=("identifier", "name", "gender", "birthDate", "maritalStatus"),
        datetimes=("birthDate",),
    ),
    "Condition": ResourceSchema(
        elements=("code", "clinicalStatus", "verificationStatus", "onsetDateTime", "stage", "bodySite", "subject"),
        statuses=(("clinicalStatus", "condition-clinical"), ("verificationStatus", "condition-verification")),
        datetimes=("onsetDateTime",),
        references=("subject", "stage[].assessment[]"),
    ),
    "Observation": ResourceSchema(
        elements=("status", "category", "code", "text", "subject", "effectiveDateTime",
                  "valueString", "valueCodeableConcept", "specimen"),
        statuses=(("status", "observation-status"),),
        datetimes=("effectiveDateTime",),
        references=("subject", "specimen"),
    ),
    "MedicationRequest": ResourceSchema(
        elements=("status", "intent", "medicationCodeableConcept", "subject", "dosageInstruction"),
        statuses=(("status", "medication-request-status"), ("intent", "medication-request-intent")),
        references=("subject",),
    ),
    "Procedure": ResourceSchema(
        elements=("status", "code", "subject", "performedDateTime"),
        statuses=(("status", "procedure-status"),),
        datetimes=("performedDateTime",),
        references=("subject",),
    ),
    "Specimen": ResourceSchema(
        elements=("type", "subject", "collection", "note"),
        datetimes=("collection.collectedDateTime",),
        references=("subject",),
    ),
    "DiagnosticReport": ResourceSchema(
        elements=("status", "category", "code", "text", "subject", "effectiveDateTime",
                  "issued", "performer", "specimen", "result"),
        statuses=(("status", "diagnostic-report-status"),),
        datetimes=("effectiveDateTime", "issued"),
        references=("subject", "specimen[]", "result[]"),
    ),
    "AllergyIntolerance": ResourceSchema(
        elements=("code", "patient", "reaction"),
        references=("patient",),
    ),
    "ResearchStudy": ResourceSchema(
        elements=("identifier", "title", "status", "phase", "category", "condition",
                  "description", "enrollment"),
        statuses=(("status", "research-study-status"),),
    ),
    "OperationOutcome": ResourceSchema(
        elements=("issue",),
    ),
}

# Canonical entry order inside bundles.
RESOURCE_ORDER: dict[str, int] = {
    "Patient": 0,
    "Condition": 1,
    "Observation": 2,
    "MedicationRequest": 3,
    "Procedure": 4,
    "Specimen": 5,
    "DiagnosticReport": 6,
    "AllergyIntolerance": 7,
    "ResearchStudy": 8,
    "OperationOutcome": 9,
}

BUNDLE_KINDS = ("document", "collection", "searchset")

_REF_PATTERN = re.compile(r"^([A-Za-z]+)/([A-Za-z0-9\-.]{1,64})$")


@dataclass(frozen=True)
class Resource:
    """One FHIR resource: type, id, and the remaining body as JSON values.

    Treat instances as immutable; the body dict is never mutated after
    construction, so resources are safe to share between bundles.
    """

    resource_type: str
    id: str
    body: dict[str, Any] = field(default_factory=dict)

    @property
    def profiles(self) -> tuple[str, ...]:
        meta = self.body.get("meta")
        if isinstance(meta, dict):
            return tuple(meta.get("profile", ()))
        return ()

    @property
    def ref(self) -> str:
        return f"{self.resource_type}/{self.id}"

    def get(self, element: str, default: Any = None) -> Any:
        return self.body.get(element, default)


@dataclass(frozen=True)
class Bundle:
    kind: str
    resources: tuple[Resource, ...]
    total: int | None = None


# === datetime handling ===

_DATE_RE = re.compile(r"^(\d{4})(-(\d{2}))?(-(\d{2}))?$")
_INSTANT_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(\.\d+)?(Z|[+-]\d{2}:\d{2})?$"
)


def canonical_datetime(value: str, path: str = "value") -> str:
    """Validate a date-or-instant and return the canonical UTC form.

    Dates keep their precision (YYYY, YYYY-MM, YYYY-MM-DD); instants are
    converted to UTC with a trailing Z.  An instant without an offset is
    taken as already UTC.
    """
    if not isinstance(value, str):
        raise SchemaError(f"{path}: expected a date/instant string")
    m = _DATE_RE.match(value)
    if m:
        try:
            year = int(m.group(1))
            month = int(m.group(3)) if m.group(3) else 1
            day = int(m.group(5)) if m.group(5) else 1
            date(year, month, day)
        except ValueError as exc:
            raise SchemaError(f"{path}: invalid date {value!r}") from exc
        return value
    m = _INSTANT_RE.match(value)
    if not m:
        raise SchemaError(f"{path}: invalid date/instant {value!r}")
    text = value
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    elif m.group(8) is None:
        text = text + "+00:00"
    try:
        parsed = datetime.fromisoformat(text)
    except ValueError as exc:
        raise SchemaError(f"{path}: invalid instant {value!r}") from exc
    parsed = parsed.astimezone(timezone.utc)
    if parsed.microsecond:
        return parsed.strftime("%Y-%m-%dT%H:%M:%S.%f").rstrip("0") + "Z"
    return parsed.strftime("%Y-%m-%dT%H:%M:%SZ")


def datetime_precision(value: str) -> str:
    """'year', 'month', 'day', or 'instant' for a canonical value."""
    if _INSTANT_RE.match(value):
        return "instant"
    m = _DATE_RE.match(value)
    if not m:
        raise SchemaError(f"not a canonical date/instant: {value!r}")
    if m.group(5):
        return "day"
    if m.group(3):
        return "month"
    return "year"


# === path walking ===

def _walk_path(container: Any, parts: list[str], path_so_far: str) -> Iterator[tuple[Any, str, str | None]]:
    """Yield (parent, key, full_path) for each node addressed by a dotted path.

    A part ending in [] iterates list items.  Missing segments just yield
    nothing; presence requirements live in the conformance layer.
    """
    if not parts:
        return
    head, rest = parts[0], parts[1:]
    listy = head.endswith("[]")
    key = head[:-2] if listy else head
    if not isinstance(container, dict) or key not in container:
        return
    value = container[key]
    here = f"{path_so_far}.{key}" if path_so_far else key
    if listy:
        if not isinstance(value, list):
            raise SchemaError(f"{here}: expected a list")
        for i, item in enumerate(value):
            if rest:
                yield from _walk_path(item, rest, f"{here}[{i}]")
            else:
                yield value, str(i), f"{here}[{i}]"
    else:
        if rest:
            yield from _walk_path(value, rest, here)
        else:
            yield container, key, here


def _path_values(body: dict, dotted: str) -> list[tuple[Any, str, str]]:
    return list(_walk_path(body, dotted.split("."), ""))


# === validation ===

def _check_reference_node(node: Any, path: str) -> None:
    if not isinstance(node, dict) or "reference" not in node:
        raise SchemaError(f"{path}: expected a reference object")
    ref = node["reference"]
    if not isinstance(ref, str) or not _REF_PATTERN.match(ref):
        raise SchemaError(f"{path}: malformed reference {ref!r}")
    rtype = ref.split("/", 1)[0]
    if rtype not in SCHEMAS:
        raise SchemaError(f"{path}: reference to unsupported type {rtype!r}")


def _validate_body(resource_type: str, body: dict) -> None:
    schema = SCHEMAS[resource_type]
    meta = body.get("meta")
    if meta is not None:
        if not isinstance(meta, dict):
            raise SchemaError("meta: expected an object")
        profile = meta.get("profile")
        if profile is not None and (
            not isinstance(profile, list) or not all(isinstance(p, str) for p in profile)
        ):
            raise SchemaError("meta.profile: expected a list of strings")
    for element, vs_name in schema.statuses:
        if element in body:
            value = body[element]
            if not isinstance(value, str) or value not in valueset(vs_name):
                raise SchemaError(f"{element}: illegal value {value!r}")
    for dotted in schema.datetimes:
        for parent, key, path in _path_values(body, dotted):
            if isinstance(parent, dict):
                parent[key] = canonical_datetime(parent[key], path)
            else:
                idx = int(key)
                parent[idx] = canonical_datetime(parent[idx], path)
    for dotted in schema.references:
        for parent, key, path in _path_values(body, dotted):
            node = parent[int(key)] if isinstance(parent, list) else parent[key]
            _check_reference_node(node, path)


def make_resource(resource_type: str, resource_id: str, body: dict[str, Any]) -> Resource:
    """Validate and wrap a resource body.  Canonicalizes datetime fields."""
    if resource_type not in SCHEMAS:
        raise SchemaError(f"unsupported resourceType {resource_type!r}")
    if not isinstance(resource_id, str) or not resource_id:
        raise SchemaError("id: required and non-empty")
    _validate_body(resource_type, body)
    return Resource(resource_type=resource_type, id=resource_id, body=body)


# === serialization ===

def _ordered_resource_dict(r: Resource) -> dict[str, Any]:
    out: dict[str, Any] = {"resourceType": r.resource_type, "id": r.id}
    schema = SCHEMAS[r.resource_type]
    known = ("meta", "extension", *schema.elements)
    for key in known:
        if key in r.body:
            out[key] = r.body[key]
    for key in sorted(r.body):
        if key not in known:
            out[key] = r.body[key]
    return out


def serialize_resource(r: Resource) -> str:
    return json.dumps(_ordered_resource_dict(r), indent=2, ensure_ascii=False)


def _resource_from_dict(obj: Any, context: str = "resource") -> Resource:
    if not isinstance(obj, dict):
        raise WireSyntaxError(f"{context}: expected a JSON object")
    if "resourceType" not in obj:
        raise SchemaError(f"{context}: missing resourceType")
    rtype = obj["resourceType"]
    if rtype == "Bundle":
        raise SchemaError(f"{context}: nested bundles are not supported here")
    rid = obj.get("id")
    if not isinstance(rid, str) or not rid:
        raise SchemaError(f"{context}: missing id")
    body = {k: v for k, v in obj.items() if k not in ("resourceType", "id")}
    return make_resource(rtype if isinstance(rtype, str) else "", rid, body)


def parse_resource(text: str) -> Resource:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireSyntaxError(f"malformed JSON: {exc}") from exc
    return _resource_from_dict(obj)


def serialize_bundle(b: Bundle) -> str:
    out: dict[str, Any] = {"resourceType": "Bundle", "type": b.kind}
    if b.kind == "searchset":
        out["total"] = b.total if b.total is not None else len(b.resources)
    out["entry"] = [{"resource": _ordered_resource_dict(r)} for r in b.resources]
    return json.dumps(out, indent=2, ensure_ascii=False)


def parse_bundle(text: str) -> Bundle:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireSyntaxError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("resourceType") != "Bundle":
        raise WireSyntaxError("expected a Bundle object")
    kind = obj.get("type")
    if kind not in BUNDLE_KINDS:
        raise SchemaError(f"type: illegal bundle type {kind!r}")
    entries = obj.get("entry", [])
    if not isinstance(entries, list):
        raise SchemaError("entry: expected a list")
    resources = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "resource" not in entry:
            raise SchemaError(f"entry[{i}]: expected an object with a resource")
        resources.append(_resource_from_dict(entry["resource"], f"entry[{i}].resource"))
    total = obj.get("total")
    if total is not None and (not isinstance(total, int) or total < 0):
        raise SchemaError("total: expected a non-negative integer")
    bundle = Bundle(kind=kind, resources=tuple(resources), total=total)
    _check_closure(bundle)
    return bundle


# === references and closure ===

def reference_targets(r: Resource) -> list[str]:
    """All "Type/id" strings this resource points at, in document order."""
    schema = SCHEMAS[r.resource_type]
    refs: list[str] = []
    for dotted in schema.references:
        for parent, key, _ in _path_values(r.body, dotted):
            node = parent[int(key)] if isinstance(parent, list) else parent[key]
            refs.append(node["reference"])
    return refs


def _check_closure(b: Bundle) -> None:
    if b.kind == "searchset":
        # Searchsets may point at subjects that live outside the bundle.
        return
    present = {r.ref for r in b.resources}
    missing = {t for r in b.resources for t in reference_targets(r) if t not in present}
    if missing:
        raise DanglingReferenceError(sorted(missing))


def assemble_bundle(resources: list[Resource], kind: str, total: int | None = None) -> Bundle:
    """Order resources canonically and build a closed bundle.

    Document and collection bundles must be reference-closed; assembling
    one with dangling references raises.  Searchset totals default to the
    entry count but callers tracking logical match counts pass their own.
    """
    if kind not in BUNDLE_KINDS:
        raise SchemaError(f"illegal bundle type {kind!r}")
    ordered = sorted(resources, key=lambda r: RESOURCE_ORDER[r.resource_type])
    seen: set[str] = set()
    for r in ordered:
        if r.ref in seen:
            raise SchemaError(f"duplicate resource id {r.ref}")
        seen.add(r.ref)
    bundle = Bundle(kind=kind, resources=tuple(ordered),
                    total=(total if total is not None else (len(ordered) if kind == "searchset" else None)))
    _check_closure(bundle)
    return bundle


def resolve_reference(b: Bundle, ref: str) -> Resource:
    for r in b.resources:
        if r.ref == ref:
            return r
    raise ReferenceNotFoundError(f"no resource {ref!r} in bundle")


# === wire shape helpers used by the builders ===

def coding(system: CodeSystem, code: str, display: str | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {"system": SYSTEM_URI[system], "code": code}
    if display is not None:
        out["display"] = display
    return out


def codeable_concept(codings: list[dict] | None = None, text: str | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if codings:
        out["coding"] = codings
    if text is not None:
        out["text"] = text
    return out


def reference(target: Resource | str) -> dict[str, str]:
    ref = target if isinstance(target, str) else target.ref
    return {"reference": ref}


def cc_codings(cc: Any) -> list[tuple[str, str, str | None]]:
    """(system URI, code, display) triples of a CodeableConcept-shaped value."""
    if not isinstance(cc, dict):
        return []
    out = []
    for c in cc.get("coding", []):
        if isinstance(c, dict) and "code" in c:
            out.append((c.get("system", ""), c["code"], c.get("display")))
    return out


def cc_text(cc: Any) -> str | None:
    if isinstance(cc, dict):
        text = cc.get("text")
        if isinstance(text, str):
            return text
    return None
