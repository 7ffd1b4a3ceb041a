"""Deterministic construction of FHIR resources from clinical variables.

Every builder is a pure function of its inputs: equal variables always
serialize to byte-identical bundles, and no coding is ever emitted unless
it came from the shipped terminology table.  Elements without source data
are omitted, never defaulted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from . import fhir_core, terminology
from .datafiles import data_path, read_tsv
from .extraction import NOT_DOCUMENTED, ClinicalVariables, panel_for_text
from .fhir_core import Bundle, Resource
from .terminology import CodeSystem

OBSERVATION_CATEGORY_URI = "http://terminology.hl7.org/CodeSystem/observation-category"
REPORT_CATEGORY_URI = "http://terminology.hl7.org/CodeSystem/v2-0074"

# LOINC codes for the staging observations linked from Condition.stage.
TNM_AXIS_CODES: dict[str, tuple[str, str]] = {
    "T": ("21905-5", "TNM T category"),
    "N": ("21906-3", "TNM N category"),
    "M": ("21907-1", "TNM M category"),
}
STAGE_GROUP_CODE = ("21908-9", "TNM stage group")


@dataclass
class BuildContext:
    """Per-bundle id allocation and cross-builder wiring.

    Ids follow "<resourcetype-lowercase>-<n>" with n starting at 1 for
    each resource type.  A context is never reused across bundles.
    """

    patient_id: str = "patient-1"
    default_date: str | None = None
    staging_refs: tuple[str, ...] = ()
    _counters: dict[str, int] = field(default_factory=dict)

    def new_id(self, resource_type: str) -> str:
        n = self._counters.get(resource_type, 0) + 1
        self._counters[resource_type] = n
        return f"{resource_type.lower()}-{n}"

    def subject(self) -> dict[str, str]:
        return fhir_core.reference(f"Patient/{self.patient_id}")


@lru_cache(maxsize=4)
def _imaging_keywords(path_str: str) -> tuple[str, ...]:
    rows = read_tsv(Path(path_str))
    return tuple(row[0].strip().lower() for row in rows if row and row[0].strip())


@lru_cache(maxsize=4)
def _biomarker_loinc(path_str: str) -> dict[str, str]:
    """Normalized biomarker names mapped to their own LOINC code."""
    out: dict[str, str] = {}
    for row in read_tsv(Path(path_str)):
        names = [row[2]]
        if len(row) > 3 and row[3]:
            names.extend(s for s in row[3].split("|") if s)
        for name in names:
            out[terminology.normalize(name)] = row[1]
    return out


def is_imaging(name: str) -> bool:
    """Category routing: imaging when any shipped keyword appears as a word."""
    lowered = name.lower()
    for kw in _imaging_keywords(str(data_path("imaging_keywords.tsv"))):
        if re.search(rf"(?<![a-z0-9]){re.escape(kw)}(?![a-z0-9])", lowered):
            return True
    return False


def _documented(value: str | None) -> bool:
    return bool(value) and not terminology.is_placeholder(value)


def _category(code: str) -> list[dict]:
    entry: dict = {"system": OBSERVATION_CATEGORY_URI, "code": code}
    if code == "laboratory":
        entry["display"] = "Laboratory"
    return [{"coding": [entry]}]


def _concept(codings: list[dict], text: str) -> dict:
    """CodeableConcept keeping text only when no coding display states it."""
    if not codings:
        return {"text": text}
    if any((c.get("display") or "").lower() == text.lower() for c in codings):
        return {"coding": codings}
    return {"coding": codings, "text": text}


def _birth_date(age: int, anchor: str) -> str | None:
    m = re.match(r"^(\d{4})-(\d{2})-(\d{2})", anchor)
    if not m:
        return None
    year = int(m.group(1)) - age
    month, day = m.group(2), m.group(3)
    if month == "02" and day == "29":
        day = "28"
    return f"{year:04d}-{month}-{day}"


def build_patient(v: ClinicalVariables, ctx: BuildContext) -> Resource:
    body: dict = {}
    demo = v.demographics
    if demo.gender:
        body["gender"] = demo.gender
    if demo.age is not None and v.note_date:
        birth = _birth_date(demo.age, v.note_date)
        if birth:
            body["birthDate"] = birth
    if demo.marital_status:
        body["maritalStatus"] = {"text": demo.marital_status}
    return fhir_core.make_resource("Patient", ctx.patient_id, body)


def build_staging_observations(v: ClinicalVariables, ctx: BuildContext) -> list[Resource]:
    """TNM axis and stage-group observations, wired into ctx.staging_refs."""
    out: list[Resource] = []
    refs: list[str] = []
    axes = {"T": v.tnm_t, "N": v.tnm_n, "M": v.tnm_m}
    staged = [(TNM_AXIS_CODES[a], m) for a, m in axes.items() if _documented(m)]
    if _documented(v.numerical_stage):
        staged.append((STAGE_GROUP_CODE, v.numerical_stage))
    for (code, display), member in staged:
        oid = ctx.new_id("Observation")
        body: dict = {
            "status": "final",
            "code": {"coding": [fhir_core.coding(CodeSystem.LOINC, code, display)]},
            "subject": ctx.subject(),
            "valueCodeableConcept": {"text": member},
        }
        if v.diagnosis_date:
            body["effectiveDateTime"] = v.diagnosis_date
        out.append(fhir_core.make_resource("Observation", oid, body))
        refs.append(f"Observation/{oid}")
    ctx.staging_refs = tuple(refs)
    return out


def build_condition(v: ClinicalVariables, ctx: BuildContext) -> list[Resource]:
    table = terminology.default_codes()
    out: list[Resource] = []
    for entry in v.cancer_diagnosis:
        if not _documented(entry.term):
            continue
        codings: list[dict] = []
        if entry.code is not None:
            system_name, code = entry.code
            try:
                system = CodeSystem(system_name)
            except ValueError:
                system = None
            known = table.lookup(system, code) if system else None
            # Codes absent from the table are dropped rather than echoed:
            # every emitted coding must be re-checkable against the table.
            if known is not None:
                codings.append(fhir_core.coding(system, code, known.display))
        ranked = terminology.map_term(entry.term, CodeSystem.SNOMED)
        # Token-overlap guesses are reserved for free-text terms; an entry
        # that already carries a code only gains a SNOMED coding when the
        # name matches the table exactly.
        if ranked and (entry.code is None or ranked[0][1] == 1.0):
            snomed = ranked[0][0]
            if all(c["code"] != snomed.code for c in codings):
                codings.append(
                    fhir_core.coding(CodeSystem.SNOMED, snomed.code, snomed.display)
                )
        body: dict = {
            "code": _concept(codings, entry.term),
            "clinicalStatus": "active",
            "verificationStatus": "confirmed",
            "subject": ctx.subject(),
        }
        if v.diagnosis_date:
            body["onsetDateTime"] = v.diagnosis_date
        if not out:  # staging describes the primary (first) diagnosis
            stage: dict = {}
            if _documented(v.numerical_stage):
                stage["summary"] = {"text": v.numerical_stage}
            if ctx.staging_refs:
                stage["assessment"] = [fhir_core.reference(r) for r in ctx.staging_refs]
            if stage:
                body["stage"] = [stage]
        out.append(fhir_core.make_resource("Condition", ctx.new_id("Condition"), body))
    return out


def build_observations(v: ClinicalVariables, ctx: BuildContext) -> list[Resource]:
    panel = panel_for_text(v.panel_name) if v.panel_name else None
    out: list[Resource] = []
    for entry in v.observations:
        if not _documented(entry.name):
            continue
        body: dict = {"status": "final"}
        if panel is not None:
            # Lab-panel notes report everything under the panel's code.
            _, display, loinc, _, _ = panel
            codings = [fhir_core.coding(CodeSystem.LOINC, loinc, display)]
            body["category"] = _category("laboratory")
            effective = v.collected_datetime
        else:
            # Biomarker names resolve through their own lexicon, never by
            # token overlap; a code the table cannot re-check stays text-only.
            marker = _biomarker_loinc(str(data_path("genomics_codes.tsv"))).get(
                terminology.normalize(entry.name)
            )
            if marker is not None:
                best = terminology.default_codes().lookup(CodeSystem.LOINC, marker)
            else:
                best = terminology.best_code(entry.name, CodeSystem.LOINC)
            codings = (
                [fhir_core.coding(CodeSystem.LOINC, best.code, best.display)]
                if best is not None
                else []
            )
            body["category"] = _category("imaging" if is_imaging(entry.name) else "laboratory")
            effective = v.note_date
        if codings:
            body["code"] = {"coding": codings}
            if all((c.get("display") or "").lower() != entry.name.lower() for c in codings):
                body["text"] = entry.name
        else:
            body["code"] = {"text": entry.name}
        body["subject"] = ctx.subject()
        if effective:
            body["effectiveDateTime"] = effective
        if entry.value_text:
            body["valueString"] = entry.value_text
        out.append(fhir_core.make_resource("Observation", ctx.new_id("Observation"), body))
    return out


_COMBINATION_SPLIT = re.compile(r"\s+(?:and|plus|with)\s+|\s*\+\s*", re.IGNORECASE)


def build_medication_requests(v: ClinicalVariables, ctx: BuildContext) -> list[Resource]:
    out: list[Resource] = []
    for med in v.medications:
        if not _documented(med.name):
            continue
        parts = [p for p in (s.strip() for s in _COMBINATION_SPLIT.split(med.name)) if p]
        codings: list[dict] = []
        covered = bool(parts)
        for part in parts:
            best = terminology.best_code(part, CodeSystem.RXNORM)
            if best is None:
                covered = False
            elif all(c["code"] != best.code for c in codings):
                codings.append(
                    fhir_core.coding(CodeSystem.RXNORM, best.code, best.display)
                )
        concept: dict = {}
        if codings:
            concept["coding"] = codings
        if not covered or not codings:
            concept["text"] = med.name
        body: dict = {
            "status": "active",
            "intent": "order",
            "medicationCodeableConcept": concept,
            "subject": ctx.subject(),
        }
        if med.dosage_text:
            body["dosageInstruction"] = [{"text": med.dosage_text}]
        out.append(
            fhir_core.make_resource("MedicationRequest", ctx.new_id("MedicationRequest"), body)
        )
    return out


def build_procedures(v: ClinicalVariables, ctx: BuildContext) -> list[Resource]:
    out: list[Resource] = []
    for proc in v.procedures:
        if not _documented(proc.name):
            continue
        best = terminology.best_code(proc.name, CodeSystem.SNOMED)
        codings = (
            [fhir_core.coding(CodeSystem.SNOMED, best.code, best.display)]
            if best is not None
            else []
        )
        body: dict = {
            "status": "completed",
            "code": _concept(codings, proc.name),
            "subject": ctx.subject(),
        }
        if proc.performed_date:
            body["performedDateTime"] = proc.performed_date
        out.append(fhir_core.make_resource("Procedure", ctx.new_id("Procedure"), body))
    return out


def build_allergies(v: ClinicalVariables, ctx: BuildContext) -> list[Resource]:
    out: list[Resource] = []
    for allergen in v.allergies:
        if not _documented(allergen):
            continue
        body = {
            "code": {"text": allergen},
            "patient": ctx.subject(),
        }
        out.append(
            fhir_core.make_resource("AllergyIntolerance", ctx.new_id("AllergyIntolerance"), body)
        )
    return out


def build_specimen(v: ClinicalVariables, ctx: BuildContext) -> Resource | None:
    if not (v.specimen_source or v.specimen_viability or v.collected_datetime):
        return None
    body: dict = {}
    if v.specimen_source:
        body["type"] = {"text": v.specimen_source}
    body["subject"] = ctx.subject()
    if v.collected_datetime:
        body["collection"] = {"collectedDateTime": v.collected_datetime}
    if v.specimen_viability:
        body["note"] = [{"text": f"{v.specimen_viability} viability"}]
    return fhir_core.make_resource("Specimen", ctx.new_id("Specimen"), body)


def _slug(text: str) -> str:
    return re.sub(r"-+", "-", re.sub(r"[^a-z0-9]", "-", text.lower())).strip("-")


def build_diagnostic_report(
    v: ClinicalVariables, ctx: BuildContext, results: list[str]
) -> Resource | None:
    if not v.panel_name:
        return None
    panel = panel_for_text(v.panel_name)
    if panel is not None:
        _, display, loinc, category_code, category_display = panel
        code = {"coding": [fhir_core.coding(CodeSystem.LOINC, loinc, display)]}
        category: dict | None = {
            "coding": [
                {
                    "system": REPORT_CATEGORY_URI,
                    "code": category_code,
                    "display": category_display,
                }
            ]
        }
        slug_base = display
    else:
        code = {"text": v.panel_name}
        category = None
        slug_base = v.panel_name
    if v.reported_datetime:
        rid = f"{_slug(slug_base)}-{v.reported_datetime[:10].replace('-', '')}"
    else:
        rid = ctx.new_id("DiagnosticReport")
    body: dict = {"status": "final"}
    if category is not None:
        body["category"] = category
    body["code"] = code
    body["text"] = v.panel_name
    body["subject"] = ctx.subject()
    if v.collected_datetime:
        body["effectiveDateTime"] = v.collected_datetime
    if v.reported_datetime:
        body["issued"] = v.reported_datetime
    if v.performer:
        body["performer"] = [{"actor": {"display": v.performer}}]
    if v.specimen_source or v.specimen_viability or v.collected_datetime:
        body["specimen"] = [fhir_core.reference("Specimen/specimen-1")]
    if results:
        body["result"] = [fhir_core.reference(r) for r in results]
    return fhir_core.make_resource("DiagnosticReport", rid, body)


def build_bundle(v: ClinicalVariables) -> Bundle:
    """Compose every builder into a closed document bundle."""
    ctx = BuildContext(default_date=v.note_date)
    resources: list[Resource] = [build_patient(v, ctx)]
    staging = build_staging_observations(v, ctx)
    resources.extend(build_condition(v, ctx))
    resources.extend(staging)
    observations = build_observations(v, ctx)
    resources.extend(observations)
    resources.extend(build_medication_requests(v, ctx))
    resources.extend(build_procedures(v, ctx))
    resources.extend(build_allergies(v, ctx))
    specimen = build_specimen(v, ctx)
    if specimen is not None:
        resources.append(specimen)
    if v.panel_name:
        results = [f"Observation/{o.id}" for o in observations]
        report = build_diagnostic_report(v, ctx, results)
        if report is not None:
            resources.append(report)
    return fhir_core.assemble_bundle(resources, "document")
