"""Oncology domain classification and profile tagging for FHIR bundles.

Each supported resource is assigned to one of six oncology data domains
and stamped with exactly one profile URI in the project namespace.
Tagging never alters clinical content: apart from meta.profile and any
added biomarker extension, resources round-trip byte-identically.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

from . import fhir_core
from .datafiles import data_path, read_tsv
from .fhir_core import Bundle, Resource

PROFILE_URI_PREFIX = "urn:onco:mcode:"
BIOMARKER_EXTENSION_URI = "urn:onco:ext:biomarker"


class McodeDomain(str, Enum):
    PATIENT = "Patient"
    DISEASE = "Disease"
    LAB_VITAL = "LabVital"
    GENOMICS = "Genomics"
    TREATMENT = "Treatment"
    OUTCOME = "Outcome"


class UnsupportedTypeError(Exception):
    """Resource type has no profile mapping."""

    def __init__(self, resource_type: str):
        super().__init__(f"no profile mapping for resourceType {resource_type!r}")
        self.resource_type = resource_type


@dataclass(frozen=True)
class McodeProfileId:
    name: str
    domain: McodeDomain
    base_resource_type: str

    @property
    def uri(self) -> str:
        return PROFILE_URI_PREFIX + self.name


def _profile(name: str, domain: McodeDomain, base: str) -> McodeProfileId:
    return McodeProfileId(name=name, domain=domain, base_resource_type=base)


PROFILES: dict[str, McodeProfileId] = {
    p.name: p
    for p in (
        _profile("CancerPatient", McodeDomain.PATIENT, "Patient"),
        _profile("PatientAllergyIntolerance", McodeDomain.PATIENT, "AllergyIntolerance"),
        _profile("PrimaryCancerCondition", McodeDomain.DISEASE, "Condition"),
        _profile("TNMPrimaryTumorCategory", McodeDomain.LAB_VITAL, "Observation"),
        _profile("TNMRegionalNodesCategory", McodeDomain.LAB_VITAL, "Observation"),
        _profile("TNMDistantMetastasesCategory", McodeDomain.LAB_VITAL, "Observation"),
        _profile("TNMStageGroup", McodeDomain.LAB_VITAL, "Observation"),
        _profile("LabResultObservation", McodeDomain.LAB_VITAL, "Observation"),
        _profile("TumorMarkerTest", McodeDomain.GENOMICS, "Observation"),
        _profile("CancerDiseaseStatus", McodeDomain.OUTCOME, "Observation"),
        _profile("CancerRelatedMedicationStatement", McodeDomain.TREATMENT, "MedicationRequest"),
        _profile("CancerRelatedProcedureStatement", McodeDomain.TREATMENT, "Procedure"),
        _profile("CancerSpecimen", McodeDomain.LAB_VITAL, "Specimen"),
        _profile("CancerDiagnosticReport", McodeDomain.LAB_VITAL, "DiagnosticReport"),
    )
}

URI_PROFILES: dict[str, McodeProfileId] = {p.uri: p for p in PROFILES.values()}

_TNM_PROFILE_BY_CODE = {
    "21905-5": "TNMPrimaryTumorCategory",
    "21906-3": "TNMRegionalNodesCategory",
    "21907-1": "TNMDistantMetastasesCategory",
    "21908-9": "TNMStageGroup",
}

_SIMPLE_TYPE_PROFILES = {
    "Patient": "CancerPatient",
    "AllergyIntolerance": "PatientAllergyIntolerance",
    "Condition": "PrimaryCancerCondition",
    "MedicationRequest": "CancerRelatedMedicationStatement",
    "Procedure": "CancerRelatedProcedureStatement",
    "Specimen": "CancerSpecimen",
    "DiagnosticReport": "CancerDiagnosticReport",
}


@lru_cache(maxsize=4)
def _code_list(path_str: str) -> frozenset[str]:
    codes = set()
    for row in read_tsv(Path(path_str)):
        if len(row) >= 2:
            codes.add(row[1].strip())
    return frozenset(codes)


def genomics_codes() -> frozenset[str]:
    return _code_list(str(data_path("genomics_codes.tsv")))


def disease_status_codes() -> frozenset[str]:
    return _code_list(str(data_path("disease_status_codes.tsv")))


def _observation_codes(r: Resource) -> list[str]:
    code = r.body.get("code")
    if not isinstance(code, dict):
        return []
    return [c.get("code", "") for c in code.get("coding", []) if isinstance(c, dict)]


def profile_for(r: Resource) -> McodeProfileId:
    """The single profile a resource is tagged with; code lists decide
    which specialized Observation profile applies."""
    if r.resource_type == "Observation":
        codes = _observation_codes(r)
        if any(c in genomics_codes() for c in codes):
            return PROFILES["TumorMarkerTest"]
        if any(c in disease_status_codes() for c in codes):
            return PROFILES["CancerDiseaseStatus"]
        for code in codes:
            if code in _TNM_PROFILE_BY_CODE:
                return PROFILES[_TNM_PROFILE_BY_CODE[code]]
        return PROFILES["LabResultObservation"]
    name = _SIMPLE_TYPE_PROFILES.get(r.resource_type)
    if name is None:
        raise UnsupportedTypeError(r.resource_type)
    return PROFILES[name]


def classify_domain(r: Resource) -> McodeDomain:
    return profile_for(r).domain


class BiomarkerStatus(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class GenomicsExtension:
    biomarker_name: str
    status: BiomarkerStatus
    variant: str | None = None

    def to_wire(self) -> dict:
        parts: list[dict] = [
            {"url": "biomarkerName", "valueString": self.biomarker_name},
            {"url": "status", "valueCode": self.status.value},
        ]
        if self.variant is not None:
            parts.append({"url": "variant", "valueString": self.variant})
        return {"url": BIOMARKER_EXTENSION_URI, "extension": parts}


_VARIANT_PATTERN = re.compile(
    r"\b(c\.[0-9]+[A-Za-z>]+|p\.[A-Za-z]{3}[0-9]+[A-Za-z]{3}|[A-Z][0-9]{2,4}[A-Z])\b"
)


def _biomarker_status(value_text: str) -> BiomarkerStatus:
    lowered = value_text.lower()
    if "positive" in lowered:
        return BiomarkerStatus.POSITIVE
    if "negative" in lowered:
        return BiomarkerStatus.NEGATIVE
    return BiomarkerStatus.INDETERMINATE


def genomics_extension_for(r: Resource) -> GenomicsExtension:
    """Build the biomarker extension for a Genomics-domain Observation."""
    name = ""
    code = r.body.get("code", {})
    if isinstance(code, dict):
        for c in code.get("coding", []):
            if c.get("code") in genomics_codes():
                name = c.get("display") or ""
                break
    if not name:
        name = r.body.get("text") or code.get("text") or ""
    value = r.body.get("valueString", "")
    variant_match = _VARIANT_PATTERN.search(value)
    return GenomicsExtension(
        biomarker_name=name,
        status=_biomarker_status(value),
        variant=variant_match.group(1) if variant_match else None,
    )


@dataclass(frozen=True)
class McodeTagResult:
    bundle: Bundle
    warnings: tuple[str, ...]


def _tag_resource(r: Resource, profile: McodeProfileId) -> Resource:
    body = copy.deepcopy(r.body)
    meta = body.get("meta")
    if not isinstance(meta, dict):
        meta = {}
        body["meta"] = meta
    existing = meta.get("profile") or []
    kept = [p for p in existing if not p.startswith(PROFILE_URI_PREFIX)]
    meta["profile"] = kept + [profile.uri]
    if profile.name == "TumorMarkerTest":
        extensions = body.get("extension")
        if not isinstance(extensions, list):
            extensions = []
            body["extension"] = extensions
        if all(e.get("url") != BIOMARKER_EXTENSION_URI for e in extensions):
            extensions.append(genomics_extension_for(r).to_wire())
    return fhir_core.make_resource(r.resource_type, r.id, body)


def tag_bundle(b: Bundle) -> McodeTagResult:
    """Tag every supported resource; unsupported ones pass through with a
    warning instead of failing the bundle."""
    tagged: list[Resource] = []
    warnings: list[str] = []
    for r in b.resources:
        try:
            profile = profile_for(r)
        except UnsupportedTypeError:
            warnings.append(f"{r.resource_type}/{r.id}: no profile mapping")
            tagged.append(r)
            continue
        tagged.append(_tag_resource(r, profile))
    bundle = fhir_core.assemble_bundle(tagged, b.kind, b.total)
    return McodeTagResult(bundle=bundle, warnings=tuple(warnings))


def to_mcode_bundle(b: Bundle) -> Bundle:
    return tag_bundle(b).bundle


def tagged_profile(r: Resource) -> McodeProfileId | None:
    """The project-namespace profile a resource carries, if any."""
    for uri in r.profiles:
        found = URI_PROFILES.get(uri)
        if found is not None:
            return found
    return None


def domain_report(b: Bundle) -> dict[McodeDomain, int]:
    counts = {domain: 0 for domain in McodeDomain}
    for r in b.resources:
        profile = tagged_profile(r)
        if profile is not None:
            counts[profile.domain] += 1
    return counts
