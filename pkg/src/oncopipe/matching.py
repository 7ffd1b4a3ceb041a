"""Trial matching over tagged bundles with three-valued criterion logic.

PatientFacts is a flat projection of a bundle: what the record states,
with unknown sentinels for everything it does not.  Criteria evaluate to
Satisfied, Violated, or Unknown; Unknown arises exactly when the fact a
criterion needs is absent or Not Documented, never from a disagreement.
Cohort likelihoods follow from the verdict multiset alone, and trials
rank by likelihood, then score, then trial id.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from . import fhir_core, mcode
from .datafiles import data_path, read_tsv
from .extraction import NOT_DOCUMENTED
from .fhir_core import Bundle, Resource
from .registry import (
    BiomarkerRequirement,
    Cohort,
    Criterion,
    CriterionField,
    CriterionKind,
    CriterionOp,
    MAJOR_STAGES,
    Registry,
    TrialRecord,
    filter_trials,
    paginate,
)

MATCH_EXTENSION_URI = "urn:onco:ext:trial-match"

# The only tuning knob in the scoring rule: how much of a satisfied
# criterion an unresolved one is worth.
UNKNOWN_WEIGHT = Fraction(1, 2)

TNM_T_CODE = "21905-5"
TNM_N_CODE = "21906-3"
TNM_M_CODE = "21907-1"
STAGE_GROUP_CODE = "21908-9"


class Verdict(str, Enum):
    SATISFIED = "Satisfied"
    VIOLATED = "Violated"
    UNKNOWN = "Unknown"


class Likelihood(str, Enum):
    LIKELY = "LikelyMatch"
    POSSIBLE = "PossibleMatch"
    NO_MATCH = "NoMatch"


# Rank 0 sorts first in finder output.
LIKELIHOOD_RANK: dict[Likelihood, int] = {
    Likelihood.LIKELY: 0,
    Likelihood.POSSIBLE: 1,
    Likelihood.NO_MATCH: 2,
}


class NoPatientError(Exception):
    """Bundle has no Patient entry to derive facts from."""


class TransportError(Exception):
    """External matcher could not be reached or failed at the HTTP level."""


class MalformedResponseError(Exception):
    """External matcher answered with something other than a searchset."""


@dataclass(frozen=True)
class PatientFacts:
    """Flat, normalized view of one patient record.

    Set-valued fields hold casefolded terms; an empty set means the
    record is silent on that axis.  Categorical fields hold value-set
    members or the Not Documented sentinel.
    """

    diagnoses: frozenset[str] = frozenset()
    numerical_stage: str = NOT_DOCUMENTED
    tnm_t: str = NOT_DOCUMENTED
    tnm_n: str = NOT_DOCUMENTED
    tnm_m: str = NOT_DOCUMENTED
    biomarkers: Mapping[str, str] = field(default_factory=dict)
    prior_therapies: frozenset[str] = frozenset()
    metastasis_sites: frozenset[str] = frozenset()
    histology_grade: str = NOT_DOCUMENTED
    laterality: str = NOT_DOCUMENTED
    age: int | None = None
    gender: str | None = None


@dataclass(frozen=True)
class MatchResult:
    trial_id: str
    likelihood: Likelihood
    score: Fraction
    per_criterion: tuple[tuple[Criterion, Verdict], ...] = ()
    matched_cohort: str | None = None


def _norm(value: str) -> str:
    return value.casefold().strip()


@lru_cache(maxsize=4)
def _marker_aliases(path_str: str) -> dict[str, str]:
    """Normalized marker alias -> canonical short name.

    Every display and synonym of a marker maps to its shortest alias, so
    "HER2", "her2/neu", and "erbb2" all meet at one key.
    """
    out: dict[str, str] = {}
    for row in read_tsv(Path(path_str)):
        aliases = [_norm(row[2])]
        if len(row) > 3 and row[3]:
            aliases.extend(_norm(s) for s in row[3].split("|") if s)
        canonical = min(aliases, key=lambda a: (len(a), a))
        for alias in aliases:
            out[alias] = canonical
    return out


def canonical_marker(name: str) -> str:
    """Canonical key for a biomarker name; unknown names just casefold."""
    normalized = _norm(name)
    return _marker_aliases(str(data_path("genomics_codes.tsv"))).get(
        normalized, normalized
    )


def _scalar_known(value: str | None) -> bool:
    return value is not None and _norm(value) not in ("", _norm(NOT_DOCUMENTED))


_STAGE_MAJOR_RE = re.compile(r"^(IV|III|II|I)")


def stage_major(value: str) -> int | None:
    """Major stage group 1-4, or None when the value has no roman prefix."""
    match = _STAGE_MAJOR_RE.match(value.strip().upper())
    if match is None:
        return None
    return MAJOR_STAGES.index(match.group(1)) + 1


def _from_bool(result: bool) -> Verdict:
    return Verdict.SATISFIED if result else Verdict.VIOLATED


def _set_predicate(fact_values: frozenset[str], op: CriterionOp, value) -> Verdict:
    if not fact_values:
        return Verdict.UNKNOWN
    normalized = {_norm(v) for v in fact_values}
    if op is CriterionOp.IN_SET:
        wanted = {_norm(v) for v in value}
        return _from_bool(bool(normalized & wanted))
    if op is CriterionOp.LACKS:
        return _from_bool(_norm(value) not in normalized)
    # equals and has both test membership on set-valued facts.
    return _from_bool(_norm(value) in normalized)


def _scalar_predicate(fact: str, op: CriterionOp, value) -> Verdict:
    if op is CriterionOp.AT_LEAST_STAGE:
        major = stage_major(fact)
        if major is None:
            return Verdict.UNKNOWN
        return _from_bool(major >= stage_major(value))
    if op is CriterionOp.IN_SET:
        return _from_bool(_norm(fact) in {_norm(v) for v in value})
    return _from_bool(_norm(fact) == _norm(value))


def _biomarker_predicate(
    biomarkers: Mapping[str, str], op: CriterionOp, req: BiomarkerRequirement
) -> Verdict:
    by_canonical = {canonical_marker(k): v for k, v in biomarkers.items()}
    status = by_canonical.get(canonical_marker(req.name))
    if status is None:
        return Verdict.UNKNOWN
    holds = _norm(status) == _norm(req.status)
    if op is CriterionOp.LACKS:
        return _from_bool(not holds)
    return _from_bool(holds)


def _predicate(criterion: Criterion, facts: PatientFacts) -> Verdict:
    f = criterion.field
    op = criterion.op
    value = criterion.value
    if f is CriterionField.DIAGNOSIS:
        return _set_predicate(facts.diagnoses, op, value)
    if f is CriterionField.PRIOR_THERAPY:
        return _set_predicate(facts.prior_therapies, op, value)
    if f is CriterionField.METASTASIS_SITE:
        return _set_predicate(facts.metastasis_sites, op, value)
    if f is CriterionField.STAGE:
        if not _scalar_known(facts.numerical_stage):
            return Verdict.UNKNOWN
        return _scalar_predicate(facts.numerical_stage, op, value)
    if f is CriterionField.TNM_T:
        if not _scalar_known(facts.tnm_t):
            return Verdict.UNKNOWN
        return _scalar_predicate(facts.tnm_t, op, value)
    if f is CriterionField.TNM_N:
        if not _scalar_known(facts.tnm_n):
            return Verdict.UNKNOWN
        return _scalar_predicate(facts.tnm_n, op, value)
    if f is CriterionField.TNM_M:
        if not _scalar_known(facts.tnm_m):
            return Verdict.UNKNOWN
        return _scalar_predicate(facts.tnm_m, op, value)
    if f is CriterionField.HISTOLOGY_GRADE:
        if not _scalar_known(facts.histology_grade):
            return Verdict.UNKNOWN
        return _scalar_predicate(facts.histology_grade, op, value)
    if f is CriterionField.BIOMARKER:
        return _biomarker_predicate(facts.biomarkers, op, value)
    if f is CriterionField.AGE:
        if facts.age is None:
            return Verdict.UNKNOWN
        if op is CriterionOp.GE:
            return _from_bool(facts.age >= value)
        return _from_bool(facts.age <= value)
    # gender
    if facts.gender is None or _norm(facts.gender) == "unknown":
        return Verdict.UNKNOWN
    return _scalar_predicate(facts.gender, op, value)


def evaluate(criterion: Criterion, facts: PatientFacts) -> Verdict:
    """Three-valued verdict; for exclusions, Satisfied means not excluded."""
    verdict = _predicate(criterion, facts)
    if criterion.kind is CriterionKind.EXCLUSION:
        if verdict is Verdict.SATISFIED:
            return Verdict.VIOLATED
        if verdict is Verdict.VIOLATED:
            return Verdict.SATISFIED
    return verdict


def likelihood_for(verdicts: Iterable[Verdict]) -> Likelihood:
    """Categorize a cohort from its verdicts alone.

    Any violation disqualifies; all satisfied is a likely match; unknowns
    without violations leave a possible match.  No criteria at all is an
    all-comers cohort and counts as likely.
    """
    seen = list(verdicts)
    if any(v is Verdict.VIOLATED for v in seen):
        return Likelihood.NO_MATCH
    if all(v is Verdict.SATISFIED for v in seen):
        return Likelihood.LIKELY
    return Likelihood.POSSIBLE


def score_for(verdicts: Iterable[Verdict]) -> Fraction:
    """Satisfied counts 1, Unknown counts UNKNOWN_WEIGHT, over all criteria."""
    seen = list(verdicts)
    if not seen:
        return Fraction(1)
    satisfied = sum(1 for v in seen if v is Verdict.SATISFIED)
    unknown = sum(1 for v in seen if v is Verdict.UNKNOWN)
    return (Fraction(satisfied) + UNKNOWN_WEIGHT * unknown) / len(seen)


def evaluate_cohort(
    cohort: Cohort, facts: PatientFacts
) -> tuple[tuple[tuple[Criterion, Verdict], ...], Likelihood, Fraction]:
    per_criterion = tuple((c, evaluate(c, facts)) for c in cohort.criteria)
    verdicts = [v for _, v in per_criterion]
    return per_criterion, likelihood_for(verdicts), score_for(verdicts)


def match_trial(trial: TrialRecord, facts: PatientFacts) -> MatchResult:
    """Best cohort wins; likelihood ties go to declaration order."""
    evaluated = [
        (cohort, *evaluate_cohort(cohort, facts)) for cohort in trial.cohorts
    ]
    cohort, per_criterion, likelihood, score = min(
        evaluated, key=lambda e: LIKELIHOOD_RANK[e[2]]
    )
    return MatchResult(
        trial_id=trial.trial_id,
        likelihood=likelihood,
        score=score,
        per_criterion=per_criterion,
        matched_cohort=cohort.name if likelihood is not Likelihood.NO_MATCH else None,
    )


def match_all(
    registry: Registry,
    facts: PatientFacts,
    recruitment=None,
    phase=None,
    study_type=None,
    condition_term: str | None = None,
    include_no_match: bool = False,
) -> tuple[MatchResult, ...]:
    """Filter, evaluate, and rank; non-matches are dropped unless asked for."""
    candidates = filter_trials(
        registry,
        recruitment=recruitment,
        phase=phase,
        study_type=study_type,
        condition_term=condition_term,
    )
    results = sorted(
        (match_trial(trial, facts) for trial in candidates),
        key=lambda r: (LIKELIHOOD_RANK[r.likelihood], -r.score, r.trial_id),
    )
    if not include_no_match:
        results = [r for r in results if r.likelihood is not Likelihood.NO_MATCH]
    return tuple(results)


# === bundle projection ===

_RESOURCE_DATE_ELEMENTS = {
    "Condition": ("onsetDateTime",),
    "Observation": ("effectiveDateTime",),
    "Procedure": ("performedDateTime",),
    "DiagnosticReport": ("effectiveDateTime", "issued"),
}


def _bundle_dates(bundle: Bundle) -> list[str]:
    out: list[str] = []
    for r in bundle.resources:
        for element in _RESOURCE_DATE_ELEMENTS.get(r.resource_type, ()):
            value = r.body.get(element)
            if isinstance(value, str) and value:
                out.append(value)
        if r.resource_type == "Specimen":
            collected = (r.body.get("collection") or {}).get("collectedDateTime")
            if isinstance(collected, str) and collected:
                out.append(collected)
    return out


_FULL_DATE_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})")


def _age_at(birth_date: str, anchor: str) -> int | None:
    born = _FULL_DATE_RE.match(birth_date)
    when = _FULL_DATE_RE.match(anchor)
    if born is None or when is None:
        return None
    by, bm, bd = (int(g) for g in born.groups())
    ay, am, ad = (int(g) for g in when.groups())
    age = ay - by - (1 if (am, ad) < (bm, bd) else 0)
    return age if age >= 0 else None


def _concept_terms(concept: Any, include_codes: bool) -> set[str]:
    terms: set[str] = set()
    text = fhir_core.cc_text(concept)
    if text:
        terms.add(_norm(text))
    for _, code, display in fhir_core.cc_codings(concept):
        if display:
            terms.add(_norm(display))
        if include_codes and code:
            terms.add(_norm(code))
    return terms


def _observation_value_text(r: Resource) -> str | None:
    value = r.body.get("valueString")
    if isinstance(value, str) and value:
        return value
    return fhir_core.cc_text(r.body.get("valueCodeableConcept"))


def facts_from_bundle(bundle: Bundle) -> PatientFacts:
    """Deterministic projection of a bundle into PatientFacts.

    Conditions feed diagnoses and stage, treatment resources feed prior
    therapies, genomics observations feed biomarkers, and the Patient
    entry feeds age and gender.  Age is taken at the latest clinical
    date in the bundle.  Everything else stays at its unknown sentinel.
    """
    patient = next(
        (r for r in bundle.resources if r.resource_type == "Patient"), None
    )
    if patient is None:
        raise NoPatientError("bundle has no Patient entry")

    diagnoses: set[str] = set()
    prior_therapies: set[str] = set()
    biomarkers: dict[str, str] = {}
    stage = NOT_DOCUMENTED
    tnm = {TNM_T_CODE: NOT_DOCUMENTED, TNM_N_CODE: NOT_DOCUMENTED, TNM_M_CODE: NOT_DOCUMENTED}

    genomics = mcode.genomics_codes()
    for r in bundle.resources:
        if r.resource_type == "Condition":
            diagnoses |= _concept_terms(r.body.get("code"), include_codes=True)
            for stage_entry in r.body.get("stage") or []:
                summary = fhir_core.cc_text(stage_entry.get("summary"))
                if summary and not _scalar_known(stage):
                    stage = summary
        elif r.resource_type == "Observation":
            codes = [code for _, code, _ in fhir_core.cc_codings(r.body.get("code"))]
            axis = next((c for c in codes if c in tnm), None)
            if axis is not None:
                value = _observation_value_text(r)
                if value:
                    tnm[axis] = value
            elif STAGE_GROUP_CODE in codes:
                value = _observation_value_text(r)
                if value:
                    stage = value
            elif any(c in genomics for c in codes):
                ext = mcode.genomics_extension_for(r)
                if ext.biomarker_name:
                    biomarkers[canonical_marker(ext.biomarker_name)] = ext.status.value
        elif r.resource_type == "MedicationRequest":
            prior_therapies |= _concept_terms(
                r.body.get("medicationCodeableConcept"), include_codes=False
            )
        elif r.resource_type == "Procedure":
            prior_therapies |= _concept_terms(r.body.get("code"), include_codes=False)

    age = None
    birth = patient.body.get("birthDate")
    if isinstance(birth, str):
        dates = _bundle_dates(bundle)
        if dates:
            age = _age_at(birth, max(dates))
    gender = patient.body.get("gender")
    if not isinstance(gender, str) or _norm(gender) == "unknown":
        gender = None

    return PatientFacts(
        diagnoses=frozenset(diagnoses),
        numerical_stage=stage,
        tnm_t=tnm[TNM_T_CODE],
        tnm_n=tnm[TNM_N_CODE],
        tnm_m=tnm[TNM_M_CODE],
        biomarkers=biomarkers,
        prior_therapies=frozenset(prior_therapies),
        age=age,
        gender=gender,
    )


# === searchset output ===

_STUDY_STATUS = {
    "recruiting": "active",
    "active_not_recruiting": "closed-to-accrual",
    "completed": "completed",
    "suspended": "temporarily-closed-to-accrual",
}


def match_extension(result: MatchResult) -> dict[str, Any]:
    return {
        "url": MATCH_EXTENSION_URI,
        "extension": [
            {"url": "likelihood", "valueCode": result.likelihood.value},
            {"url": "score", "valueDecimal": float(result.score)},
        ],
    }


def _research_study(result: MatchResult, record: TrialRecord | None) -> Resource:
    body: dict[str, Any] = {}
    if record is not None:
        body["title"] = record.title
        body["status"] = _STUDY_STATUS[record.recruitment.value]
        body["phase"] = {"text": record.phase.value}
        body["condition"] = [{"text": c} for c in record.conditions]
    body["extension"] = [match_extension(result)]
    return fhir_core.make_resource("ResearchStudy", result.trial_id, body)


def to_searchset(
    results: Sequence[MatchResult],
    page: int,
    page_size: int,
    registry: Registry | None = None,
) -> Bundle:
    """One ResearchStudy per result on the page; total counts all results.

    Passing the registry enriches entries with title, status, phase, and
    conditions so finder rows can render straight from the searchset.
    """
    chunk, total, _ = paginate(results, page, page_size)
    studies = [
        _research_study(r, registry.get(r.trial_id) if registry else None)
        for r in chunk
    ]
    return fhir_core.assemble_bundle(studies, "searchset", total=total)


# === external matcher contract ===

class ExternalMatcherContract(Protocol):
    def post_bundle(self, bundle_wire: str) -> str:
        """POST a document bundle's wire text; return the response text."""
        ...


@dataclass
class MockMatcherClient:
    """Replays a canned response; records every request it sees."""

    response_text: str
    requests: list[str] = field(default_factory=list)

    def post_bundle(self, bundle_wire: str) -> str:
        self.requests.append(bundle_wire)
        return self.response_text


@dataclass
class HttpMatcherClient:
    url: str
    timeout_seconds: float = 10.0

    def post_bundle(self, bundle_wire: str) -> str:
        import requests

        try:
            response = requests.post(
                self.url,
                data=bundle_wire.encode("utf-8"),
                headers={"Content-Type": "application/fhir+json"},
                timeout=self.timeout_seconds,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code >= 400:
            raise TransportError(f"matcher returned HTTP {response.status_code}")
        return response.text


def matcher_from_env() -> HttpMatcherClient | None:
    url = os.environ.get("ONCO_MATCHER_URL")
    return HttpMatcherClient(url=url) if url else None


def _score_fraction(raw: Any) -> Fraction:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise MalformedResponseError(f"score must be a number, got {raw!r}")
    score = Fraction(str(raw))
    if not 0 <= score <= 1:
        raise MalformedResponseError(f"score out of range: {raw!r}")
    return score


def _result_from_study(r: Resource) -> MatchResult:
    likelihood_raw: Any = None
    score_raw: Any = None
    for ext in r.body.get("extension") or []:
        if ext.get("url") != MATCH_EXTENSION_URI:
            continue
        for part in ext.get("extension") or []:
            if part.get("url") == "likelihood":
                likelihood_raw = part.get("valueCode")
            elif part.get("url") == "score":
                score_raw = part.get("valueDecimal")
    try:
        likelihood = Likelihood(likelihood_raw)
    except ValueError:
        raise MalformedResponseError(
            f"study {r.id}: missing or invalid match likelihood {likelihood_raw!r}"
        ) from None
    return MatchResult(
        trial_id=r.id,
        likelihood=likelihood,
        score=_score_fraction(score_raw),
    )


def external_match(client: ExternalMatcherContract, bundle: Bundle) -> list[MatchResult]:
    """POST the bundle to the client; parse the searchset it returns."""
    response_text = client.post_bundle(fhir_core.serialize_bundle(bundle))
    try:
        response = fhir_core.parse_bundle(response_text)
    except (fhir_core.WireSyntaxError, fhir_core.SchemaError) as exc:
        raise MalformedResponseError(str(exc)) from exc
    if response.kind != "searchset":
        raise MalformedResponseError(f"expected a searchset, got {response.kind!r}")
    for r in response.resources:
        if r.resource_type != "ResearchStudy":
            raise MalformedResponseError(
                f"unexpected {r.resource_type} entry in searchset"
            )
    return [_result_from_study(r) for r in response.resources]
