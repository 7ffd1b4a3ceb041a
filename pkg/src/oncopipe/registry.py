"""Clinical-trial registry: typed records, NDJSON persistence, filter, paging.

Trial records carry structured eligibility criteria grouped into cohorts.
The registry file is newline-delimited JSON, one trial per line, so
fixtures diff cleanly and ingestion can stream.  A registry value is
immutable after load; records are kept sorted by trial id, which makes
the canonical save form stable and load(save(reg)) an identity.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence, TypeVar

from .datafiles import data_path

T = TypeVar("T")


class Recruitment(str, Enum):
    RECRUITING = "recruiting"
    ACTIVE_NOT_RECRUITING = "active_not_recruiting"
    COMPLETED = "completed"
    SUSPENDED = "suspended"


class Phase(str, Enum):
    EARLY_PHASE_1 = "early_phase_1"
    PHASE_1 = "phase_1"
    PHASE_1_2 = "phase_1_2"
    PHASE_2 = "phase_2"
    PHASE_2_3 = "phase_2_3"
    PHASE_3 = "phase_3"
    PHASE_4 = "phase_4"
    NA = "na"


class StudyType(str, Enum):
    INTERVENTIONAL = "interventional"
    OBSERVATIONAL = "observational"


class CriterionKind(str, Enum):
    INCLUSION = "inclusion"
    EXCLUSION = "exclusion"


class CriterionField(str, Enum):
    DIAGNOSIS = "diagnosis"
    STAGE = "stage"
    TNM_T = "tnmT"
    TNM_N = "tnmN"
    TNM_M = "tnmM"
    BIOMARKER = "biomarker"
    PRIOR_THERAPY = "priorTherapy"
    METASTASIS_SITE = "metastasisSite"
    HISTOLOGY_GRADE = "histologyGrade"
    AGE = "age"
    GENDER = "gender"


class CriterionOp(str, Enum):
    EQUALS = "equals"
    IN_SET = "in_set"
    AT_LEAST_STAGE = "at_least_stage"
    HAS = "has"
    LACKS = "lacks"
    GE = "ge"
    LE = "le"


# Which operators make sense against each patient-fact field.  Scalar
# fields compare with equals/in_set, set-valued fields test membership,
# stage adds an ordering operator, age is the only numeric field, and
# biomarker requirements name a marker together with a status.
OP_COMPAT: dict[CriterionField, frozenset[CriterionOp]] = {
    CriterionField.DIAGNOSIS: frozenset(
        {CriterionOp.EQUALS, CriterionOp.IN_SET, CriterionOp.HAS, CriterionOp.LACKS}
    ),
    CriterionField.STAGE: frozenset(
        {CriterionOp.EQUALS, CriterionOp.IN_SET, CriterionOp.AT_LEAST_STAGE}
    ),
    CriterionField.TNM_T: frozenset({CriterionOp.EQUALS, CriterionOp.IN_SET}),
    CriterionField.TNM_N: frozenset({CriterionOp.EQUALS, CriterionOp.IN_SET}),
    CriterionField.TNM_M: frozenset({CriterionOp.EQUALS, CriterionOp.IN_SET}),
    CriterionField.BIOMARKER: frozenset({CriterionOp.HAS, CriterionOp.LACKS}),
    CriterionField.PRIOR_THERAPY: frozenset(
        {CriterionOp.EQUALS, CriterionOp.IN_SET, CriterionOp.HAS, CriterionOp.LACKS}
    ),
    CriterionField.METASTASIS_SITE: frozenset(
        {CriterionOp.EQUALS, CriterionOp.IN_SET, CriterionOp.HAS, CriterionOp.LACKS}
    ),
    CriterionField.HISTOLOGY_GRADE: frozenset(
        {CriterionOp.EQUALS, CriterionOp.IN_SET}
    ),
    CriterionField.AGE: frozenset({CriterionOp.GE, CriterionOp.LE}),
    CriterionField.GENDER: frozenset({CriterionOp.EQUALS, CriterionOp.IN_SET}),
}

# at_least_stage compares major stage groups only; sub-stage letters are
# a refinement the ordering deliberately ignores.
MAJOR_STAGES = ("I", "II", "III", "IV")


class ParseError(Exception):
    """A registry line is not a valid trial record."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateIdError(Exception):
    """Two registry records share a trial id."""

    def __init__(self, trial_id: str):
        super().__init__(f"duplicate trial id {trial_id!r}")
        self.trial_id = trial_id


class IncompatibleOperatorError(ValueError):
    """Criterion operator is not defined for its field."""

    def __init__(self, field_: CriterionField, op: CriterionOp):
        super().__init__(f"operator {op.value!r} not valid for field {field_.value!r}")
        self.field = field_
        self.op = op


@dataclass(frozen=True)
class BiomarkerRequirement:
    """A named marker with the status the criterion asks for."""

    name: str
    status: str


@dataclass(frozen=True)
class Criterion:
    kind: CriterionKind
    field: CriterionField
    op: CriterionOp
    value: str | int | tuple[str, ...] | BiomarkerRequirement

    def __post_init__(self) -> None:
        if self.op not in OP_COMPAT[self.field]:
            raise IncompatibleOperatorError(self.field, self.op)
        object.__setattr__(self, "value", _check_value(self.field, self.op, self.value))


def _check_value(
    field_: CriterionField, op: CriterionOp, value: Any
) -> str | int | tuple[str, ...] | BiomarkerRequirement:
    """Validate a criterion value against its operator; return canonical form."""
    if op in (CriterionOp.GE, CriterionOp.LE):
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ValueError(f"{op.value} needs a non-negative integer, got {value!r}")
        return value
    if field_ is CriterionField.BIOMARKER:
        if isinstance(value, BiomarkerRequirement):
            pass
        elif isinstance(value, dict) and set(value) == {"name", "status"}:
            value = BiomarkerRequirement(name=value["name"], status=value["status"])
        else:
            raise ValueError(
                f"biomarker value must give name and status, got {value!r}"
            )
        if not (
            isinstance(value.name, str)
            and value.name
            and isinstance(value.status, str)
            and value.status
        ):
            raise ValueError("biomarker name and status must be non-empty strings")
        return value
    if op is CriterionOp.IN_SET:
        if (
            not isinstance(value, (list, tuple, set, frozenset))
            or not value
            or not all(isinstance(v, str) and v for v in value)
        ):
            raise ValueError(f"in_set needs a non-empty set of strings, got {value!r}")
        # Sets are unordered; the canonical form is a sorted, deduplicated tuple.
        return tuple(sorted(set(value)))
    if not isinstance(value, str) or not value:
        raise ValueError(f"{op.value} needs a non-empty string, got {value!r}")
    if op is CriterionOp.AT_LEAST_STAGE and value not in MAJOR_STAGES:
        raise ValueError(
            f"at_least_stage takes a major stage {MAJOR_STAGES}, got {value!r}"
        )
    return value


@dataclass(frozen=True)
class Cohort:
    name: str
    # May be empty: an all-comers cohort accepts every patient.
    criteria: tuple[Criterion, ...] = ()


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    title: str
    conditions: tuple[str, ...]
    recruitment: Recruitment
    phase: Phase
    study_type: StudyType
    sponsor: str
    description: str
    cohorts: tuple[Cohort, ...]

    def __post_init__(self) -> None:
        if not self.trial_id:
            raise ValueError("trialId must be non-empty")
        if not self.cohorts:
            raise ValueError(f"trial {self.trial_id!r} must declare at least one cohort")


@dataclass(frozen=True)
class Registry:
    records: tuple[TrialRecord, ...] = ()
    _by_id: dict[str, TrialRecord] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.records, key=lambda r: r.trial_id))
        by_id: dict[str, TrialRecord] = {}
        for rec in ordered:
            if rec.trial_id in by_id:
                raise DuplicateIdError(rec.trial_id)
            by_id[rec.trial_id] = rec
        object.__setattr__(self, "records", ordered)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, trial_id: str) -> TrialRecord | None:
        return self._by_id.get(trial_id)


def criterion_to_dict(crit: Criterion) -> dict[str, Any]:
    value: Any = crit.value
    if isinstance(value, BiomarkerRequirement):
        value = {"name": value.name, "status": value.status}
    elif isinstance(value, tuple):
        value = list(value)
    return {
        "kind": crit.kind.value,
        "field": crit.field.value,
        "op": crit.op.value,
        "value": value,
    }


def record_to_dict(rec: TrialRecord) -> dict[str, Any]:
    return {
        "trialId": rec.trial_id,
        "title": rec.title,
        "conditions": list(rec.conditions),
        "recruitment": rec.recruitment.value,
        "phase": rec.phase.value,
        "studyType": rec.study_type.value,
        "sponsor": rec.sponsor,
        "description": rec.description,
        "cohorts": [
            {"name": c.name, "criteria": [criterion_to_dict(cr) for cr in c.criteria]}
            for c in rec.cohorts
        ],
    }


def _require_keys(obj: dict[str, Any], keys: set[str], what: str) -> None:
    if not isinstance(obj, dict):
        raise ValueError(f"{what} must be an object, got {type(obj).__name__}")
    missing = keys - set(obj)
    if missing:
        raise ValueError(f"{what} missing key(s) {sorted(missing)}")
    extra = set(obj) - keys
    if extra:
        raise ValueError(f"{what} has unknown key(s) {sorted(extra)}")


def _enum_member(enum_cls: type[Enum], raw: Any, what: str) -> Any:
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = sorted(m.value for m in enum_cls)
        raise ValueError(f"{what} must be one of {allowed}, got {raw!r}") from None


def criterion_from_dict(obj: dict[str, Any]) -> Criterion:
    _require_keys(obj, {"kind", "field", "op", "value"}, "criterion")
    return Criterion(
        kind=_enum_member(CriterionKind, obj["kind"], "criterion kind"),
        field=_enum_member(CriterionField, obj["field"], "criterion field"),
        op=_enum_member(CriterionOp, obj["op"], "criterion op"),
        value=obj["value"],
    )


def record_from_dict(obj: dict[str, Any]) -> TrialRecord:
    _require_keys(
        obj,
        {
            "trialId",
            "title",
            "conditions",
            "recruitment",
            "phase",
            "studyType",
            "sponsor",
            "description",
            "cohorts",
        },
        "trial record",
    )
    for key in ("trialId", "title", "sponsor", "description"):
        if not isinstance(obj[key], str):
            raise ValueError(f"{key} must be a string")
    conditions = obj["conditions"]
    if not isinstance(conditions, list) or not all(
        isinstance(c, str) and c for c in conditions
    ):
        raise ValueError("conditions must be a list of non-empty strings")
    cohorts = obj["cohorts"]
    if not isinstance(cohorts, list):
        raise ValueError("cohorts must be a list")
    parsed_cohorts = []
    for cohort in cohorts:
        _require_keys(cohort, {"name", "criteria"}, "cohort")
        if not isinstance(cohort["name"], str) or not cohort["name"]:
            raise ValueError("cohort name must be a non-empty string")
        if not isinstance(cohort["criteria"], list):
            raise ValueError("cohort criteria must be a list")
        parsed_cohorts.append(
            Cohort(
                name=cohort["name"],
                criteria=tuple(criterion_from_dict(c) for c in cohort["criteria"]),
            )
        )
    return TrialRecord(
        trial_id=obj["trialId"],
        title=obj["title"],
        conditions=tuple(conditions),
        recruitment=_enum_member(Recruitment, obj["recruitment"], "recruitment"),
        phase=_enum_member(Phase, obj["phase"], "phase"),
        study_type=_enum_member(StudyType, obj["studyType"], "studyType"),
        sponsor=obj["sponsor"],
        description=obj["description"],
        cohorts=tuple(parsed_cohorts),
    )


def default_registry_path() -> Path:
    override = os.environ.get("ONCO_REGISTRY")
    if override:
        return Path(override)
    return data_path("trials.ndjson")


def load_registry(path: str | Path | None = None) -> Registry:
    """Load a newline-delimited registry file.

    Bad lines raise ParseError carrying the 1-based line number; a
    repeated trial id raises DuplicateIdError.  Blank lines are allowed.
    """
    resolved = Path(path) if path is not None else default_registry_path()
    records: list[TrialRecord] = []
    with open(resolved, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            try:
                records.append(record_from_dict(obj))
            except DuplicateIdError:
                raise
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
    return Registry(records=tuple(records))


def save_registry(registry: Registry, path: str | Path) -> None:
    """Write the canonical form: one record per line, sorted by trial id."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in registry.records:
            fh.write(json.dumps(record_to_dict(rec), ensure_ascii=False) + "\n")


def filter_trials(
    registry: Registry,
    recruitment: Recruitment | str | None = None,
    phase: Phase | str | None = None,
    study_type: StudyType | str | None = None,
    condition_term: str | None = None,
) -> tuple[TrialRecord, ...]:
    """Conjunctive filtering; omitted axes match everything.

    Results keep the registry's stable trial-id order.  The condition
    term matches case-insensitively as a substring of any condition.
    """
    want_recruitment = (
        _enum_member(Recruitment, recruitment, "recruitment")
        if recruitment is not None
        else None
    )
    want_phase = _enum_member(Phase, phase, "phase") if phase is not None else None
    want_study_type = (
        _enum_member(StudyType, study_type, "studyType")
        if study_type is not None
        else None
    )
    needle = condition_term.casefold() if condition_term is not None else None
    out = []
    for rec in registry.records:
        if want_recruitment is not None and rec.recruitment is not want_recruitment:
            continue
        if want_phase is not None and rec.phase is not want_phase:
            continue
        if want_study_type is not None and rec.study_type is not want_study_type:
            continue
        if needle is not None and not any(
            needle in cond.casefold() for cond in rec.conditions
        ):
            continue
        out.append(rec)
    return tuple(out)


def paginate(
    items: Sequence[T], page: int, page_size: int
) -> tuple[tuple[T, ...], int, str]:
    """Slice a 1-based page; returns (slice, total, range label).

    The label reads "Showing <first>-<last> of <total>"; an empty slice
    (no items, or a page past the end) reads "Showing 0-0 of <total>".
    """
    if page < 1:
        raise ValueError(f"page must be >= 1, got {page}")
    if page_size < 1:
        raise ValueError(f"page size must be >= 1, got {page_size}")
    total = len(items)
    start = (page - 1) * page_size
    chunk = tuple(items[start : start + page_size])
    if chunk:
        label = f"Showing {start + 1}-{start + len(chunk)} of {total}"
    else:
        label = f"Showing 0-0 of {total}"
    return chunk, total, label


def page_count(total: int, page_size: int) -> int:
    """Number of pages needed to show every item; 0 when there are none."""
    if page_size < 1:
        raise ValueError(f"page size must be >= 1, got {page_size}")
    return (total + page_size - 1) // page_size
