"""Shared hypothesis strategies for structured clinical variables."""

from __future__ import annotations

import datetime as dt

from hypothesis import strategies as st

from oncopipe import terminology
from oncopipe.extraction import (
    NOT_DOCUMENTED,
    ClinicalVariables,
    Demographics,
    DiagnosisEntry,
    MedicationEntry,
    ObservationEntry,
    ProcedureEntry,
)
from oncopipe.matching import PatientFacts
from oncopipe.registry import (
    OP_COMPAT,
    BiomarkerRequirement,
    Cohort,
    Criterion,
    CriterionField,
    CriterionKind,
    CriterionOp,
    Phase,
    Recruitment,
    Registry,
    StudyType,
    TrialRecord,
)

_WORDS = (
    "tumor", "cell", "lung", "breast", "colon", "scan", "panel", "blood",
    "left", "acute", "chronic", "carcinoma", "biopsy", "margin", "ct",
    "count", "response", "therapy", "node", "mass",
)

names = st.lists(st.sampled_from(_WORDS), min_size=1, max_size=4, unique=True).map(" ".join)

dates = st.dates(
    min_value=dt.date(1950, 1, 1), max_value=dt.date(2025, 12, 28)
).map(lambda d: d.isoformat())

instants = st.tuples(
    dates, st.integers(0, 23), st.integers(0, 59), st.integers(0, 59)
).map(lambda t: f"{t[0]}T{t[1]:02d}:{t[2]:02d}:{t[3]:02d}Z")


def _vs_member(name: str):
    return st.sampled_from(terminology.valueset(name).members)


def _with_not_documented(name: str):
    return st.one_of(st.just(NOT_DOCUMENTED), _vs_member(name))


def _table_terms(system: terminology.CodeSystem):
    entries = terminology.default_codes().for_system(system)
    return st.sampled_from([e.display for e in entries])


diagnosis_entries = st.one_of(
    names.map(DiagnosisEntry),
    _table_terms(terminology.CodeSystem.SNOMED).map(DiagnosisEntry),
    st.builds(
        lambda e: DiagnosisEntry(term=e.display, code=(e.system.value, e.code)),
        st.sampled_from(terminology.default_codes().for_system(terminology.CodeSystem.ICD10)),
    ),
)

medication_entries = st.builds(
    MedicationEntry,
    name=st.one_of(names, _table_terms(terminology.CodeSystem.RXNORM)),
    dosage_text=st.one_of(st.just(""), st.just("10 mg oral tablet")),
)

procedure_entries = st.builds(
    ProcedureEntry,
    name=st.one_of(names, _table_terms(terminology.CodeSystem.SNOMED)),
    performed_date=st.one_of(st.none(), dates),
)

observation_entries = st.builds(
    ObservationEntry,
    name=st.one_of(names, _table_terms(terminology.CodeSystem.LOINC)),
    value_text=st.one_of(st.just(""), names),
)

demographics = st.builds(
    Demographics,
    age=st.one_of(st.none(), st.integers(0, 120)),
    gender=st.one_of(st.none(), st.sampled_from(("male", "female", "other", "unknown"))),
    marital_status=st.one_of(st.none(), st.just("married"), st.just("single")),
)


clinical_variables = st.builds(
    ClinicalVariables,
    cancer_diagnosis=st.lists(diagnosis_entries, max_size=3).map(tuple),
    diagnosis_date=st.one_of(st.none(), dates),
    metastasis_indication=_with_not_documented("metastasis-indication"),
    metastasis_sites=st.lists(_vs_member("metastasis-site"), max_size=2, unique=True).map(tuple),
    tnm_t=_with_not_documented("tnm-t"),
    tnm_n=_with_not_documented("tnm-n"),
    tnm_m=_with_not_documented("tnm-m"),
    numerical_stage=_with_not_documented("numerical-stage"),
    histology=_with_not_documented("histology"),
    histology_grade=_with_not_documented("histology-grade"),
    laterality=_with_not_documented("laterality"),
    medications=st.lists(medication_entries, max_size=3).map(tuple),
    procedures=st.lists(procedure_entries, max_size=2).map(tuple),
    allergies=st.lists(names, max_size=2, unique=True).map(tuple),
    observations=st.lists(observation_entries, max_size=3).map(tuple),
    demographics=demographics,
    specimen_source=st.one_of(st.none(), st.just("Peripheral Blood"), st.just("Bone Marrow")),
    specimen_viability=st.one_of(st.none(), st.just("84%"), st.just("92%")),
    collected_datetime=st.one_of(st.none(), instants),
    reported_datetime=st.one_of(st.none(), instants),
    panel_name=st.one_of(
        st.none(), st.just("Leukemia/Lymphoma Panel"), st.just("Complete Blood Count"),
        st.just("Mystery Panel"),
    ),
    performer=st.one_of(st.none(), st.just("Renee Mohrman, M.D.")),
    note_date=st.one_of(st.none(), dates),
)


# Trial-registry strategies.  Values are drawn from small pools shared
# with the patient-fact strategies so random criteria and random facts
# collide often enough to exercise every verdict.

_FIELD_VALUE_POOLS = {
    CriterionField.DIAGNOSIS: (
        "breast cancer", "lung cancer", "colon cancer", "gastric cancer",
        "multiple myeloma",
    ),
    CriterionField.STAGE: ("I", "II", "IIIA", "III", "IV"),
    CriterionField.TNM_T: ("T1", "T2", "T3", "T4"),
    CriterionField.TNM_N: ("N0", "N1", "N2"),
    CriterionField.TNM_M: ("M0", "M1"),
    CriterionField.PRIOR_THERAPY: (
        "trastuzumab", "chemotherapy", "tamoxifen", "carboplatin", "radiation therapy",
    ),
    CriterionField.METASTASIS_SITE: (
        "Liver", "Bone(s)", "Brain/Central Nervous System (CNS)", "Pelvis",
    ),
    CriterionField.HISTOLOGY_GRADE: (
        "G1 (low grade; well differentiated)",
        "G2 (intermediate grade; moderately differentiated)",
        "G3 (high grade; poorly differentiated)",
    ),
    CriterionField.GENDER: ("female", "male", "other"),
}

biomarker_names = st.sampled_from(("HER2", "ER", "PR", "PD-L1", "KRAS"))
biomarker_statuses = st.sampled_from(("positive", "negative", "mutated"))

_FIELD_OPS = sorted(
    ((f, op) for f, ops in OP_COMPAT.items() for op in ops),
    key=lambda pair: (pair[0].value, pair[1].value),
)


def _criterion_value(field: CriterionField, op: CriterionOp):
    if op in (CriterionOp.GE, CriterionOp.LE):
        return st.integers(0, 90)
    if field is CriterionField.BIOMARKER:
        return st.builds(
            BiomarkerRequirement, name=biomarker_names, status=biomarker_statuses
        )
    pool = _FIELD_VALUE_POOLS[field]
    if op is CriterionOp.AT_LEAST_STAGE:
        return st.sampled_from(("I", "II", "III", "IV"))
    if op is CriterionOp.IN_SET:
        return st.lists(st.sampled_from(pool), min_size=1, max_size=3, unique=True)
    return st.sampled_from(pool)


@st.composite
def criteria(draw) -> Criterion:
    field, op = draw(st.sampled_from(_FIELD_OPS))
    return Criterion(
        kind=draw(st.sampled_from(CriterionKind)),
        field=field,
        op=op,
        value=draw(_criterion_value(field, op)),
    )


cohorts = st.builds(
    Cohort,
    name=st.sampled_from(("All Participants", "Cohort 1", "Cohort 2", "Arm A")),
    criteria=st.lists(criteria(), max_size=4).map(tuple),
)

_CONDITION_TERMS = (
    "Breast Cancer", "Lung Cancer", "Colon/Colorectal Cancer",
    "Advanced Solid Tumors", "Multiple Myeloma",
)


@st.composite
def trial_records(draw, trial_id: str | None = None) -> TrialRecord:
    if trial_id is None:
        trial_id = f"trial-{draw(st.integers(1, 999)):03d}"
    return TrialRecord(
        trial_id=trial_id,
        title=draw(names),
        conditions=tuple(
            draw(st.lists(st.sampled_from(_CONDITION_TERMS), max_size=2, unique=True))
        ),
        recruitment=draw(st.sampled_from(Recruitment)),
        phase=draw(st.sampled_from(Phase)),
        study_type=draw(st.sampled_from(StudyType)),
        sponsor=draw(names),
        description=draw(names),
        cohorts=tuple(draw(st.lists(cohorts, min_size=1, max_size=3))),
    )


registries = st.lists(
    trial_records(), max_size=8, unique_by=lambda rec: rec.trial_id
).map(lambda recs: Registry(records=tuple(recs)))


# Patient-fact strategies draw from the same pools as the criterion
# strategies above, so evaluations hit all three verdicts regularly.

patient_facts = st.builds(
    PatientFacts,
    diagnoses=st.frozensets(
        st.sampled_from(_FIELD_VALUE_POOLS[CriterionField.DIAGNOSIS]), max_size=2
    ),
    numerical_stage=st.sampled_from(
        _FIELD_VALUE_POOLS[CriterionField.STAGE] + (NOT_DOCUMENTED,)
    ),
    tnm_t=st.sampled_from(_FIELD_VALUE_POOLS[CriterionField.TNM_T] + (NOT_DOCUMENTED,)),
    tnm_n=st.sampled_from(_FIELD_VALUE_POOLS[CriterionField.TNM_N] + (NOT_DOCUMENTED,)),
    tnm_m=st.sampled_from(_FIELD_VALUE_POOLS[CriterionField.TNM_M] + (NOT_DOCUMENTED,)),
    biomarkers=st.dictionaries(biomarker_names, biomarker_statuses, max_size=3),
    prior_therapies=st.frozensets(
        st.sampled_from(_FIELD_VALUE_POOLS[CriterionField.PRIOR_THERAPY]), max_size=2
    ),
    metastasis_sites=st.frozensets(
        st.sampled_from(_FIELD_VALUE_POOLS[CriterionField.METASTASIS_SITE]), max_size=2
    ),
    histology_grade=st.sampled_from(
        _FIELD_VALUE_POOLS[CriterionField.HISTOLOGY_GRADE] + (NOT_DOCUMENTED,)
    ),
    age=st.none() | st.integers(0, 99),
    gender=st.none() | st.sampled_from(("female", "male", "other", "unknown")),
)
