#!/usr/bin/env python3
"""Generate the bundled 215-trial synthetic registry fixture.

Deterministic (fixed seed); writes src/oncopipe/data/trials.ndjson in
canonical form.  The registry is curated around the bundled breast
cancer demo patient (corpus note-03):

  - trial-001 is the hand-curated two-cohort therapy-resistance study
    and the only trial whose criteria are all satisfied by that patient;
  - trial-002 and trial-003 are fixed possible matches scoring 3/4;
  - every other trial is built from criterion pools whose verdicts for
    that patient are known (satisfied or unknown, never violated), with
    at most as many satisfied as unknown per cohort, so no generated
    trial can outrank the three curated ones.
"""

from __future__ import annotations

import random
import sys
from collections import Counter
from pathlib import Path

from oncopipe.registry import (
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
    filter_trials,
    save_registry,
)

OUT_PATH = Path(__file__).resolve().parents[1] / "src" / "oncopipe" / "data" / "trials.ndjson"

SEED = 215_2024

INCL = CriterionKind.INCLUSION
EXCL = CriterionKind.EXCLUSION


def _c(kind, field, op, value) -> Criterion:
    return Criterion(kind=kind, field=field, op=op, value=value)


# Criteria the demo patient satisfies (stage III HER2-positive breast
# cancer, T2 N1 M0, prior trastuzumab and chemotherapy, age 54, female).
SATISFIED_POOL: list[Criterion] = [
    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.EQUALS, "breast cancer"),
    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.IN_SET, ["breast cancer", "gastric cancer"]),
    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.IN_SET, ["breast cancer", "head and neck cancer", "lung cancer"]),
    _c(INCL, CriterionField.STAGE, CriterionOp.AT_LEAST_STAGE, "I"),
    _c(INCL, CriterionField.STAGE, CriterionOp.AT_LEAST_STAGE, "II"),
    _c(INCL, CriterionField.STAGE, CriterionOp.AT_LEAST_STAGE, "III"),
    _c(INCL, CriterionField.STAGE, CriterionOp.IN_SET, ["II", "III"]),
    _c(INCL, CriterionField.TNM_T, CriterionOp.IN_SET, ["T1", "T2", "T3"]),
    _c(INCL, CriterionField.TNM_T, CriterionOp.EQUALS, "T2"),
    _c(INCL, CriterionField.TNM_N, CriterionOp.IN_SET, ["N1", "N2", "N3"]),
    _c(INCL, CriterionField.TNM_M, CriterionOp.EQUALS, "M0"),
    _c(INCL, CriterionField.PRIOR_THERAPY, CriterionOp.HAS, "trastuzumab"),
    _c(INCL, CriterionField.PRIOR_THERAPY, CriterionOp.HAS, "chemotherapy"),
    _c(INCL, CriterionField.PRIOR_THERAPY, CriterionOp.LACKS, "tamoxifen"),
    _c(INCL, CriterionField.PRIOR_THERAPY, CriterionOp.LACKS, "bevacizumab"),
    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS, {"name": "HER2", "status": "positive"}),
    _c(INCL, CriterionField.AGE, CriterionOp.GE, 18),
    _c(INCL, CriterionField.AGE, CriterionOp.GE, 21),
    _c(INCL, CriterionField.AGE, CriterionOp.LE, 70),
    _c(INCL, CriterionField.AGE, CriterionOp.LE, 80),
    _c(INCL, CriterionField.GENDER, CriterionOp.EQUALS, "female"),
    _c(EXCL, CriterionField.DIAGNOSIS, CriterionOp.HAS, "lung cancer"),
    _c(EXCL, CriterionField.DIAGNOSIS, CriterionOp.HAS, "prostate cancer"),
    _c(EXCL, CriterionField.PRIOR_THERAPY, CriterionOp.HAS, "bevacizumab"),
    _c(EXCL, CriterionField.PRIOR_THERAPY, CriterionOp.HAS, "olaparib"),
    _c(EXCL, CriterionField.STAGE, CriterionOp.AT_LEAST_STAGE, "IV"),
]

# Criteria the demo patient cannot resolve: no metastasis sites on file,
# histologic grade not documented, and none of these marker names tested.
UNKNOWN_POOL: list[Criterion] = [
    _c(INCL, CriterionField.METASTASIS_SITE, CriterionOp.HAS, "Brain/Central Nervous System (CNS)"),
    _c(INCL, CriterionField.METASTASIS_SITE, CriterionOp.HAS, "Liver"),
    _c(INCL, CriterionField.METASTASIS_SITE, CriterionOp.HAS, "Bone(s)"),
    _c(INCL, CriterionField.METASTASIS_SITE, CriterionOp.IN_SET, ["Bone(s)", "Liver", "Lung"]),
    _c(INCL, CriterionField.METASTASIS_SITE, CriterionOp.IN_SET, ["Lymph Node(s) - Distant", "Pelvis"]),
    _c(EXCL, CriterionField.METASTASIS_SITE, CriterionOp.HAS, "Brain/Central Nervous System (CNS)"),
    _c(EXCL, CriterionField.METASTASIS_SITE, CriterionOp.HAS, "Liver"),
    _c(INCL, CriterionField.HISTOLOGY_GRADE, CriterionOp.IN_SET,
       ["G1 (low grade; well differentiated)", "G2 (intermediate grade; moderately differentiated)"]),
    _c(INCL, CriterionField.HISTOLOGY_GRADE, CriterionOp.IN_SET,
       ["G3 (high grade; poorly differentiated)", "G4 (high grade; undifferentiated)"]),
    _c(INCL, CriterionField.HISTOLOGY_GRADE, CriterionOp.EQUALS, "G3 (high grade; poorly differentiated)"),
    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS, {"name": "PD-L1", "status": "positive"}),
    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS, {"name": "ER", "status": "positive"}),
    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS, {"name": "PR", "status": "positive"}),
    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS, {"name": "BRCA1", "status": "mutated"}),
    _c(INCL, CriterionField.BIOMARKER, CriterionOp.LACKS, {"name": "KRAS", "status": "mutated"}),
    _c(EXCL, CriterionField.BIOMARKER, CriterionOp.HAS, {"name": "MSI", "status": "positive"}),
]

DRUGS = [
    "Paclitaxel", "Capecitabine", "Trastuzumab Deruxtecan", "Sacituzumab Govitecan",
    "Ribociclib", "Palbociclib", "Abemaciclib", "Alpelisib", "Everolimus",
    "Olaparib", "Talazoparib", "Pembrolizumab", "Atezolizumab", "Tucatinib",
    "Neratinib", "Margetuximab", "Fulvestrant", "Elacestrant", "Eribulin",
    "Ixabepilone", "Gemcitabine", "Carboplatin", "Datopotamab Deruxtecan",
    "Pyrotinib", "Utidelone",
]

SPONSORS = [
    "Harborview Cancer Research Consortium",
    "Crestline Oncology Group",
    "Meridian Cancer Alliance",
    "Bellweather Institute for Cancer Research",
    "Northlake University Cancer Center",
    "Pacific Rim Oncology Network",
    "Summit Translational Oncology Program",
    "Riverbend Clinical Research Collaborative",
    "Stonebridge Cancer Foundation",
    "Lakeshore Academic Medical Center",
]

BREAST_CONDITIONS = [
    ["Breast Cancer"],
    ["Breast Cancer"],
    ["Breast Cancer"],
    ["Metastatic Breast Cancer"],
    ["HER2-Positive Breast Cancer"],
    ["Hormone Receptor-Positive Breast Cancer"],
    ["Triple-Negative Breast Cancer"],
    ["Early-Stage Breast Cancer"],
    ["Breast Cancer", "Bone Metastases"],
    ["Breast Cancer", "Brain Tumor - Metastatic"],
]

BASKET_CONDITIONS = [
    ["Advanced Solid Tumors"],
    ["Advanced Malignancies"],
    ["Refractory Solid Tumors"],
]

PHASE_LABEL = {
    Phase.EARLY_PHASE_1: "Early Phase 1",
    Phase.PHASE_1: "Phase 1",
    Phase.PHASE_1_2: "Phase 1/2",
    Phase.PHASE_2: "Phase 2",
    Phase.PHASE_2_3: "Phase 2/3",
    Phase.PHASE_3: "Phase 3",
    Phase.PHASE_4: "Phase 4",
}

INTERVENTIONAL_TITLES = [
    "A {phase} Study of {drug} in {cond}",
    "{drug} Plus {drug2} for Previously Treated {cond}",
    "Randomized {phase} Trial of {drug} Versus {drug2} in {cond}",
    "{drug} Monotherapy in Patients With {cond}",
    "Neoadjuvant {drug} Followed by Surgery in {cond}",
    "Dose Escalation and Expansion Study of {drug} in {cond}",
    "{drug} Maintenance Therapy After First-Line Treatment in {cond}",
    "A {phase} Study of {drug} With or Without {drug2} in {cond}",
]

OBSERVATIONAL_TITLES = [
    "Longitudinal Biomarker Study in {cond}",
    "Registry of Treatment Patterns and Outcomes in {cond}",
    "Quality of Life Assessment During Therapy for {cond}",
    "Circulating Tumor DNA Surveillance in {cond}",
    "Prospective Cohort Study of Recurrence Risk in {cond}",
]

DESCRIPTION_LEADS = [
    "This study evaluates {drug} in participants with {cond}.",
    "An open-label study of {drug} for {cond}.",
    "This trial investigates whether {drug} improves outcomes in {cond}.",
    "A multicenter study assessing {drug} in {cond}.",
]

DESCRIPTION_TAILS = [
    "Key eligibility includes measurable disease and adequate organ function.",
    "Participants are followed for response, progression, and safety events.",
    "Tumor assessments are performed every two cycles until progression.",
    "Archival or fresh tumor tissue is collected for correlative analyses.",
    "Prior systemic therapy is permitted per protocol-defined washout periods.",
]

OBS_DESCRIPTIONS = [
    "This observational study collects longitudinal clinical and biomarker data from participants with {cond}. No investigational treatment is administered.",
    "A prospective registry following participants with {cond} through routine care to characterize treatment patterns and outcomes.",
]


def trial_001() -> TrialRecord:
    description = (
        "Conducted by Memorial Sloan Kettering Cancer Center, this study aims to "
        "understand why tumors become resistant to therapy. Participants undergo "
        "tumor biopsy at progression so that mechanisms of acquired resistance to "
        "targeted therapy can be characterized.\n\n"
        "Inclusion Criteria:\n\n"
        "All patients:\n"
        "- Diagnosed with breast cancer.\n"
        "- Patient must be able to consent to a biopsy\n"
        "- Patient must be able to safely undergo a secondary biopsy, if needed.\n\n"
        "Cohort 1\n"
        "- Patients who previously received treatment with anti-HER2 therapy "
        "(including trastuzumab, pertuzumab, TDM1, lapatinib, neratinib, or DS8201) "
        "as part of adjuvant chemotherapy and now have progressive or recurrent "
        "breast cancer or, patients who previously (or currently) received anti-HER2 "
        "therapy as part of a regimen for metastatic breast cancer and subsequently "
        "experienced.\n"
        "- Evidence of disease progression or recurrence after prior therapy (e.g. "
        "radiologic progression by RECIST criteria or new metastasis).\n"
        "- Prior tumor biopsy (may be original) defined as HER2+ by amplification "
        "by FISH (>1.9 gene copy number) or IHC 3+.\n\n"
        "Cohort 2\n"
        "- Patients who previously received treatment with hormonal therapy "
        "(including aromatase inhibitors or SERMs or SERDs) as a part of adjuvant "
        "therapy and now have progressive or recurrent breast cancer or patients "
        "who previously (or currently) receive hormonal therapy as part of a "
        "regimen for metastatic breast cancer and subsequently experienced evidence "
        "of disease progression."
    )
    return TrialRecord(
        trial_id="trial-001",
        title=(
            "Molecular Mechanisms of Clinical Resistance to Targeted Therapy "
            "Among Patients With Breast Cancer"
        ),
        conditions=("Breast Cancer",),
        recruitment=Recruitment.RECRUITING,
        phase=Phase.NA,
        study_type=StudyType.OBSERVATIONAL,
        sponsor="Memorial Sloan Kettering Cancer Center",
        description=description,
        cohorts=(
            Cohort(
                name="Cohort 1",
                criteria=(
                    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.EQUALS, "breast cancer"),
                    _c(INCL, CriterionField.PRIOR_THERAPY, CriterionOp.IN_SET,
                       ["trastuzumab", "pertuzumab", "TDM1", "lapatinib", "neratinib", "DS8201"]),
                    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS,
                       {"name": "HER2", "status": "positive"}),
                ),
            ),
            Cohort(
                name="Cohort 2",
                criteria=(
                    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.EQUALS, "breast cancer"),
                    _c(INCL, CriterionField.PRIOR_THERAPY, CriterionOp.IN_SET,
                       ["anastrozole", "exemestane", "letrozole", "tamoxifen", "fulvestrant"]),
                ),
            ),
        ),
    )


def trial_002() -> TrialRecord:
    return TrialRecord(
        trial_id="trial-002",
        title="Cabozantinib +/- Trastuzumab In Breast Cancer Patients w/ Brain Metastases",
        conditions=("Breast Cancer", "Brain Tumor - Metastatic"),
        recruitment=Recruitment.RECRUITING,
        phase=Phase.PHASE_2,
        study_type=StudyType.INTERVENTIONAL,
        sponsor="Northlake University Cancer Center",
        description=(
            "This study evaluates cabozantinib given alone or together with "
            "trastuzumab in participants with breast cancer and new or progressive "
            "brain metastases. Treatment continues until progression or "
            "unacceptable toxicity, with intracranial response assessed by serial "
            "brain MRI."
        ),
        cohorts=(
            Cohort(
                name="Main Cohort",
                criteria=(
                    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.EQUALS, "breast cancer"),
                    _c(INCL, CriterionField.METASTASIS_SITE, CriterionOp.HAS,
                       "Brain/Central Nervous System (CNS)"),
                ),
            ),
        ),
    )


def trial_003() -> TrialRecord:
    return TrialRecord(
        trial_id="trial-003",
        title="A Phase 1/2 Safety Study of Intratumorally Dosed INT230-6",
        conditions=("Breast Cancer", "Head and Neck Cancer"),
        recruitment=Recruitment.RECRUITING,
        phase=Phase.PHASE_1_2,
        study_type=StudyType.INTERVENTIONAL,
        sponsor="Crestline Oncology Group",
        description=(
            "An open-label safety and tolerability study of INT230-6 administered "
            "by direct intratumoral injection to accessible lesions in participants "
            "with refractory cancers, including breast cancer and head and neck "
            "cancer. Dose escalation is followed by expansion at the recommended "
            "dose."
        ),
        cohorts=(
            Cohort(
                name="Main Cohort",
                criteria=(
                    _c(INCL, CriterionField.DIAGNOSIS, CriterionOp.IN_SET,
                       ["breast cancer", "head and neck cancer"]),
                    _c(INCL, CriterionField.BIOMARKER, CriterionOp.HAS,
                       {"name": "PD-L1", "status": "positive"}),
                ),
            ),
        ),
    )


def make_cohort(rng: random.Random, name: str) -> Cohort:
    n_unknown = rng.randint(1, 3)
    n_satisfied = rng.randint(0, n_unknown)
    picked = rng.sample(UNKNOWN_POOL, n_unknown) + rng.sample(SATISFIED_POOL, n_satisfied)
    rng.shuffle(picked)
    # Inclusions read before exclusions, as eligibility lists do.
    picked.sort(key=lambda c: c.kind is EXCL)
    return Cohort(name=name, criteria=tuple(picked))


def make_trial(num: int, rng: random.Random, used_titles: set[str]) -> TrialRecord:
    study_type = StudyType.OBSERVATIONAL if rng.random() < 0.15 else StudyType.INTERVENTIONAL
    if study_type is StudyType.OBSERVATIONAL:
        phase = Phase.NA
    else:
        phase = rng.choice([p for p in Phase if p is not Phase.NA])
    conditions = rng.choice(
        BASKET_CONDITIONS if rng.random() < 0.12 else BREAST_CONDITIONS
    )
    cond = conditions[0]
    drug, drug2 = rng.sample(DRUGS, 2)
    for _ in range(100):
        template = rng.choice(
            OBSERVATIONAL_TITLES
            if study_type is StudyType.OBSERVATIONAL
            else INTERVENTIONAL_TITLES
        )
        title = template.format(
            phase=PHASE_LABEL.get(phase, "Pilot"), drug=drug, drug2=drug2, cond=cond
        )
        if title not in used_titles:
            break
        drug, drug2 = rng.sample(DRUGS, 2)
    used_titles.add(title)

    if study_type is StudyType.OBSERVATIONAL:
        description = rng.choice(OBS_DESCRIPTIONS).format(cond=cond)
    else:
        lead = rng.choice(DESCRIPTION_LEADS).format(drug=drug, cond=cond)
        tails = rng.sample(DESCRIPTION_TAILS, 2)
        description = " ".join([lead] + tails)

    n_cohorts = rng.choices([1, 2, 3], weights=[70, 22, 8])[0]
    if n_cohorts == 1:
        cohorts = (make_cohort(rng, "All Participants"),)
    else:
        cohorts = tuple(
            make_cohort(rng, f"Cohort {i}") for i in range(1, n_cohorts + 1)
        )

    recruitment = rng.choices(
        [
            Recruitment.RECRUITING,
            Recruitment.ACTIVE_NOT_RECRUITING,
            Recruitment.COMPLETED,
            Recruitment.SUSPENDED,
        ],
        weights=[60, 20, 12, 8],
    )[0]

    return TrialRecord(
        trial_id=f"trial-{num:03d}",
        title=title,
        conditions=tuple(conditions),
        recruitment=recruitment,
        phase=phase,
        study_type=study_type,
        sponsor=rng.choice(SPONSORS),
        description=description,
        cohorts=cohorts,
    )


def main() -> int:
    rng = random.Random(SEED)
    records = [trial_001(), trial_002(), trial_003()]
    used_titles = {r.title for r in records}
    for num in range(4, 216):
        records.append(make_trial(num, rng, used_titles))
    registry = Registry(records=tuple(records))

    assert len(registry) == 215
    assert all(rec.cohorts for rec in registry.records)
    for enum_cls, pick in (
        (Recruitment, lambda r: r.recruitment),
        (Phase, lambda r: r.phase),
        (StudyType, lambda r: r.study_type),
    ):
        present = {pick(rec) for rec in registry.records}
        assert present == set(enum_cls), f"missing {set(enum_cls) - present}"
    by_condition = filter_trials(registry, condition_term="Breast Cancer")
    assert any(r.trial_id == "trial-002" for r in by_condition)

    # Generated cohorts must never let the demo patient outrank the curated
    # head: each needs at least one unknown-pool criterion and no more
    # satisfied-pool than unknown-pool members.
    sat = set(SATISFIED_POOL)
    unk = set(UNKNOWN_POOL)
    for rec in registry.records[3:]:
        for cohort in rec.cohorts:
            n_s = sum(1 for c in cohort.criteria if c in sat)
            n_u = sum(1 for c in cohort.criteria if c in unk)
            assert n_u >= 1 and n_s <= n_u and n_s + n_u == len(cohort.criteria)

    save_registry(registry, OUT_PATH)
    phases = Counter(rec.phase.value for rec in registry.records)
    recruitments = Counter(rec.recruitment.value for rec in registry.records)
    types = Counter(rec.study_type.value for rec in registry.records)
    print(f"wrote {len(registry)} trials to {OUT_PATH}")
    print(f"phase counts: {dict(sorted(phases.items()))}")
    print(f"recruitment counts: {dict(sorted(recruitments.items()))}")
    print(f"study type counts: {dict(sorted(types.items()))}")
    print(f"conditionTerm 'Breast Cancer' matches: {len(by_condition)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
