"""Terminology table, term mapping, and normalization behavior.

The normalization expectations below were hand-mapped from a reference
sheet of raw physician annotations before the implementation was written;
they are frozen here as the oracle.
"""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oncopipe import terminology as term
from oncopipe.terminology import CodeSystem


@pytest.fixture(scope="module")
def codes():
    return term.default_codes()


@pytest.fixture(scope="module")
def valuesets():
    return term.default_valuesets()


# === code table ===

def test_lookup_known_codes(codes):
    entry = codes.lookup(CodeSystem.RXNORM, "308056")
    assert entry is not None
    assert entry.display == "Cisplatin"
    entry = codes.lookup(CodeSystem.LOINC, "55233-1")
    assert entry.display == "Leukemia/Lymphoma Panel"
    entry = codes.lookup(CodeSystem.SNOMED, "367336001")
    assert entry.display == "Chemotherapy"


def test_lookup_absent_is_none(codes):
    assert codes.lookup(CodeSystem.SNOMED, "0000000") is None


def test_lookup_identity_for_every_entry(codes):
    for entry in codes.entries:
        assert codes.lookup(entry.system, entry.code) is entry


def test_table_covers_reference_fixture_codes(codes):
    required = [
        (CodeSystem.RXNORM, "308056"),
        (CodeSystem.RXNORM, "308136"),
        (CodeSystem.SNOMED, "367336001"),
        (CodeSystem.LOINC, "30746-1"),
        (CodeSystem.LOINC, "55233-1"),
        (CodeSystem.ICD10, "D72.819"),
    ]
    for system, code in required:
        assert codes.lookup(system, code) is not None


def test_system_uris():
    assert term.SYSTEM_URI[CodeSystem.SNOMED] == "http://snomed.info/sct"
    assert term.SYSTEM_URI[CodeSystem.LOINC] == "http://loinc.org"
    assert term.SYSTEM_URI[CodeSystem.RXNORM] == "http://www.nlm.nih.gov/research/umls/rxnorm"


# === map_term ===

def test_map_term_exact_display(codes):
    ranked = term.map_term("Cisplatin", CodeSystem.RXNORM, codes)
    assert ranked
    entry, score = ranked[0]
    assert (entry.code, score) == ("308056", 1.0)


def test_map_term_case_insensitive(codes):
    ranked = term.map_term("cisplatin", CodeSystem.RXNORM, codes)
    assert ranked[0][0].code == "308056"
    assert ranked[0][1] == 1.0


def test_map_term_synonym(codes):
    ranked = term.map_term("herceptin", CodeSystem.RXNORM, codes)
    assert ranked[0][0].code == "224905"
    assert ranked[0][1] == 1.0


def test_map_term_ct_of_chest(codes):
    ranked = term.map_term("CT of chest", CodeSystem.LOINC, codes)
    assert ranked[0][0].code == "30746-1"
    assert ranked[0][1] == 1.0


def test_map_term_token_overlap(codes):
    # "CT chest" is a synonym (1.0); "chest ct scan" relies on overlap.
    ranked = term.map_term("chest ct scan", CodeSystem.LOINC, codes)
    assert ranked
    assert ranked[0][0].code == "30746-1"
    assert ranked[0][1] < 1.0


def test_map_term_below_threshold_empty(codes):
    assert term.map_term("completely unrelated phrase", CodeSystem.RXNORM, codes) == []
    assert term.map_term("", CodeSystem.LOINC, codes) == []


def test_map_term_deterministic_order(codes):
    first = term.map_term("insulin human", CodeSystem.RXNORM, codes)
    second = term.map_term("insulin human", CodeSystem.RXNORM, codes)
    assert [(e.code, s) for e, s in first] == [(e.code, s) for e, s in second]


# === value sets ===

def test_staging_valuesets_present(valuesets):
    for name in ("tnm-t", "tnm-n", "tnm-m", "numerical-stage", "histology-grade", "laterality", "metastasis-site"):
        assert name in valuesets, name


def test_numerical_stage_order(valuesets):
    vs = valuesets["numerical-stage"]
    assert vs.index("I") < vs.index("II") < vs.index("III") < vs.index("IV")
    assert vs.index("IIIA") > vs.index("III")


def test_valueset_members_normalize_to_themselves(valuesets):
    for name in ("tnm-t", "tnm-n", "tnm-m", "numerical-stage", "histology-grade", "laterality", "metastasis-site", "cancer-diagnosis"):
        vs = valuesets[name]
        for member in vs.members:
            assert term.normalize_categorical(member, vs) == member


# === TNM normalization: hand-mapped oracle ===

TNM_ORACLE = [
    # (raw, axis, value, qualifier)
    ("pT", "T", "Other", None),
    ("pT1", "T", "T1", None),
    ("pT1C", "T", "T1c", None),
    ("pT2", "T", "T2", None),
    ("pT1B", "T", "T1b", None),
    ("pN0", "N", "N0", None),
    ("pN0(+)", "N", "N0", "+"),
    ("pN0(sn)", "N", "N0", "sn"),
    ("pN1", "N", "N1", None),
    ("pN1a", "N", "N1a", None),
    ("N0(i+)", "N", "N0(i+)", None),
    ("N0(mol+)", "N", "N0(mol+)", None),
    ("cT2a", "T", "T2a", None),
    ("ypT3", "T", "T3", None),
    ("yT1", "T", "T1", None),
    ("M0", "M", "M0", None),
    ("pM1a", "M", "M1a", None),
    ("M1a(0)", "M", "M1a(0)", None),
    ("MX", "M", "MX", None),
    ("tx", "T", "Tx", None),
    ("TIS", "T", "Tis", None),
    ("T1MI", "T", "T1mi", None),
    ("nan", "N", "Not Documented", None),
    ("", "T", "Not Documented", None),
    ("N/A", "M", "Not Documented", None),
    ("T9", "T", "Other", None),
    ("banana", "T", "Other", None),
]


@pytest.mark.parametrize("raw,axis,value,qualifier", TNM_ORACLE)
def test_normalize_tnm_oracle(raw, axis, value, qualifier):
    result = term.normalize_tnm(raw, axis)
    assert result.value == value
    assert result.qualifier == qualifier


def test_normalize_tnm_bad_axis():
    with pytest.raises(ValueError):
        term.normalize_tnm("T1", "Q")


@given(st.sampled_from(["T", "N", "M"]), st.text(max_size=12))
@settings(max_examples=200)
def test_normalize_tnm_idempotent(axis, raw):
    once = term.normalize_tnm(raw, axis)
    twice = term.normalize_tnm(once.value, axis)
    assert twice.value == once.value


# === categorical normalization: hand-mapped oracle ===

GRADE_ORACLE = [
    ("G1 (low grade; well differentiated)", "G1 (low grade; well differentiated)"),
    ("G2 (intermediate grade; moderately differentiated)", "G2 (intermediate grade; moderately differentiated)"),
    ("G3 (high grade; poorly differentiated)", "G3 (high grade; poorly differentiated)"),
    ("G1", "G1 (low grade; well differentiated)"),
    ("G2", "G2 (intermediate grade; moderately differentiated)"),
    ("G3", "G3 (high grade; poorly differentiated)"),
    ("['G3']", "G3 (high grade; poorly differentiated)"),
    ("['G2']", "G2 (intermediate grade; moderately differentiated)"),
    ("grade 3", "G3 (high grade; poorly differentiated)"),
    ("['grade 3']", "G3 (high grade; poorly differentiated)"),
    ("['2: Intermediate combined histologic grade (moderately favorable)']",
     "G2 (intermediate grade; moderately differentiated)"),
    ("GX", "GX -cannot be assessed (Undetermined)"),
    ("nan", "Not Documented"),
    ("", "Not Documented"),
]


@pytest.mark.parametrize("raw,expected", GRADE_ORACLE)
def test_normalize_grade_oracle(raw, expected, valuesets):
    assert term.normalize_categorical(raw, valuesets["histology-grade"]) == expected


STAGE_ORACLE = [
    ("IA", "IA"),
    ("IB", "IB"),
    ("II", "II"),
    ("III", "III"),
    ("IIIA", "IIIA"),
    ("['III': True]", "III"),
    ("['IVB': True]", "IVB"),
    ("['IIIA': True]", "IIIA"),
    ("['T2': True]", "Other"),
    ("stage three", "Other"),
    ("nan", "Not Documented"),
]


@pytest.mark.parametrize("raw,expected", STAGE_ORACLE)
def test_normalize_stage_oracle(raw, expected, valuesets):
    assert term.normalize_categorical(raw, valuesets["numerical-stage"]) == expected


LATERALITY_ORACLE = [
    ("Unilateral - Left", "Unilateral - Left"),
    ("Unilateral - Right", "Unilateral - Right"),
    ("Bilateral", "Bilateral"),
    ("left", "Unilateral - Left"),
    ("right", "Unilateral - Right"),
    ("Unilateral - Not Documented", "Not Documented"),
    ("['Breast cancer, female']", "Not Documented"),
    ("['Colon cancer']", "Not Documented"),
    ("['Primary malignant neoplasm of female breast (disorder)']", "Not Documented"),
    ("Not Documented", "Not Documented"),
]


@pytest.mark.parametrize("raw,expected", LATERALITY_ORACLE)
def test_normalize_laterality_oracle(raw, expected, valuesets):
    assert term.normalize_categorical(raw, valuesets["laterality"]) == expected


SITE_ORACLE = [
    ("pred_abdomen", "Abdomen - Other"),
    ("pred_pelvis", "Pelvis"),
    ("pred_bones", "Bone(s)"),
    ("pred_distant_lymph_nodes", "Lymph Node(s) - Distant"),
    ("pred_local_lymph_nodes", "Lymph Node(s) - Local"),
    ("Lymph Node(s) - Distant", "Lymph Node(s) - Distant"),
    ("Bone(s)", "Bone(s)"),
    ("bones", "Bone(s)"),
    ("Brain/Central Nervous System (CNS)", "Brain/Central Nervous System (CNS)"),
    ("liver", "Liver"),
    ("nan", "Not Documented"),
]


@pytest.mark.parametrize("raw,expected", SITE_ORACLE)
def test_normalize_metastasis_site_oracle(raw, expected, valuesets):
    assert term.normalize_categorical(raw, valuesets["metastasis-site"]) == expected


DIAGNOSIS_ORACLE = [
    ("Cervical Cancer", "Cervical Cancer"),
    ("Hematologic Malignancy - Leukemia (ALL; CLL; AML; CML)",
     "Hematologic Malignancy - Leukemia (ALL; CLL; AML; CML)"),
    ("AML", "Hematologic Malignancy - Leukemia (ALL; CLL; AML; CML)"),
    ("Gynecological Other or Vaginal Cancer", "Gynecological Other or Vaginal Cancer"),
    ("['Multiple Myeloma']", "Multiple Myeloma"),
    ("['Colon cancer']", "Colon/Colorectal Cancer"),
    ("['Sigmoid colon cancer']", "Colon/Colorectal Cancer"),
    ("['Primary malignant neoplasm of female breast (disorder)']", "Breast Cancer"),
    ("['Not Documented']", "Not Documented"),
    ("Not Documented", "Not Documented"),
]


@pytest.mark.parametrize("raw,expected", DIAGNOSIS_ORACLE)
def test_normalize_diagnosis_oracle(raw, expected, valuesets):
    assert term.normalize_categorical(raw, valuesets["cancer-diagnosis"]) == expected


HISTOLOGY_ORACLE = [
    ("AGGRESSIVE B-CELL LYMPHOMA", "Other"),
    ("Acute promyelocytic leukemia", "Acute promyelocytic leukemia"),
    ("Acute promyelocytic leukemia (APL)", "Acute promyelocytic leukemia"),
    ("Adenocarcinoma", "Adenocarcinoma"),
    ("Adenocarcinoma - Intestinal type", "Adenocarcinoma - Intestinal type"),
    ("['Multiple Myeloma']", "Plasma cell myeloma"),
    ("['Colon cancer']", "Other"),
    ("['Not Documented']", "Not Documented"),
]


@pytest.mark.parametrize("raw,expected", HISTOLOGY_ORACLE)
def test_normalize_histology_oracle(raw, expected, valuesets):
    assert term.normalize_categorical(raw, valuesets["histology"]) == expected


@given(st.text(max_size=24))
@settings(max_examples=200)
def test_normalize_categorical_idempotent(raw):
    vs = term.valueset("metastasis-site")
    once = term.normalize_categorical(raw, vs)
    assert term.normalize_categorical(once, vs) == once


def test_normalize_text_idempotent_examples():
    for raw in ("Bone(s)", "  Mixed   Lymphoid--Expansion ", "G3 (high grade; poorly differentiated)"):
        assert term.normalize(term.normalize(raw)) == term.normalize(raw)
