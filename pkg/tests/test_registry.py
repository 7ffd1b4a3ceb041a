"""Trial registry: parsing, invariants, filtering, pagination."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oncopipe.registry import (
    MAJOR_STAGES,
    OP_COMPAT,
    BiomarkerRequirement,
    Cohort,
    Criterion,
    CriterionField,
    CriterionKind,
    CriterionOp,
    DuplicateIdError,
    IncompatibleOperatorError,
    ParseError,
    Phase,
    Recruitment,
    Registry,
    StudyType,
    TrialRecord,
    default_registry_path,
    filter_trials,
    load_registry,
    page_count,
    paginate,
    record_from_dict,
    record_to_dict,
    save_registry,
)

from strategies import registries

# Frozen profile of the bundled fixture, tallied by scanning the raw
# NDJSON with the json module alone (see also the brute-force scans in
# the filter tests below, which re-derive these at run time).
FIXTURE_SIZE = 215
FIXTURE_PHASE_1_2 = 18
FIXTURE_RECRUITING = 120
FIXTURE_INTERVENTIONAL = 182
FIXTURE_BREAST_TERM = 192


@pytest.fixture(scope="module")
def bundled():
    return load_registry()


@pytest.fixture(scope="module")
def raw_lines():
    with open(default_registry_path(), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def make_record(trial_id="trial-001", **overrides):
    base = dict(
        trial_id=trial_id,
        title="A Study",
        conditions=("Breast Cancer",),
        recruitment=Recruitment.RECRUITING,
        phase=Phase.PHASE_2,
        study_type=StudyType.INTERVENTIONAL,
        sponsor="Harborview Cancer Research Consortium",
        description="A study.",
        cohorts=(Cohort(name="All Participants"),),
    )
    base.update(overrides)
    return TrialRecord(**base)


class TestBundledFixture:
    def test_loads_215_trials(self, bundled):
        assert len(bundled) == FIXTURE_SIZE

    def test_ids_unique_and_sorted(self, bundled):
        ids = [rec.trial_id for rec in bundled.records]
        assert ids == sorted(ids)
        assert len(set(ids)) == FIXTURE_SIZE

    def test_every_trial_has_a_cohort(self, bundled):
        assert all(rec.cohorts for rec in bundled.records)

    def test_resistance_study_fixture(self, bundled):
        rec = bundled.get("trial-001")
        assert rec is not None
        assert rec.title == (
            "Molecular Mechanisms of Clinical Resistance to Targeted Therapy "
            "Among Patients With Breast Cancer"
        )
        assert rec.sponsor == "Memorial Sloan Kettering Cancer Center"
        assert rec.conditions == ("Breast Cancer",)
        assert [c.name for c in rec.cohorts] == ["Cohort 1", "Cohort 2"]
        first = rec.cohorts[0]
        assert [c.field for c in first.criteria] == [
            CriterionField.DIAGNOSIS,
            CriterionField.PRIOR_THERAPY,
            CriterionField.BIOMARKER,
        ]
        anti_her2 = first.criteria[1].value
        assert "trastuzumab" in anti_her2 and "pertuzumab" in anti_her2
        assert first.criteria[2].value == BiomarkerRequirement("HER2", "positive")
        assert "aims to understand why tumors become resistant" in rec.description

    def test_brain_metastases_fixture(self, bundled):
        rec = bundled.get("trial-002")
        assert rec.title == (
            "Cabozantinib +/- Trastuzumab In Breast Cancer Patients w/ Brain Metastases"
        )
        assert rec.conditions == ("Breast Cancer", "Brain Tumor - Metastatic")

    def test_intratumoral_fixture(self, bundled):
        rec = bundled.get("trial-003")
        assert rec.title == "A Phase 1/2 Safety Study of Intratumorally Dosed INT230-6"
        assert rec.conditions == ("Breast Cancer", "Head and Neck Cancer")
        assert rec.phase is Phase.PHASE_1_2

    def test_get_missing_id(self, bundled):
        assert bundled.get("trial-999") is None


class TestLoading:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "trials.ndjson"
        path.write_text("")
        assert len(load_registry(path)) == 0

    def test_blank_lines_ignored(self, tmp_path, bundled):
        path = tmp_path / "trials.ndjson"
        line = json.dumps(record_to_dict(bundled.records[0]))
        path.write_text(f"\n{line}\n\n")
        assert len(load_registry(path)) == 1

    def test_duplicate_id(self, tmp_path, bundled):
        path = tmp_path / "trials.ndjson"
        line = json.dumps(record_to_dict(bundled.records[0]))
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(DuplicateIdError) as exc:
            load_registry(path)
        assert exc.value.trial_id == "trial-001"

    def test_invalid_json_reports_line(self, tmp_path, bundled):
        path = tmp_path / "trials.ndjson"
        line = json.dumps(record_to_dict(bundled.records[0]))
        path.write_text(line + "\n{not json\n")
        with pytest.raises(ParseError) as exc:
            load_registry(path)
        assert exc.value.line == 2

    def test_missing_key_reports_line(self, tmp_path, bundled):
        obj = record_to_dict(bundled.records[0])
        del obj["sponsor"]
        path = tmp_path / "trials.ndjson"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ParseError) as exc:
            load_registry(path)
        assert exc.value.line == 1
        assert "sponsor" in str(exc.value)

    def test_unknown_key_rejected(self, tmp_path, bundled):
        obj = record_to_dict(bundled.records[0])
        obj["nctId"] = "NCT00000000"
        path = tmp_path / "trials.ndjson"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ParseError):
            load_registry(path)

    def test_bad_enum_reports_line(self, tmp_path, bundled):
        obj = record_to_dict(bundled.records[0])
        obj["phase"] = "phase_5"
        path = tmp_path / "trials.ndjson"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ParseError) as exc:
            load_registry(path)
        assert "phase" in str(exc.value)

    def test_cohortless_record_rejected(self, tmp_path, bundled):
        obj = record_to_dict(bundled.records[0])
        obj["cohorts"] = []
        path = tmp_path / "trials.ndjson"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ParseError):
            load_registry(path)

    def test_env_var_overrides_default(self, tmp_path, monkeypatch, bundled):
        path = tmp_path / "alt.ndjson"
        save_registry(Registry(records=bundled.records[:3]), path)
        monkeypatch.setenv("ONCO_REGISTRY", str(path))
        assert default_registry_path() == path
        assert len(load_registry()) == 3


class TestCriterionValidation:
    VALUE_FOR = {
        CriterionOp.GE: 18,
        CriterionOp.LE: 80,
        CriterionOp.AT_LEAST_STAGE: "II",
        CriterionOp.IN_SET: ["a", "b"],
    }

    def sample_value(self, field, op):
        if field is CriterionField.BIOMARKER:
            return {"name": "HER2", "status": "positive"}
        return self.VALUE_FOR.get(op, "x")

    @pytest.mark.parametrize("field", list(CriterionField))
    @pytest.mark.parametrize("op", list(CriterionOp))
    def test_op_field_compat_table(self, field, op):
        build = lambda: Criterion(
            kind=CriterionKind.INCLUSION,
            field=field,
            op=op,
            value=self.sample_value(field, op),
        )
        if op in OP_COMPAT[field]:
            assert build().op is op
        else:
            with pytest.raises(IncompatibleOperatorError):
                build()

    def test_in_set_canonical_sorted_unique(self):
        crit = Criterion(
            kind=CriterionKind.INCLUSION,
            field=CriterionField.PRIOR_THERAPY,
            op=CriterionOp.IN_SET,
            value=["b", "a", "b"],
        )
        assert crit.value == ("a", "b")

    def test_at_least_stage_major_only(self):
        assert MAJOR_STAGES == ("I", "II", "III", "IV")
        with pytest.raises(ValueError):
            Criterion(
                kind=CriterionKind.INCLUSION,
                field=CriterionField.STAGE,
                op=CriterionOp.AT_LEAST_STAGE,
                value="IIIA",
            )

    def test_biomarker_value_shape(self):
        with pytest.raises(ValueError):
            Criterion(
                kind=CriterionKind.INCLUSION,
                field=CriterionField.BIOMARKER,
                op=CriterionOp.HAS,
                value={"name": "HER2"},
            )

    def test_age_value_must_be_integer(self):
        with pytest.raises(ValueError):
            Criterion(
                kind=CriterionKind.INCLUSION,
                field=CriterionField.AGE,
                op=CriterionOp.GE,
                value="18",
            )

    def test_empty_in_set_rejected(self):
        with pytest.raises(ValueError):
            Criterion(
                kind=CriterionKind.INCLUSION,
                field=CriterionField.DIAGNOSIS,
                op=CriterionOp.IN_SET,
                value=[],
            )


class TestFiltering:
    def test_no_filters_is_identity(self, bundled):
        assert filter_trials(bundled) == bundled.records

    def test_phase_filter_matches_brute_force(self, bundled, raw_lines):
        expected = [obj["trialId"] for obj in raw_lines if obj["phase"] == "phase_1_2"]
        got = filter_trials(bundled, phase=Phase.PHASE_1_2)
        assert [rec.trial_id for rec in got] == sorted(expected)
        assert len(got) == FIXTURE_PHASE_1_2

    def test_recruitment_filter_matches_brute_force(self, bundled, raw_lines):
        expected = [
            obj["trialId"] for obj in raw_lines if obj["recruitment"] == "recruiting"
        ]
        got = filter_trials(bundled, recruitment="recruiting")
        assert [rec.trial_id for rec in got] == sorted(expected)
        assert len(got) == FIXTURE_RECRUITING

    def test_study_type_filter_matches_brute_force(self, bundled, raw_lines):
        expected = [
            obj["trialId"] for obj in raw_lines if obj["studyType"] == "interventional"
        ]
        got = filter_trials(bundled, study_type=StudyType.INTERVENTIONAL)
        assert len(got) == FIXTURE_INTERVENTIONAL
        assert [rec.trial_id for rec in got] == sorted(expected)

    def test_condition_term_includes_brain_metastases_trial(self, bundled):
        got = filter_trials(bundled, condition_term="Breast Cancer")
        ids = [rec.trial_id for rec in got]
        assert "trial-002" in ids
        assert len(got) == FIXTURE_BREAST_TERM

    def test_condition_term_case_insensitive_substring(self, bundled):
        lower = filter_trials(bundled, condition_term="breast cancer")
        upper = filter_trials(bundled, condition_term="BREAST CANCER")
        partial = filter_trials(bundled, condition_term="breast")
        assert lower == upper
        assert set(lower) <= set(partial)

    def test_conjunctive_filters(self, bundled):
        both = filter_trials(
            bundled, recruitment="recruiting", study_type="interventional"
        )
        assert both == tuple(
            rec
            for rec in filter_trials(bundled, recruitment="recruiting")
            if rec.study_type is StudyType.INTERVENTIONAL
        )

    def test_results_keep_trial_id_order(self, bundled):
        got = filter_trials(bundled, recruitment="recruiting")
        ids = [rec.trial_id for rec in got]
        assert ids == sorted(ids)

    def test_unknown_filter_value_rejected(self, bundled):
        with pytest.raises(ValueError):
            filter_trials(bundled, phase="phase_9")


class TestPagination:
    def test_first_page(self, bundled):
        chunk, total, label = paginate(bundled.records, 1, 10)
        assert len(chunk) == 10
        assert total == 215
        assert label == "Showing 1-10 of 215"
        assert chunk[0].trial_id == "trial-001"

    def test_last_page_is_partial(self, bundled):
        chunk, total, label = paginate(bundled.records, 22, 10)
        assert len(chunk) == 5
        assert total == 215
        assert label == "Showing 211-215 of 215"

    def test_empty_items(self):
        chunk, total, label = paginate((), 1, 10)
        assert chunk == ()
        assert total == 0
        assert label == "Showing 0-0 of 0"

    def test_page_past_end(self, bundled):
        chunk, total, label = paginate(bundled.records, 23, 10)
        assert chunk == ()
        assert total == 215
        assert label == "Showing 0-0 of 215"

    def test_preconditions(self):
        with pytest.raises(ValueError):
            paginate((), 0, 10)
        with pytest.raises(ValueError):
            paginate((), 1, 0)

    def test_page_count(self):
        assert page_count(215, 10) == 22
        assert page_count(0, 10) == 0
        assert page_count(215, 215) == 1
        assert page_count(215, 214) == 2


class TestPersistence:
    def test_save_load_roundtrip_bundled(self, tmp_path, bundled):
        path = tmp_path / "out.ndjson"
        save_registry(bundled, path)
        assert load_registry(path) == bundled

    def test_save_is_canonical_byte_stable(self, tmp_path, bundled):
        first = tmp_path / "a.ndjson"
        second = tmp_path / "b.ndjson"
        save_registry(bundled, first)
        save_registry(load_registry(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_bundled_file_is_canonical(self, tmp_path, bundled):
        path = tmp_path / "resaved.ndjson"
        save_registry(bundled, path)
        assert path.read_bytes() == default_registry_path().read_bytes()

    def test_record_dict_roundtrip(self, bundled):
        for rec in bundled.records[:5]:
            assert record_from_dict(record_to_dict(rec)) == rec

    def test_registry_orders_records_on_construction(self):
        a = make_record("trial-002")
        b = make_record("trial-001")
        reg = Registry(records=(a, b))
        assert [rec.trial_id for rec in reg.records] == ["trial-001", "trial-002"]

    def test_registry_rejects_duplicate_ids(self):
        rec = make_record("trial-001")
        with pytest.raises(DuplicateIdError):
            Registry(records=(rec, rec))


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(
        items=st.lists(st.integers(), max_size=60),
        page_size=st.integers(1, 20),
    )
    def test_pages_partition_items(self, items, page_size):
        pages = max(page_count(len(items), page_size), 1)
        rebuilt = []
        for page in range(1, pages + 1):
            chunk, total, label = paginate(items, page, page_size)
            assert total == len(items)
            assert len(chunk) <= page_size
            if chunk:
                first = (page - 1) * page_size + 1
                last = first + len(chunk) - 1
                assert label == f"Showing {first}-{last} of {total}"
            else:
                assert label == f"Showing 0-0 of {total}"
            rebuilt.extend(chunk)
        assert rebuilt == list(items)
        beyond, _, _ = paginate(items, pages + 1, page_size)
        assert beyond == ()

    @settings(max_examples=100, deadline=None)
    @given(
        registry=registries,
        recruitment=st.sampled_from(Recruitment),
        phase=st.sampled_from(Phase),
    )
    def test_filters_compose(self, registry, recruitment, phase):
        combined = filter_trials(registry, recruitment=recruitment, phase=phase)
        staged = filter_trials(
            Registry(records=filter_trials(registry, recruitment=recruitment)),
            phase=phase,
        )
        assert combined == staged

    @settings(max_examples=100, deadline=None)
    @given(registry=registries)
    def test_save_load_identity(self, registry, tmp_path_factory):
        path = tmp_path_factory.mktemp("reg") / "trials.ndjson"
        save_registry(registry, path)
        assert load_registry(path) == registry

    @settings(max_examples=100, deadline=None)
    @given(registry=registries, term=st.sampled_from(
        ("breast", "Breast Cancer", "lung", "zzz")
    ))
    def test_condition_filter_only_keeps_matching(self, registry, term):
        got = filter_trials(registry, condition_term=term)
        for rec in registry.records:
            matches = any(term.casefold() in c.casefold() for c in rec.conditions)
            assert (rec in got) == matches
