"""
Unit tests for cohort ingestion, labels and arm splits.
"""

import numpy as np
import pytest

from src.cohort import (
    BinaryLabel,
    Cohort,
    TreatmentArm,
    concat_cohorts,
    derive_labels,
    label_codes,
    load_cohort,
    load_schema,
    save_schema,
    split_by_arm,
    write_cohort,
)
from src.errors import DataError, DuplicateId, InvalidConfig, MissingColumn, UnknownTreatment, UnparsableCell
from tests.conftest import make_cohort, make_schema

HEADER = "id,age,sts_risk,diabetes,treatment,time,event\n"


def write_csv(path, rows):
    path.write_text(HEADER + "".join(row + "\n" for row in rows), encoding="utf-8")
    return path


class TestLoadCohort:
    """Test cases for CSV ingestion."""

    def test_complete_rows(self, tmp_path, clinical_schema):
        path = write_csv(tmp_path / "c.csv", [
            "p1,81,4.2,1,SAVR,100,1",
            "p2,77,3.1,0,TAVR,2000,0",
            "p3,85,6.0,1,SAVR,900,0",
        ])
        cohort = load_cohort(path, clinical_schema)

        assert cohort.n == 3
        assert cohort.missing_mask.sum() == 0
        assert cohort.ids == ("p1", "p2", "p3")
        assert cohort.arm_list == [TreatmentArm.SAVR, TreatmentArm.TAVR, TreatmentArm.SAVR]

    def test_empty_cell_is_missing(self, tmp_path, clinical_schema):
        path = write_csv(tmp_path / "c.csv", ["p1,,4.2,1,SAVR,100,1", "p2,77,3.1,0,TAVR,2000,0"])
        cohort = load_cohort(path, clinical_schema)

        assert np.isnan(cohort.column("age")[0])
        assert cohort.missing_mask.sum() == 1

    def test_treatment_is_case_insensitive(self, tmp_path, clinical_schema):
        path = write_csv(tmp_path / "c.csv", ["p1,81,4.2,1,tavr,100,1", "p2,77,3.1,0, Savr ,2000,0"])
        cohort = load_cohort(path, clinical_schema)

        assert list(cohort.arms) == [TreatmentArm.TAVR, TreatmentArm.SAVR]

    def test_write_then_read_round_trip(self, tmp_path, clinical_schema):
        source = write_csv(tmp_path / "c.csv", ["p1,,4.25,1,tavr,100.5,1", "p2,77,3.1,,SAVR,2000,0"])
        cohort = load_cohort(source, clinical_schema)
        write_cohort(cohort, tmp_path / "out.csv")
        again = load_cohort(tmp_path / "out.csv", clinical_schema)

        np.testing.assert_array_equal(again.features, cohort.features)
        np.testing.assert_array_equal(again.arms, cohort.arms)
        np.testing.assert_array_equal(again.times, cohort.times)
        assert again.ids == cohort.ids

    def test_missing_column(self, tmp_path, clinical_schema):
        path = tmp_path / "c.csv"
        path.write_text("id,age,sts_risk,treatment,time,event\np1,81,4.2,SAVR,100,1\n", encoding="utf-8")
        with pytest.raises(MissingColumn) as excinfo:
            load_cohort(path, clinical_schema)
        assert excinfo.value.context["column"] == "diabetes"

    def test_unknown_treatment(self, tmp_path, clinical_schema):
        path = write_csv(tmp_path / "c.csv", ["p1,81,4.2,1,PCI,100,1"])
        with pytest.raises(UnknownTreatment) as excinfo:
            load_cohort(path, clinical_schema)
        assert excinfo.value.context["row"] == 1

    @pytest.mark.parametrize("row", [
        "p1,eighty,4.2,1,SAVR,100,1",
        "p1,81,4.2,2,SAVR,100,1",
        "p1,81,4.2,1,SAVR,-5,1",
        "p1,81,4.2,1,SAVR,,1",
        "p1,81,4.2,1,SAVR,100,yes",
    ])
    def test_unparsable_cells(self, tmp_path, clinical_schema, row):
        path = write_csv(tmp_path / "c.csv", [row])
        with pytest.raises(UnparsableCell):
            load_cohort(path, clinical_schema)

    def test_schema_round_trip(self, tmp_path, clinical_schema):
        save_schema(clinical_schema, tmp_path / "schema.json")
        assert load_schema(tmp_path / "schema.json") == clinical_schema

    def test_invalid_schema_document(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text('{"features": [], "treatment": "arm", "time": "arm", "event": "e"}', encoding="utf-8")
        with pytest.raises(InvalidConfig):
            load_schema(path)

    def test_missing_schema_file(self, tmp_path):
        with pytest.raises(InvalidConfig) as excinfo:
            load_schema(tmp_path / "nope.json")
        assert excinfo.value.context["path"] == str(tmp_path / "nope.json")

    def test_schema_not_json(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text("{\"features\": [", encoding="utf-8")
        with pytest.raises(InvalidConfig, match="not valid JSON"):
            load_schema(path)

    def test_missing_cohort_file(self, tmp_path, clinical_schema):
        with pytest.raises(InvalidConfig):
            load_cohort(tmp_path / "absent.csv", clinical_schema)

    @pytest.mark.parametrize("body", [
        "",
        HEADER + "p1,81,4.2,1,SAVR,100,1,extra,extra,extra\n",
    ])
    def test_malformed_csv(self, tmp_path, clinical_schema, body):
        path = tmp_path / "c.csv"
        path.write_text(body, encoding="utf-8")
        with pytest.raises(DataError):
            load_cohort(path, clinical_schema)

    def test_duplicate_ids(self, tmp_path, clinical_schema):
        path = write_csv(tmp_path / "c.csv", [
            "p1,81,4.2,1,SAVR,100,1",
            "p2,77,3.1,0,TAVR,2000,0",
            "p1,85,6.0,1,SAVR,900,0",
        ])
        with pytest.raises(DuplicateId) as excinfo:
            load_cohort(path, clinical_schema)
        assert excinfo.value.context["row"] == 3
        assert excinfo.value.context["first_row"] == 1


class TestDeriveLabels:
    """Test cases for horizon labels."""

    @pytest.mark.parametrize("time, event, expected", [
        (100.0, True, BinaryLabel.BAD),
        (2000.0, False, BinaryLabel.GOOD),
        (900.0, False, BinaryLabel.INDETERMINATE),
        (1825.0, True, BinaryLabel.BAD),
        (1825.0, False, BinaryLabel.GOOD),
        (2500.0, True, BinaryLabel.GOOD),
    ])
    def test_label(self, time, event, expected):
        cohort = make_cohort([[0.0]], [0], times=[time], events=[event])
        assert derive_labels(cohort, 1825.0) == [expected]

    def test_label_codes(self):
        codes = label_codes([BinaryLabel.BAD, BinaryLabel.GOOD, BinaryLabel.INDETERMINATE])
        assert list(codes) == [1, 0, -1]

    def test_nonpositive_horizon(self):
        cohort = make_cohort([[0.0]], [0])
        with pytest.raises(InvalidConfig):
            derive_labels(cohort, 0.0)


class TestSplitByArm:
    """Test cases for arm partitioning."""

    def test_sizes(self):
        savr, tavr = split_by_arm(make_cohort([[1.0], [2.0], [3.0]], [0, 1, 0]))
        assert (savr.n, tavr.n) == (2, 1)
        assert savr.ids == ("id0", "id2")

    def test_all_tavr(self):
        savr, tavr = split_by_arm(make_cohort([[1.0], [2.0]], [1, 1]))
        assert savr.n == 0
        assert tavr.n == 2

    def test_recombining_reproduces_ids(self, small_synth):
        cohort, _ = small_synth
        order = np.random.default_rng(3).permutation(cohort.n)[:100]
        shuffled = cohort.subset(order)
        savr, tavr = split_by_arm(shuffled)
        recombined = concat_cohorts([savr, tavr])

        assert savr.n + tavr.n == shuffled.n
        assert set(recombined.ids) == set(shuffled.ids)
        assert set(savr.ids).isdisjoint(tavr.ids)

    def test_cohort_arrays_are_read_only(self):
        cohort = make_cohort([[1.0]], [0])
        with pytest.raises(ValueError):
            cohort.features[0, 0] = 5.0


class TestCohortIds:
    """Test cases for patient id uniqueness and concatenation."""

    def test_constructor_rejects_duplicates(self):
        with pytest.raises(DuplicateId):
            Cohort(make_schema(continuous=("x0",)), np.zeros((2, 1)), [0, 1], [10.0, 20.0], [False, True], ("a", "a"))

    def test_concat_with_overlapping_ids(self):
        cohort = make_cohort([[1.0], [2.0]], [0, 1])
        with pytest.raises(DuplicateId):
            concat_cohorts([cohort, cohort])

    def test_concat_nothing(self):
        with pytest.raises(InvalidConfig):
            concat_cohorts([])

    def test_concat_nothing_with_schema(self):
        schema = make_schema(continuous=("x0", "x1"))
        empty = concat_cohorts([], schema=schema)

        assert empty.n == 0
        assert empty.features.shape == (0, 2)
