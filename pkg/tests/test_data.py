import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ordmlm.data import (
    AnemiaLevel,
    ClassificationError,
    ColumnMapping,
    CovariateSpec,
    DataError,
    EncodingError,
    EncodingSpec,
    ObservationRecord,
    classify_hemoglobin,
    encode_dataset,
    load_dataset,
    read_observations,
    write_dataset_csv,
)


class TestClassifyHemoglobin:
    @pytest.mark.parametrize(
        "hb,expected",
        [
            (6.9, 1),
            (0.0, 1),
            (7.0, 2),
            (9.9, 2),
            (9.95, 2),
            (10.0, 3),
            (10.5, 3),
            (10.9, 3),
            (11.0, 4),
            (15.2, 4),
        ],
    )
    def test_cutoffs(self, hb, expected):
        assert classify_hemoglobin(hb) == AnemiaLevel(expected)

    def test_labels_and_order(self):
        assert AnemiaLevel.SEVERE < AnemiaLevel.MODERATE < AnemiaLevel.MILD < AnemiaLevel.NONE
        assert AnemiaLevel.SEVERE.label == "Severe"
        assert AnemiaLevel.NONE.label == "None"

    @pytest.mark.parametrize("bad", [None, -0.1, float("nan"), float("inf"), -math.inf])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ClassificationError):
            classify_hemoglobin(bad)

    @given(st.floats(min_value=0.0, max_value=30.0, allow_nan=False))
    def test_total_on_nonnegative_reals(self, hb):
        level = classify_hemoglobin(hb)
        assert 1 <= int(level) <= 4

    @given(
        st.floats(min_value=0.0, max_value=30.0),
        st.floats(min_value=0.0, max_value=30.0),
    )
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert classify_hemoglobin(lo) <= classify_hemoglobin(hi)

    def test_partition_boundaries_exact(self):
        # each value maps to exactly one level, including at the cutoffs
        eps = 1e-12
        for cutoff, below, at in [(7.0, 1, 2), (10.0, 2, 3), (11.0, 3, 4)]:
            assert classify_hemoglobin(cutoff - eps) == below
            assert classify_hemoglobin(cutoff) == at


def _records():
    spec = EncodingSpec(
        (
            CovariateSpec("age_at_marriage", ("Below 18", "18-26", "Above 26")),
            CovariateSpec("child_age", ("<48", "48 or more")),
        )
    )
    records = [
        ObservationRecord(6.0, "B", {"age_at_marriage": "18-26", "child_age": "<48"}),
        ObservationRecord(12.0, "A", {"age_at_marriage": "Below 18", "child_age": "48 or more"}),
        ObservationRecord(10.2, "B", {"age_at_marriage": "Above 26", "child_age": "<48"}),
        ObservationRecord(8.0, "A", {"age_at_marriage": "18-26", "child_age": "<48"}),
    ]
    return records, spec


class TestEncodeDataset:
    def test_scores_follow_category_order(self):
        records, spec = _records()
        data, report = encode_dataset(records, spec)
        assert data.covariate_names == ("age_at_marriage", "child_age")
        np.testing.assert_array_equal(data.design[:, 0], [1, 0, 2, 1])
        np.testing.assert_array_equal(data.design[:, 1], [0, 1, 0, 0])
        np.testing.assert_array_equal(data.responses, [1, 4, 3, 2])
        assert report.total_excluded == 0

    def test_clusters_first_appearance_order(self):
        records, spec = _records()
        data, _ = encode_dataset(records, spec)
        assert data.cluster_labels == ("B", "A")
        np.testing.assert_array_equal(data.cluster_index, [0, 1, 0, 1])

    def test_deterministic(self):
        records, spec = _records()
        d1, _ = encode_dataset(records, spec)
        d2, _ = encode_dataset(records, spec)
        np.testing.assert_array_equal(d1.design, d2.design)
        np.testing.assert_array_equal(d1.cluster_index, d2.cluster_index)
        assert d1.cluster_labels == d2.cluster_labels

    def test_round_trip_scores_to_labels(self):
        records, spec = _records()
        data, _ = encode_dataset(records, spec)
        for row, rec in zip(data.design, records):
            for j, cov in enumerate(spec.covariates):
                assert cov.label(int(row[j])) == rec.covariates[cov.name]

    def test_unknown_label_names_record_and_field(self):
        records, spec = _records()
        records.append(
            ObservationRecord(9.0, "A", {"age_at_marriage": "nope", "child_age": "<48"})
        )
        with pytest.raises(EncodingError, match=r"record 4.*age_at_marriage"):
            encode_dataset(records, spec)

    def test_listwise_deletion_counts(self):
        records, spec = _records()
        records.append(ObservationRecord(None, "A", {"age_at_marriage": "18-26", "child_age": "<48"}))
        records.append(ObservationRecord(-2.0, "A", {"age_at_marriage": "18-26", "child_age": "<48"}))
        records.append(ObservationRecord(9.0, "A", {"age_at_marriage": "18-26", "child_age": None}))
        data, report = encode_dataset(records, spec)
        assert data.n_obs == 4
        assert report.counts == {
            "missing hemoglobin": 1,
            "invalid hemoglobin": 1,
            "missing covariate: child_age": 1,
        }
        assert report.total_input == 7
        assert report.total_kept == 4
        assert "missing covariate: child_age: 1" in report.summary()

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            encode_dataset([], EncodingSpec())

    def test_dataset_immutable(self):
        records, spec = _records()
        data, _ = encode_dataset(records, spec)
        with pytest.raises(ValueError):
            data.responses[0] = 2

    def test_record_requires_cluster(self):
        with pytest.raises(DataError):
            ObservationRecord(9.0, "", {})


class TestCsvIngestion:
    def test_read_and_encode(self, tmp_path):
        csv_path = tmp_path / "in.csv"
        csv_path.write_text(
            "state,hb,marr,age\n"
            "S1,6.0,18-26,<48\n"
            "S2,12.0,Below 18,48 or more\n"
            "S1,,18-26,<48\n"
            "S2,10.2,Above 26,\n",
            encoding="utf-8",
        )
        columns = ColumnMapping(
            cluster="state",
            hemoglobin="hb",
            covariates={"age_at_marriage": "marr", "child_age": "age"},
        )
        data, report = load_dataset(csv_path, columns)
        assert data.n_obs == 2
        assert report.counts == {
            "missing hemoglobin": 1,
            "missing covariate: child_age": 1,
        }
        assert data.cluster_labels == ("S1", "S2")

    def test_missing_column_is_data_error(self, tmp_path):
        csv_path = tmp_path / "in.csv"
        csv_path.write_text("state,hb\nS1,6.0\n", encoding="utf-8")
        columns = ColumnMapping(
            cluster="state", hemoglobin="hb", covariates={"child_age": "age"}
        )
        with pytest.raises(DataError, match="age"):
            read_observations(csv_path, columns)

    def test_non_numeric_hemoglobin_is_data_error(self, tmp_path):
        csv_path = tmp_path / "in.csv"
        csv_path.write_text("state,hb\nS1,abc\n", encoding="utf-8")
        with pytest.raises(DataError, match="abc"):
            read_observations(csv_path, ColumnMapping(cluster="state", hemoglobin="hb"))

    def test_export_round_trip(self, tmp_path):
        records, spec = _records()
        data, _ = encode_dataset(records, spec)
        columns = ColumnMapping(
            cluster="state",
            hemoglobin="hemoglobin",
            covariates={name: name for name in data.covariate_names},
        )
        out = tmp_path / "export.csv"
        write_dataset_csv(out, data, columns)
        again, report = load_dataset(out, columns, spec)
        np.testing.assert_array_equal(again.responses, data.responses)
        np.testing.assert_array_equal(again.design, data.design)
        np.testing.assert_array_equal(again.cluster_index, data.cluster_index)
        assert again.cluster_labels == data.cluster_labels
        assert report.total_excluded == 0

    def test_mapping_requires_exactly_one_outcome_column(self):
        with pytest.raises(DataError):
            ColumnMapping(cluster="c", hemoglobin="hb", response="r")
        with pytest.raises(DataError):
            ColumnMapping(cluster="c", hemoglobin=None, response=None)
