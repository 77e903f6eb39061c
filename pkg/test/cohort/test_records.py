import numpy as np
import pytest

from cbct_toxicity.cohort.records import (
    CLINICAL_WIDTH,
    ClinicalVector,
    Landmark,
    PatientRecord,
    UnknownCategoryError,
    encode_clinical,
    exclusion_filter,
    read_landmarks,
    read_manifest,
    write_landmarks,
    write_manifest,
)
from cbct_toxicity.common import HOSPITALIZATION, NG_TUBE, RADIONECROSIS


def make_record(**overrides):
    values = dict(
        id="P001",
        age_years=64.0,
        sex="F",
        kps=90.0,
        tumor_location="larynx",
        smoker="former",
        alcohol="yes",
        t_stage="T2",
        n_stage="N1",
        m_stage="M0",
        p16="neg",
        surgery=False,
        chemo=True,
        labels={NG_TUBE: True, HOSPITALIZATION: False, RADIONECROSIS: False},
        cbct_paths=[(0, "P001/cbct_t00.v3j"), (10, "P001/cbct_t10.v3j")],
    )
    values.update(overrides)
    return PatientRecord(**values)


class TestEncodeClinical:
    def test_width(self):
        assert CLINICAL_WIDTH == 35
        assert encode_clinical(make_record()).values.shape == (35,)

    def test_blocks(self):
        vector = encode_clinical(make_record())
        assert vector.block("age")[0] == pytest.approx(0.64)
        assert vector.block("kps")[0] == pytest.approx(0.9)
        np.testing.assert_array_equal(vector.block("sex"), [0.0, 1.0])
        np.testing.assert_array_equal(vector.block("tumor_location"), [0, 1, 0, 0, 0, 0])
        np.testing.assert_array_equal(vector.block("surgery"), [1.0, 0.0])
        np.testing.assert_array_equal(vector.block("chemo"), [0.0, 1.0])

    def test_one_hot_blocks_sum_to_one(self):
        vector = encode_clinical(make_record())
        scalars = vector.block("age")[0] + vector.block("kps")[0]
        assert vector.values.sum() == pytest.approx(10 + scalars)

    def test_unknown_category(self):
        with pytest.raises(UnknownCategoryError, match="tumor_location"):
            encode_clinical(make_record(tumor_location="sinus"))

    def test_age_out_of_range(self):
        with pytest.raises(ValueError, match="age"):
            encode_clinical(make_record(age_years=140.0))

    def test_unknown_block(self):
        with pytest.raises(KeyError):
            encode_clinical(make_record()).block("weight")

    def test_vector_width_is_checked(self):
        with pytest.raises(ValueError):
            ClinicalVector(np.zeros(34))


class TestPatientRecord:
    def test_fractions_and_paths(self):
        rec = make_record()
        assert rec.fractions == [0, 10]
        assert rec.cbct_path(10) == "P001/cbct_t10.v3j"
        with pytest.raises(KeyError):
            rec.cbct_path(5)

    def test_fractions_must_increase(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            make_record(cbct_paths=[(10, "a"), (5, "b")])

    def test_fraction_beyond_treatment(self):
        with pytest.raises(ValueError):
            make_record(cbct_paths=[(0, "a"), (36, "b")])

    def test_partial_labels(self):
        with pytest.raises(ValueError, match="lacks labels"):
            make_record(labels={NG_TUBE: True})


def test_exclusion_filter_drops_tube_at_onset():
    records = [make_record(id="a"), make_record(id="b", feeding_tube_at_onset=True)]
    assert [r.id for r in exclusion_filter(records)] == ["a"]


def test_manifest_round_trip(tmp_path):
    records = [make_record(), make_record(id="P002", sex="M", surgery=True)]
    write_manifest(records, tmp_path / "manifest.json")
    assert read_manifest(tmp_path / "manifest.json") == records


def test_manifest_must_be_a_list(tmp_path):
    (tmp_path / "manifest.json").write_text('{"id": "P001"}')
    with pytest.raises(ValueError, match="JSON array"):
        read_manifest(tmp_path / "manifest.json")


def test_landmarks_round_trip(tmp_path):
    landmarks = [
        Landmark("007", (1.0, 2.0, 3.0), (1.5, 2.0, 2.5)),
        Landmark("L1", (-4.25, 0.0, 8.0), (-4.0, 0.5, 8.0)),
    ]
    write_landmarks(landmarks, tmp_path / "lm.csv")
    assert read_landmarks(tmp_path / "lm.csv") == landmarks


def test_landmark_file_reports_distance(tmp_path):
    write_landmarks([Landmark("L0", (0.0, 0.0, 0.0), (3.0, 4.0, 0.0))], tmp_path / "lm.csv")
    header, row = (tmp_path / "lm.csv").read_text().splitlines()
    assert header == "id,fixed_x,fixed_y,fixed_z,moving_x,moving_y,moving_z,millimeters"
    assert float(row.split(",")[-1]) == pytest.approx(5.0)


def test_landmark_file_without_distance_is_accepted(tmp_path):
    (tmp_path / "lm.csv").write_text(
        "id,fixed_x,fixed_y,fixed_z,moving_x,moving_y,moving_z\nL0,1,2,3,1,2,4\n"
    )
    assert read_landmarks(tmp_path / "lm.csv")[0].millimeters == pytest.approx(1.0)


def test_landmark_distance_must_match_positions(tmp_path):
    (tmp_path / "lm.csv").write_text(
        "id,fixed_x,fixed_y,fixed_z,moving_x,moving_y,moving_z,millimeters\nL0,0,0,0,0,0,2,7.5\n"
    )
    with pytest.raises(ValueError, match="L0"):
        read_landmarks(tmp_path / "lm.csv")


def test_landmark_file_needs_all_columns(tmp_path):
    (tmp_path / "lm.csv").write_text("id,fixed_x\nL0,1.0\n")
    with pytest.raises(ValueError, match="lacks columns"):
        read_landmarks(tmp_path / "lm.csv")
