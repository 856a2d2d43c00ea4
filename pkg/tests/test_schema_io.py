import numpy as np
import pytest
from pydantic import ValidationError

from conftest import random_dataset
from errors import DataValidationError, SchemaError
from trial_data.dataset_io import load_dataset, load_features, save_dataset, save_schema
from trial_data.schema import Dataset, ItemSchema, ItemSpec, SchemaFile, SubjectRecord


def write_schema(tmp_path, schema: ItemSchema, covariates, anchors=()):
    path = tmp_path / "schema.json"
    save_schema(SchemaFile(items=list(schema.items), covariates=list(covariates), anchors=list(anchors)), path)
    return path


@pytest.fixture
def one_item_schema():
    return ItemSchema(items=[ItemSpec(name="mood", kind="discrete", num_categories=3)])


def test_item_spec_validation():
    with pytest.raises(ValidationError):
        ItemSpec(name="a", kind="discrete", num_categories=1)
    with pytest.raises(ValidationError):
        ItemSpec(name="a", kind="continuous", num_categories=3)
    with pytest.raises(ValidationError):
        ItemSchema(items=[ItemSpec(name="a", kind="continuous"), ItemSpec(name="a", kind="continuous")])


def test_schema_file_rejects_column_collisions():
    with pytest.raises(ValidationError):
        SchemaFile(items=[ItemSpec(name="a", kind="continuous")], covariates=["treatment"])
    with pytest.raises(ValidationError):
        SchemaFile(items=[], covariates=["x1"])


def test_load_hand_written_file(tmp_path, one_item_schema):
    schema_path = write_schema(tmp_path, one_item_schema, ["age"])
    data = tmp_path / "data.csv"
    data.write_text("y0_mood,age,treatment,propensity,y1_mood\n0,1.5,1,0.5,2\n2,-0.25,-1,0.5,1\n")
    ds = load_dataset(data, schema_path)
    assert ds.n == 2
    np.testing.assert_array_equal(ds.y0[:, 0], [0, 2])
    np.testing.assert_array_equal(ds.x[:, 0], [1.5, -0.25])
    np.testing.assert_array_equal(ds.treatment, [1, -1])
    np.testing.assert_array_equal(ds.y1[:, 0], [2, 1])


def test_out_of_range_category_names_row_and_item(tmp_path, one_item_schema):
    schema_path = write_schema(tmp_path, one_item_schema, ["age"])
    data = tmp_path / "data.csv"
    data.write_text("y0_mood,age,treatment,propensity,y1_mood\n0,1.0,1,0.5,2\n5,1.0,-1,0.5,1\n")
    with pytest.raises(DataValidationError) as excinfo:
        load_dataset(data, schema_path)
    assert excinfo.value.row == 1
    assert excinfo.value.column == "y0_mood"


@pytest.mark.parametrize(
    "row, column",
    [
        ("0,abc,1,0.5,1", "age"),
        ("0,1.0,1,1.0,1", "propensity"),
        ("0,1.0,1,,1", "propensity"),
        ("0,1.0,0,0.5,1", "treatment"),
        ("0.5,1.0,1,0.5,1", "y0_mood"),
    ],
)
def test_malformed_cells_are_reported(tmp_path, one_item_schema, row, column):
    schema_path = write_schema(tmp_path, one_item_schema, ["age"])
    data = tmp_path / "data.csv"
    data.write_text(f"y0_mood,age,treatment,propensity,y1_mood\n{row}\n")
    with pytest.raises(DataValidationError) as excinfo:
        load_dataset(data, schema_path)
    assert excinfo.value.row == 0
    assert excinfo.value.column == column


def test_missing_column(tmp_path, one_item_schema):
    schema_path = write_schema(tmp_path, one_item_schema, ["age"])
    data = tmp_path / "data.csv"
    data.write_text("y0_mood,treatment,propensity,y1_mood\n0,1,0.5,1\n")
    with pytest.raises(DataValidationError) as excinfo:
        load_dataset(data, schema_path)
    assert excinfo.value.column == "age"


def test_constant_propensity_fills_column(tmp_path, one_item_schema):
    schema_path = write_schema(tmp_path, one_item_schema, [])
    data = tmp_path / "data.csv"
    data.write_text("y0_mood,treatment,y1_mood\n0,1,1\n1,-1,2\n")
    ds = load_dataset(data, schema_path, constant_propensity=0.3)
    np.testing.assert_array_equal(ds.propensity, [0.3, 0.3])


def test_invalid_schema_file(tmp_path):
    path = tmp_path / "schema.json"
    path.write_text('{"items": [{"name": "a", "kind": "ordinal"}]}')
    with pytest.raises(SchemaError):
        load_dataset(tmp_path / "data.csv", path)


def test_round_trip_random_datasets(tmp_path, small_schema):
    rng = np.random.default_rng(0)
    schema_path = write_schema(tmp_path, small_schema, ["x1", "x2"])
    for trial in range(100):
        ds = random_dataset(small_schema, int(rng.integers(1, 12)), 2, rng)
        path = tmp_path / f"data_{trial}.csv"
        save_dataset(ds, path)
        assert load_dataset(path, schema_path).equals(ds)


def test_save_empty_and_single_record(tmp_path, small_schema):
    empty = Dataset.from_records(small_schema, ["x1"], [])
    save_dataset(empty, tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text().count("\n") == 1

    single = Dataset.from_records(
        small_schema, ["x1"], [SubjectRecord(y0=[1, 0, 0.1], x=[2.0], a=-1, propensity=0.4, y1=[2, 1, 1e-17])]
    )
    save_dataset(single, tmp_path / "single.csv")
    assert (tmp_path / "single.csv").read_text().count("\n") == 2


def test_dataset_is_read_only(small_dataset):
    with pytest.raises(ValueError):
        small_dataset.y0[0, 0] = 1.0


def test_subset_and_arm_counts(small_dataset):
    part = small_dataset.subset([0, 1, 2])
    assert part.n == 3
    np.testing.assert_array_equal(part.x, small_dataset.x[:3])
    counts = small_dataset.arm_counts()
    assert counts[1] + counts[-1] == small_dataset.n


def test_require_both_arms(small_schema):
    record = SubjectRecord(y0=[0, 0, 0.0], x=[], a=1, propensity=0.5, y1=[0, 0, 0.0])
    ds = Dataset.from_records(small_schema, [], [record, record])
    with pytest.raises(DataValidationError):
        ds.require_both_arms()


def test_load_features_ignores_outcome_columns(tmp_path, small_dataset):
    schema_path = write_schema(tmp_path, small_dataset.schema, small_dataset.covariate_names)
    save_dataset(small_dataset, tmp_path / "data.csv")
    _, Y0, X = load_features(tmp_path / "data.csv", schema_path)
    np.testing.assert_array_equal(Y0, small_dataset.y0)
    np.testing.assert_array_equal(X, small_dataset.x)
