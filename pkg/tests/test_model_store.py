import numpy as np
import pytest

from errors import ModelFileError
from latent_model.inference import recommend_batch
from latent_model.model_store import ModelStore, load_model, save_model
from settings import ARTIFACT_VERSION
from trial_data.dataset_io import read_json, write_json


def test_round_trip_preserves_parameters(tmp_path, fitted_model, simulated):
    dataset, _ = simulated
    path = tmp_path / "model.json"
    save_model(fitted_model, path, provenance={"command": "train"})
    restored = load_model(path)

    assert restored.schema == fitted_model.schema
    assert restored.covariate_names == fitted_model.covariate_names
    assert restored.anchors == fitted_model.anchors
    assert restored.config == fitted_model.config
    assert restored.objective_log == fitted_model.objective_log
    for name, array in fitted_model.theta.named_arrays().items():
        np.testing.assert_array_equal(restored.theta.named_arrays()[name], array)
    assert recommend_batch(restored, dataset.y0, dataset.x).equals(recommend_batch(fitted_model, dataset.y0, dataset.x))

    payload = read_json(path)
    assert payload["version"] == ARTIFACT_VERSION
    assert payload["provenance"] == {"command": "train"}


def test_saving_twice_is_byte_identical(tmp_path, fitted_model):
    save_model(fitted_model, tmp_path / "a.json")
    save_model(fitted_model, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_missing_and_corrupt_files(tmp_path, fitted_model):
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "absent.json")

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ModelFileError):
        load_model(broken)

    path = tmp_path / "model.json"
    save_model(fitted_model, path)
    payload = read_json(path)
    del payload["transition"]
    write_json(path, payload)
    with pytest.raises(ModelFileError):
        load_model(path)


def test_dimension_mismatch_is_rejected(tmp_path, fitted_model):
    path = tmp_path / "model.json"
    save_model(fitted_model, path)
    payload = read_json(path)
    payload["covariates"] = payload["covariates"][:-1]
    write_json(path, payload)
    with pytest.raises(ModelFileError):
        load_model(path)

    save_model(fitted_model, path)
    payload = read_json(path)
    payload["measurement"][0]["beta"] = [[0.0]]
    write_json(path, payload)
    with pytest.raises(ModelFileError):
        load_model(path)


def test_model_store(tmp_path, fitted_model):
    store = ModelStore(str(tmp_path / "models"))
    assert store.list_models() == []
    assert store.load_model("missing") is None
    store.save_model("second", fitted_model)
    store.save_model("first", fitted_model)
    assert store.list_models() == ["first", "second"]
    assert store.load_model("first").K == fitted_model.K
    assert store.delete_model("first")
    assert not store.delete_model("first")
    assert store.list_models() == ["second"]
