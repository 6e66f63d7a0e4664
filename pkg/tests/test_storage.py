import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mosabench import storage
from mosabench.forecastnet import ForecastModel, ModelConfig
from mosabench.mosa import prepare_adaptation
from mosabench.storage import FormatError
from mosabench.synthworld import build_spec_dataset, scenario_preset

CFG = ModelConfig(d_model=8, k_modes=2)


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip_is_exact(x):
    text = storage.dumps([x])
    back = json.loads(text)[0]
    assert float(back) == x
    assert storage.dumps([float(back)]) == text


def test_negative_zero_survives():
    back = json.loads(storage.dumps([-0.0]))[0]
    assert np.signbit(back)


def test_non_finite_rejected():
    with pytest.raises(FormatError):
        storage.dumps([float("nan")])


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    m = ForecastModel.init(CFG)
    storage.save_checkpoint(tmp_path / "a.json", m)
    loaded = storage.load_checkpoint(tmp_path / "a.json")
    storage.save_checkpoint(tmp_path / "b.json", loaded)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert all(np.array_equal(m.params[k].data, loaded.params[k].data) for k in m.params)


@pytest.mark.parametrize("method", ["MOSA", "PA"])
def test_adapted_checkpoint_round_trip(tmp_path, method):
    ad = prepare_adaptation(ForecastModel.init(CFG), method, "A+F", 3, seed=5)
    rng = np.random.default_rng(1)
    for p in ad.adapter_params():
        p.data[...] = rng.normal(size=p.shape)
    storage.save_checkpoint(tmp_path / "a.json", ad)
    loaded = storage.load_checkpoint(tmp_path / "a.json")
    storage.save_checkpoint(tmp_path / "b.json", loaded)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert set(loaded.adapters) == set(ad.adapters)
    for t in ad.adapters:
        assert np.array_equal(loaded.adapters[t].delta(), ad.adapters[t].delta())
        assert not loaded.base.params[t].trainable


def test_version_mismatch_rejected(tmp_path):
    doc = storage.checkpoint_to_dict(ForecastModel.init(CFG))
    doc["format_version"] = 99
    with pytest.raises(FormatError, match="version"):
        storage.checkpoint_from_dict(doc)


def test_value_count_must_match_shape():
    doc = storage.checkpoint_to_dict(ForecastModel.init(CFG))
    doc["tensors"]["scene.fc1.bias"]["values"].append(1.0)
    with pytest.raises(FormatError, match="scene.fc1.bias"):
        storage.checkpoint_from_dict(doc)


def test_missing_tensor_rejected():
    doc = storage.checkpoint_to_dict(ForecastModel.init(CFG))
    del doc["tensors"]["motion.ln1.gamma"]
    with pytest.raises(FormatError, match="missing"):
        storage.checkpoint_from_dict(doc)


def test_dataset_round_trip(tmp_path):
    src, _ = scenario_preset("class_shift")
    ds = build_spec_dataset(src, 5, 3)
    storage.write_json(tmp_path / "scenes.json", storage.scenes_to_dict(ds.scenes))
    storage.save_dataset(tmp_path / "d.json", ds)
    back = storage.load_dataset(tmp_path / "d.json")
    assert back.style == ds.style and back.tag == ds.tag
    for a, b in zip(ds.samples, back.samples):
        assert a.scene_id == b.scene_id
        assert np.array_equal(a.past, b.past) and np.array_equal(a.future, b.future)
    for sid in ds.scenes:
        assert np.array_equal(back.scenes[sid].cells, ds.scenes[sid].cells)
    storage.save_dataset(tmp_path / "e.json", back)
    assert (tmp_path / "d.json").read_bytes() == (tmp_path / "e.json").read_bytes()


def test_dataset_requires_its_scenes(tmp_path):
    src, _ = scenario_preset("agent_shift")
    ds = build_spec_dataset(src, 3, 3)
    doc = storage.dataset_to_dict(ds)
    with pytest.raises(FormatError, match="unknown scenes"):
        storage.dataset_from_dict(doc, {})
