import struct

import numpy as np
import pytest

from trajrefine.checkpoint import ModelCheckpoint
from trajrefine.model import TwoStageModel
from trajrefine.params import CheckpointFormatError, ParameterStore, pack, unpack

from conftest import small_config


def test_names_are_sorted_and_unique():
    store = ParameterStore(0)
    store.linear("b", 2, 3)
    store.linear("a", 3, 1, stack=4)
    assert store.names() == ["a.bias", "a.weight", "b.bias", "b.weight"]
    assert store["a.weight"].shape == (4, 3, 1) and store["a.bias"].shape == (4, 1, 1)
    with pytest.raises(KeyError):
        store.add("a.bias", 0.0)


def test_store_round_trip_is_bit_exact():
    model = TwoStageModel(small_config(), seed=7)
    blob = model.params.to_bytes()
    back = ParameterStore.from_bytes(blob)
    assert back.names() == model.params.names()
    for n, t in model.params.items():
        np.testing.assert_array_equal(back[n].data, t.data)
    assert back.to_bytes() == blob


def test_pack_unpack_with_metadata():
    state = {"x": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)}
    meta, back = unpack(pack(state, {"b": 1, "a": [1, 2]}))
    assert meta == {"a": [1, 2], "b": 1}
    np.testing.assert_array_equal(back["x"], state["x"])
    assert back["s"].shape == () and back["s"] == 2.5
    assert pack(state, {"b": 1, "a": 2}) == pack(dict(reversed(list(state.items()))), {"a": 2, "b": 1})


def test_bad_magic_and_version():
    blob = pack({"x": np.zeros(2)})
    with pytest.raises(CheckpointFormatError, match="RPND"):
        unpack(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointFormatError, match="version 9"):
        unpack(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        unpack(blob[:-3])
    with pytest.raises(CheckpointFormatError):
        unpack(b"RP")


def test_load_state_checks_names_and_shapes():
    store = ParameterStore(0)
    store.linear("a", 2, 2)
    with pytest.raises(CheckpointFormatError, match="missing"):
        store.load_state({"a.weight": np.zeros((2, 2))})
    with pytest.raises(CheckpointFormatError, match="shape"):
        store.load_state({"a.weight": np.zeros((3, 2)), "a.bias": np.zeros(2)})


def test_model_checkpoint_round_trip(tmp_path):
    model = TwoStageModel(small_config(), seed=7)
    snapshot = {"model": model.config.to_dict(), "seed": 7}
    opt = {"step": 3, "m": {k: v * 0 + 1 for k, v in model.params.state().items()},
           "v": {k: v * 0 + 2 for k, v in model.params.state().items()}}
    ckpt = ModelCheckpoint(snapshot, model.params.state(), opt, epoch=2, metrics={"minfde6": 1.5})
    ckpt.save(tmp_path / "c.ckpt")
    back = ModelCheckpoint.load(tmp_path / "c.ckpt")
    assert back.epoch == 2 and back.metrics == {"minfde6": 1.5} and back.optimizer["step"] == 3
    assert back.to_bytes() == ckpt.to_bytes()
    rebuilt = back.build_model()
    for n, t in model.params.items():
        np.testing.assert_array_equal(rebuilt.params[n].data, t.data)
    with pytest.raises(CheckpointFormatError, match="bare parameters"):
        ModelCheckpoint.from_bytes(model.params.to_bytes())
