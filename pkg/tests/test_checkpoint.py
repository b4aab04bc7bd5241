import copy
import json

import numpy as np
import pytest

from speakervc import checkpoint as ckpt
from speakervc.nn_utils import state_hash


@pytest.fixture
def saved(tiny_system, tmp_path):
    system, _ = tiny_system
    for name, obj in [("codebook", system.codebook), ("projection", system.projection),
                      ("speaker", system.spk_encoder), ("adaptor", system.adaptor),
                      (ckpt.decoder_key("speakervc"), system.decoder)]:
        ckpt.save_component(tmp_path, name, obj)
    return system, tmp_path


def test_round_trip_each_component(saved):
    system, d = saved
    np.testing.assert_array_equal(ckpt.load_component(d, "codebook").centroids, system.codebook.centroids)
    proj = ckpt.load_component(d, "projection")
    np.testing.assert_array_equal(proj.weight, system.projection.weight)
    np.testing.assert_array_equal(proj.bias, system.projection.bias)
    for name, obj in [("speaker", system.spk_encoder),
                      ("adaptor", system.adaptor), ("decoder:speakervc", system.decoder)]:
        assert state_hash(ckpt.load_component(d, name)) == state_hash(obj), name
    dec = ckpt.load_component(d, "decoder:speakervc")
    assert dec.stages_done == system.decoder.stages_done
    assert dec.history == system.decoder.history


def test_load_system(saved):
    system, d = saved
    loaded = ckpt.load_system(d)
    assert state_hash(loaded.decoder) == state_hash(system.decoder)
    with pytest.raises(ckpt.MissingComponentError, match="decoder:fastspeech"):
        ckpt.load_system(d, "fastspeech")


def test_manifest_records_hashes(saved):
    _, d = saved
    hashes = ckpt.component_hashes(d)
    assert set(hashes) == {"codebook", "projection", "speaker", "adaptor", "decoder:speakervc"}
    assert all(len(h) == 64 for h in hashes.values())
    assert ckpt.has_component(d, "speaker") and not ckpt.has_component(d, "decoder:speakervc-nospk")


def test_resave_is_byte_stable(saved):
    system, d = saved
    before = ckpt.component_hashes(d)["decoder:speakervc"]
    assert ckpt.save_component(d, "decoder:speakervc", copy.deepcopy(system.decoder)) == before


def test_missing_and_tampered(saved, tmp_path_factory):
    _, d = saved
    with pytest.raises(ckpt.MissingComponentError):
        ckpt.load_component(tmp_path_factory.mktemp("empty"), "codebook")
    path = d / json.loads((d / "manifest.json").read_text())["components"]["speaker"]["file"]
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.load_component(d, "speaker")
    path.unlink()
    with pytest.raises(ckpt.MissingComponentError):
        ckpt.load_component(d, "speaker")


def test_decoder_keys():
    assert ckpt.decoder_key("fastspeech") == "decoder:fastspeech"
    assert ckpt.decoder_key("speakervc", use_spk=False) == "decoder:speakervc-nospk"
