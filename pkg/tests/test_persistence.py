import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mcld.persistence import (
    FORMAT_VERSION,
    MAGIC,
    ArchiveError,
    BadMagicError,
    RunConfig,
    TruncatedArchiveError,
    VersionMismatchError,
    decode_archive,
    encode_archive,
    load_config,
    read_archive,
    read_ppm,
    write_archive,
    write_ppm,
)

DTYPES = (np.float32, np.float64, np.uint8)


def independent_size(tensors, meta):
    # header: magic + version u32 + meta_len u64 + meta + count u32
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    total = len(MAGIC) + 4 + 8 + len(meta_bytes) + 4
    for name, arr in tensors.items():
        total += 4 + len(name.encode()) + 4 + 8 * arr.ndim + 1 + arr.size * arr.itemsize
    return total


def test_empty_archive(tmp_path):
    p = tmp_path / "empty.mcld"
    write_archive(p, {}, {})
    tensors, meta = read_archive(p)
    assert tensors == {} and meta == {}
    assert p.stat().st_size == independent_size({}, {})


def test_round_trip_random(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {
        "w": rng.standard_normal((4, 5)).astype(np.float32),
        "d": rng.standard_normal((2, 3, 4)),
        "mask": rng.integers(0, 2, (7,)).astype(np.uint8),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3), np.float32),
    }
    meta = {"a": [1, 2], "b": "x"}
    p = tmp_path / "t.mcld"
    write_archive(p, tensors, meta)
    back, m = read_archive(p)
    assert m == meta
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert p.stat().st_size == independent_size(tensors, meta)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(
    st.text(min_size=1, max_size=8),
    st.sampled_from(DTYPES).flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4))),
    max_size=4))
def test_round_trip_property(tensors):
    blob = encode_archive(tensors, {"k": 1})
    assert len(blob) == independent_size(tensors, {"k": 1})
    back, meta = decode_archive(blob)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape


def test_little_endian_header():
    blob = encode_archive({"x": np.array([1.0], np.float32)}, {})
    assert blob[:len(MAGIC)] == MAGIC
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    assert version == FORMAT_VERSION
    assert blob[-4:] == struct.pack("<f", 1.0)


def test_bad_magic():
    blob = bytearray(encode_archive({"x": np.ones(3, np.float32)}))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        decode_archive(bytes(blob))


def test_truncated_payload():
    blob = encode_archive({"x": np.ones(30, np.float32)})
    with pytest.raises(TruncatedArchiveError):
        decode_archive(blob[:-5])


def test_version_mismatch():
    blob = bytearray(encode_archive({}))
    struct.pack_into("<I", blob, len(MAGIC), FORMAT_VERSION + 1)
    with pytest.raises(VersionMismatchError):
        decode_archive(bytes(blob))


def test_errors_are_distinct():
    classes = {BadMagicError, VersionMismatchError, TruncatedArchiveError}
    assert len(classes) == 3 and all(issubclass(c, ArchiveError) for c in classes)
    assert not issubclass(BadMagicError, TruncatedArchiveError)


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        encode_archive({"x": np.ones(2, np.int32)})


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.integers(0, 256, (5, 7, 3)) / 255.0).astype(np.float32)
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.array_equal(back, img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


# ---------------------------------------------------------------- config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == RunConfig()
    assert cfg.cfg_scale == 3.5
    assert (cfg.lambda_s, cfg.lambda_f) == (1.0, 0.5)
    assert cfg.lr == 1e-5
    assert (cfg.T, cfg.beta_start, cfg.beta_end) == (1000, 8.5e-4, 1.2e-2)


def test_unknown_key_named(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("cfg_scale = 2\nbogus_key = 1\n")
    with pytest.raises(KeyError, match="bogus_key"):
        load_config(p)
    with pytest.raises(KeyError, match="other_key"):
        load_config(overrides={"other_key": 1})


def test_override_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("cfg_scale = 2.0\nsteps = 7\n")
    cfg = load_config(p, {"cfg_scale": "5.0"})
    assert cfg.cfg_scale == 5.0  # command line beats file
    assert cfg.steps == 7  # file beats default
    assert cfg.ddim_steps == 50  # default


def test_preset_below_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("preset = tiny\nsteps = 11\n")
    cfg = load_config(p)
    assert cfg.canvas == (32, 32) and cfg.steps == 11


def test_invalid_values():
    with pytest.raises(ValueError):
        load_config(overrides={"ablation": "B9"})
    with pytest.raises(ValueError):
        load_config(overrides={"canvas": "30", "f": 4})
