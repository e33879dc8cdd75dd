import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from easwin.data import (
    HEADER_SIZE,
    BadMagicError,
    ChecksumError,
    EmbeddingFileError,
    SyntheticSpec,
    TruncatedFileError,
    UnsupportedVersionError,
    decode,
    encode,
    file_size,
    frame_indices,
    generate,
    load_dataset,
    preset,
    read_file,
    subsample_frames,
    write_dataset,
    write_file,
)
from easwin.model import ConfigError, EmbeddingBatch

SMALL = dict(n_train=6, n_val=4, n_test=2, frames=8, tokens=4, d_in=8, artifact_dims=2)


# -- file format ------------------------------------------------------------

def test_header_is_23_bytes():
    assert HEADER_SIZE == 23


def test_single_video_file_size():
    blob = encode(np.zeros((1, 2, 1, 3), np.float32), [1])
    assert len(blob) == file_size(1, 2, 1, 3) == 23 + 1 + 24 + 4


def test_empty_file_round_trips():
    ef = decode(encode(np.zeros((0, 3, 2, 4), np.float32), np.zeros(0)))
    assert ef.z.shape == (0, 3, 2, 4) and ef.labels.size == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_files_round_trip_bit_exactly(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
    z = rng.standard_normal(shape).astype(np.float32)
    labels = rng.integers(0, 2, shape[0])
    ef = decode(encode(z, labels))
    assert ef.z.tobytes() == z.tobytes()
    np.testing.assert_array_equal(ef.labels, labels)


def test_file_round_trip_on_disk(tmp_path):
    z = np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)
    n = write_file(tmp_path / "a.eaemb", z, [0, 1])
    assert n == (tmp_path / "a.eaemb").stat().st_size
    np.testing.assert_array_equal(read_file(tmp_path / "a.eaemb").z, z)


def _blob():
    return bytearray(encode(np.ones((2, 2, 2, 2), np.float32), [0, 1]))


def test_bad_magic():
    b = _blob()
    b[0:5] = b"XXXXX"
    with pytest.raises(BadMagicError):
        decode(bytes(b))


def test_bad_version():
    b = _blob()
    b[5] = 9
    with pytest.raises(UnsupportedVersionError):
        decode(bytes(b))


def test_flipped_payload_byte_fails_crc_and_names_offset():
    b = _blob()
    b[HEADER_SIZE + 5] ^= 0xFF
    with pytest.raises(ChecksumError, match="offset"):
        decode(bytes(b))


def test_truncation():
    b = bytes(_blob())
    with pytest.raises(TruncatedFileError):
        decode(b[:-3])
    with pytest.raises(TruncatedFileError):
        decode(b[:10])


def test_trailing_bytes_rejected():
    with pytest.raises(EmbeddingFileError):
        decode(bytes(_blob()) + b"\0")


def test_error_classes_are_distinct():
    kinds = {BadMagicError, UnsupportedVersionError, ChecksumError, TruncatedFileError}
    assert len(kinds) == 4
    for k in kinds:
        assert issubclass(k, EmbeddingFileError)
        assert not any(issubclass(k, o) for o in kinds - {k})


# -- synthetic generator ----------------------------------------------------

def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(period=32).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(rho_r=0.0).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(sigma_f=0.0).validate()
    with pytest.raises(ConfigError):
        preset("nope")


def test_identical_class_parameters_warn(caplog):
    preset("null", **SMALL).validate()
    assert "unlearnable" in caplog.text


def test_generation_is_deterministic_and_balanced():
    spec = SyntheticSpec(**SMALL)
    a, b = generate(spec), generate(spec)
    for split, n in (("train", 6), ("val", 4), ("test", 2)):
        assert a[split].z.tobytes() == b[split].z.tobytes()
        assert a[split].z.shape == (2 * n, 8, 4, 8)
        assert np.bincount(a[split].labels).tolist() == [n, n]


def test_different_seed_changes_data():
    a = generate(SyntheticSpec(**SMALL, seed=0))["train"].z
    b = generate(SyntheticSpec(**SMALL, seed=1))["train"].z
    assert not np.array_equal(a, b)


def test_splits_are_disjoint():
    ds = generate(SyntheticSpec(**SMALL))
    hashes = {s: {v.tobytes() for v in ds[s].z} for s in ("train", "val", "test")}
    assert not hashes["train"] & hashes["val"]
    assert not hashes["train"] & hashes["test"]
    assert not hashes["val"] & hashes["test"]


def test_artifact_adds_no_per_video_mean_shortcut():
    # period divides frames, so the periodic term averages out over each video
    spec = SyntheticSpec(**SMALL, period=4, alpha=5.0)
    ds = generate(spec)
    z, y = ds["train"].z, ds["train"].labels
    means = z.mean(axis=(1, 2))
    gap = np.abs(means[y == 1].mean(axis=0) - means[y == 0].mean(axis=0)).max()
    assert gap < 1.0


def test_manifest_and_reload(tmp_path):
    ds = generate(SyntheticSpec(**SMALL))
    manifest = write_dataset(ds, tmp_path)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    entry = on_disk["splits"][0]
    for key in ("split", "path", "n", "T", "S", "D_in", "class_counts", "spec_hash"):
        assert key in entry
    assert entry["crc32"] == zlib.crc32((tmp_path / entry["path"]).read_bytes())
    back = load_dataset(tmp_path)
    for split in ("train", "val", "test"):
        assert back[split].z.tobytes() == ds[split].z.tobytes()
        assert back[split].generators == ds[split].generators


# -- frame subsampling ------------------------------------------------------

def test_frame_indices_examples():
    assert frame_indices(16, 4).tolist() == [0, 5, 10, 15]
    assert frame_indices(16, 2).tolist() == [0, 15]
    assert frame_indices(16, 16).tolist() == list(range(16))
    assert frame_indices(16, 8).tolist() == [0, 2, 4, 6, 9, 11, 13, 15]


def test_subsample_identity_and_errors():
    b = EmbeddingBatch(z=np.random.default_rng(0).standard_normal((2, 16, 1, 2)))
    np.testing.assert_array_equal(subsample_frames(b, 16).z, b.z)
    with pytest.raises(ConfigError):
        subsample_frames(b, 17)


def test_subsample_updates_validity():
    b = EmbeddingBatch(z=np.zeros((2, 16, 1, 1)), valid_t=np.array([16, 6]))
    out = subsample_frames(b, 4)
    assert out.valid_t.tolist() == [4, 2]
