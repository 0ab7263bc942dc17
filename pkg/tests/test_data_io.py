import struct

import numpy as np
import pytest

from dyslim.data_io import (MAGIC, PREAMBLE, TrajectoryDataset, canonical_json, config_hash, fit_normalizer,
                            read_checkpoint, read_container, read_dataset, read_header, write_checkpoint,
                            write_container, write_dataset)
from dyslim.errors import ContractError, FormatError, LengthMismatchError, UnsupportedVersionError


@pytest.fixture
def dataset():
    data = np.random.default_rng(0).normal(size=(3, 5, 2))
    ds = TrajectoryDataset(system="lorenz", dt=0.4, data=data, config={"seed": 1}, config_hash="abcd")
    ds.normalizer = fit_normalizer(ds)
    return ds


def test_dataset_round_trip(tmp_path, dataset):
    path = str(tmp_path / "train.dysl")
    write_dataset(dataset, path)
    back = read_dataset(path)
    np.testing.assert_array_equal(back.data, dataset.data)
    assert back.system == "lorenz" and back.dt == 0.4
    assert back.config == {"seed": 1} and back.config_hash == "abcd"
    np.testing.assert_array_equal(back.normalizer.mean, dataset.normalizer.mean)
    np.testing.assert_array_equal(back.normalizer.std, dataset.normalizer.std)


def test_payload_is_little_endian_trajectory_major(tmp_path, dataset):
    path = str(tmp_path / "train.dysl")
    write_dataset(dataset, path)
    raw = open(path, "rb").read()
    magic, version, header_len = PREAMBLE.unpack(raw[:PREAMBLE.size])
    assert magic == MAGIC and version == 1
    payload = raw[PREAMBLE.size + header_len:]
    assert struct.unpack("<d", payload[:8])[0] == dataset.data[0, 0, 0]
    assert struct.unpack("<d", payload[16:24])[0] == dataset.data[0, 1, 0]


def test_identical_datasets_give_identical_bytes(tmp_path, dataset):
    a, b = tmp_path / "a.dysl", tmp_path / "b.dysl"
    write_dataset(dataset, str(a))
    write_dataset(dataset, str(b))
    assert a.read_bytes() == b.read_bytes()


def test_read_header_only(tmp_path, dataset):
    path = str(tmp_path / "train.dysl")
    write_dataset(dataset, path)
    header = read_header(path)
    assert header["n_trajectories"] == 3 and header["steps_per_trajectory"] == 5
    assert header["payload_count"] == 30


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.dysl"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError, match="magic"):
        read_header(str(path))


def test_short_file(tmp_path):
    path = tmp_path / "short.dysl"
    path.write_bytes(b"DYS")
    with pytest.raises(FormatError):
        read_container(str(path))


def test_unsupported_version(tmp_path):
    path = tmp_path / "v2.dysl"
    header = b"{}"
    path.write_bytes(PREAMBLE.pack(MAGIC, 2, len(header)) + header)
    with pytest.raises(UnsupportedVersionError):
        read_header(str(path))


def test_truncated_payload(tmp_path):
    path = str(tmp_path / "c.dysl")
    write_container(path, {"kind": "blob"}, np.arange(4.0))
    with open(path, "r+b") as f:
        f.truncate(len(open(path, "rb").read()) - 8)
    with pytest.raises(LengthMismatchError):
        read_container(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "h.dysl"
    path.write_bytes(PREAMBLE.pack(MAGIC, 1, 100) + b'{"payload_count": 0}')
    with pytest.raises(LengthMismatchError):
        read_header(str(path))


def test_header_shape_must_match_payload(tmp_path):
    path = str(tmp_path / "d.dysl")
    header = {"kind": "dataset", "system": "lorenz", "dt": 0.4, "n_trajectories": 2,
              "steps_per_trajectory": 3, "state_dim": 3}
    write_container(path, header, np.zeros(17))
    with pytest.raises(LengthMismatchError):
        read_dataset(path)


def test_kind_is_checked(tmp_path, dataset):
    path = str(tmp_path / "train.dysl")
    write_dataset(dataset, path)
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_manifest(tmp_path):
    path = str(tmp_path / "ckpt.dysl")
    arrays = [("w", np.arange(6.0).reshape(2, 3)), ("b", np.array([1.5])), ("m.w", np.ones((1, 2)))]
    write_checkpoint(path, {"step": 7}, arrays)
    header, back = read_checkpoint(path)
    assert header["step"] == 7
    assert [e["offset"] for e in header["manifest"]] == [0, 48, 56]
    for name, arr in arrays:
        np.testing.assert_array_equal(back[name], arr)


def test_dataset_rejects_bad_shapes():
    with pytest.raises(ContractError):
        TrajectoryDataset(system="lorenz", dt=0.4, data=np.zeros((3, 2)))
    with pytest.raises(ContractError):
        TrajectoryDataset(system="lorenz", dt=0.0, data=np.zeros((1, 2, 3)))


def test_normalizer_statistics(dataset):
    norm = dataset.normalizer
    flat = dataset.data.reshape(-1, 2)
    np.testing.assert_allclose(norm.mean, flat.mean(axis=0))
    np.testing.assert_allclose(norm.std, flat.std(axis=0))
    np.testing.assert_allclose(norm.invert(norm.apply(flat)), flat, rtol=1e-14, atol=1e-14)


def test_normalizer_floors_constant_dimensions():
    data = np.zeros((2, 3, 2))
    data[..., 0] = 5.0
    data[..., 1] = np.arange(3.0)
    norm = fit_normalizer(TrajectoryDataset(system="ks", dt=1.0, data=data))
    assert norm.std[0] == 1e-8


def test_canonical_json_and_hash():
    a = {"b": 1, "a": [1.0, 2.5], "c": {"y": None, "x": True}}
    b = {"c": {"x": True, "y": None}, "a": [1.0, 2.5], "b": 1}
    assert canonical_json(a) == canonical_json(b) == '{"a":[1.0,2.5],"b":1,"c":{"x":true,"y":null}}'
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 16
    assert config_hash(a) != config_hash(dict(a, b=2))
