import json
import struct

import numpy as np
import pytest

from popsteer import artifacts
from popsteer.errors import ArtifactError


def test_table_round_trip_and_header(tmp_path):
    p = artifacts.write_table(tmp_path / "t.tsv", "thing", ["a", "b"], [[1, 0.1], ["x", 2.5]], stage="h1",
                              extra_comments=["note=1"])
    lines = p.read_text().splitlines()
    assert lines[:3] == ["# popsteer thing v1 stage=h1", "# note=1", "a\tb"]
    cols, rows = artifacts.read_table(p, "thing", stage="h1")
    assert cols == ["a", "b"] and rows == [["1", "0.1"], ["x", "2.5"]]


def test_floats_round_trip_exactly(tmp_path):
    x = [1 / 3, 1e-300, -2.5e17]
    p = artifacts.write_table(tmp_path / "f.tsv", "f", ["v"], [[v] for v in x])
    assert [float(r[0]) for r in artifacts.read_table(p, "f")[1]] == x


@pytest.mark.parametrize("content, kind, match", [
    ("a\tb\n", "thing", "no version header"),
    ("# popsteer other v1 stage=-\na\n", "thing", "expected artifact kind"),
    ("# popsteer thing v9 stage=-\na\n", "thing", "unsupported artifact version"),
])
def test_table_header_validation(tmp_path, content, kind, match):
    (tmp_path / "t.tsv").write_text(content)
    with pytest.raises(ArtifactError, match=match):
        artifacts.read_table(tmp_path / "t.tsv", kind)


def test_stale_and_missing_tables(tmp_path):
    artifacts.write_table(tmp_path / "t.tsv", "thing", ["a"], [], stage="old")
    with pytest.raises(ArtifactError, match="stale"):
        artifacts.read_table(tmp_path / "t.tsv", "thing", stage="new")
    with pytest.raises(ArtifactError, match="missing"):
        artifacts.read_table(tmp_path / "none.tsv", "thing")


def test_container_byte_layout(tmp_path):
    a = np.arange(6, dtype=float).reshape(2, 3)
    b = np.array([-1.5])
    p = artifacts.write_container(tmp_path / "m.bin", b"TEST", {"z": 1, "a": "x"}, {"a": a, "b": b})
    raw = p.read_bytes()
    assert raw[:4] == b"TEST"
    version, hlen = struct.unpack("<II", raw[4:12])
    header_bytes = raw[12 : 12 + hlen]
    header = json.loads(header_bytes)
    assert version == 1 and header["arrays"] == [["a", [2, 3]], ["b", [1]]]
    assert header_bytes == json.dumps(header, sort_keys=True).encode()
    body = raw[12 + hlen :]
    assert body == a.astype("<f8").tobytes(order="C") + b.astype("<f8").tobytes()
    hdr, arrays = artifacts.read_container(p, b"TEST")
    assert hdr["z"] == 1 and np.array_equal(arrays["a"], a) and np.array_equal(arrays["b"], b)


def test_container_rejects_corruption(tmp_path):
    p = artifacts.write_container(tmp_path / "m.bin", b"TEST", {}, {"a": np.ones(3)})
    with pytest.raises(ArtifactError, match="bad magic"):
        artifacts.read_container(p, b"XXXX")
    raw = p.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ArtifactError, match="truncated"):
        artifacts.read_container(tmp_path / "short.bin", b"TEST")
    (tmp_path / "v2.bin").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(ArtifactError, match="version"):
        artifacts.read_container(tmp_path / "v2.bin", b"TEST")


def test_stable_hash_ignores_key_order():
    assert artifacts.stable_hash({"a": 1, "b": [1, 2]}) == artifacts.stable_hash({"b": [1, 2], "a": 1})
    assert artifacts.stable_hash({"a": 1}) != artifacts.stable_hash({"a": 2})
