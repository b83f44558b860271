import numpy as np
import pytest

from fflow.errors import DataError
from fflow.ftns import load_group, load_tensor, save_group, save_tensor
from fflow.rng import Rng
from fflow.tensor import Tensor


def test_roundtrip_bit_exact(tmp_path):
    rng = Rng(5)
    for shape in [(), (3,), (2, 3), (2, 3, 4), (1, 1, 1, 7)]:
        t = Tensor(rng.normal(shape) if shape else np.float32(1.5))
        path = tmp_path / "t.ftns"
        save_tensor(path, t)
        back = load_tensor(path)
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)
        assert back.data.tobytes() == t.data.tobytes()


def test_header_format(tmp_path):
    save_tensor(tmp_path / "x.ftns", Tensor(np.zeros((2, 5), dtype=np.float32)))
    raw = (tmp_path / "x.ftns").read_bytes()
    assert raw.startswith(b"FTNS1\n2 2 5\n")
    assert len(raw) == len(b"FTNS1\n2 2 5\n") + 4 * 10


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "bad.ftns").write_bytes(b"NOPE!\n1 3\n" + b"\0" * 12)
    with pytest.raises(DataError):
        load_tensor(tmp_path / "bad.ftns")


def test_truncated_payload_rejected(tmp_path):
    save_tensor(tmp_path / "x.ftns", Tensor(np.zeros(4, dtype=np.float32)))
    raw = (tmp_path / "x.ftns").read_bytes()
    (tmp_path / "x.ftns").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        load_tensor(tmp_path / "x.ftns")


def test_group_roundtrip(tmp_path):
    rng = Rng(6)
    params = {"b.w": Tensor(rng.normal((3, 4))), "a.bias": Tensor(rng.normal((4,)))}
    save_group(tmp_path / "g", params)
    manifest = (tmp_path / "g" / "manifest.txt").read_text().splitlines()
    assert [line.split()[0] for line in manifest] == ["a.bias", "b.w"]
    back = load_group(tmp_path / "g", requires_grad=True)
    assert set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k].data, params[k].data)
        assert back[k].requires_grad


def test_group_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_group(tmp_path / "nope")
