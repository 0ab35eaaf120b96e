import struct

import pytest
import torch

from stochuda import checkpoint as ck


def tensors():
    g = torch.Generator().manual_seed(0)
    return {"w": torch.randn(3, 4, generator=g), "b": torch.arange(5, dtype=torch.int64),
            "h": torch.randn(2, generator=g).double(), "flag": torch.tensor([True, False])}


def test_round_trip_is_bit_identical(tmp_path):
    p = tmp_path / "a.ckpt"
    digest = ck.save_checkpoint(p, tensors(), {"kind": "x", "n": [1, 2]})
    back, meta = ck.load_checkpoint(p)
    assert meta == {"kind": "x", "n": [1, 2]}
    for k, v in tensors().items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)
    assert len(digest) == 64 and ck.file_digest(p) == ck.file_digest(p)


def test_save_is_deterministic(tmp_path):
    ck.save_checkpoint(tmp_path / "a", tensors(), {"m": 1})
    ck.save_checkpoint(tmp_path / "b", tensors(), {"m": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_truncated_file(tmp_path):
    p = tmp_path / "a.ckpt"
    ck.save_checkpoint(p, tensors())
    data = p.read_bytes()
    for cut in (10, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(ck.CheckpointCorruptError):
            ck.load_checkpoint(p)


def test_flipped_byte_and_bad_magic(tmp_path):
    p = tmp_path / "a.ckpt"
    ck.save_checkpoint(p, tensors())
    data = bytearray(p.read_bytes())
    data[-3] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ck.CheckpointCorruptError):
        ck.load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(ck.CheckpointCorruptError):
        ck.load_checkpoint(p)


def test_future_version(tmp_path):
    p = tmp_path / "a.ckpt"
    ck.save_checkpoint(p, tensors())
    data = bytearray(p.read_bytes())
    struct.pack_into("<I", data, 8, ck.FORMAT_VERSION + 1)
    p.write_bytes(bytes(data))
    with pytest.raises(ck.CheckpointVersionError):
        ck.load_checkpoint(p)


def test_module_helpers(tmp_path):
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    ck.save_module(tmp_path / "m", a, {"role": "x"})
    meta = ck.load_into(b, tmp_path / "m")
    assert meta["role"] == "x" and torch.equal(a.weight, b.weight)
    assert not (tmp_path / "m.tmp").exists()
