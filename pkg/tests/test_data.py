import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairlatent.data import (
    ConfigError,
    EmbeddingDataset,
    FormatError,
    SynthConfig,
    batches,
    from_bytes,
    generate_synthetic,
    load_dataset,
    read_csv,
    save_dataset,
    to_bytes,
)


@pytest.mark.parametrize("rho,target,tol", [(0.0, 0.0, 0.05), (0.8, 0.8, 0.03)])
def test_empirical_correlation(rho, target, tol):
    ds = generate_synthetic(SynthConfig(n=10000, rho=rho))
    r = np.corrcoef(ds.y.astype(float), ds.s[:, 0].astype(float))[0, 1]
    assert abs(r - target) < tol


def test_same_seed_identical():
    a = generate_synthetic(SynthConfig(n=500))
    b = generate_synthetic(SynthConfig(n=500))
    assert to_bytes(a) == to_bytes(b)


def test_different_seed_shares_mixing_map():
    a = generate_synthetic(SynthConfig(n=50, seed=1))
    b = generate_synthetic(SynthConfig(n=50, seed=2))
    assert not np.array_equal(a.e, b.e)


@pytest.mark.parametrize("bad", [dict(rho=1.5), dict(sigma=0.0), dict(d=3), dict(val_frac=0.5, test_frac=0.5)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(**bad))


def test_split_fractions():
    ds = generate_synthetic(SynthConfig(n=20000))
    fr = np.bincount(ds.split, minlength=3) / ds.n
    np.testing.assert_allclose(fr, [0.7, 0.1, 0.2], atol=0.01)


def test_file_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(n=300, attr_count=2))
    path = tmp_path / "d.fle"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back == ds
    assert path.read_bytes() == to_bytes(back)


def test_header_layout():
    ds = generate_synthetic(SynthConfig(n=10, attr_count=2))
    buf = to_bytes(ds)
    magic, version, n, d, a = struct.unpack_from("<4sIQII", buf)
    assert (magic, version, n, d, a) == (b"FLE1", 1, 10, 16, 2)
    assert len(buf) == 24 + 4 * 10 * 16 + 10 + 2 * 10 + 10
    # first embedding value, little-endian float32
    assert struct.unpack_from("<f", buf, 24)[0] == ds.e[0, 0]


def test_truncated_file_reports_offset():
    buf = to_bytes(generate_synthetic(SynthConfig(n=20)))
    with pytest.raises(FormatError) as exc:
        from_bytes(buf[:-5])
    assert exc.value.offset == len(buf) - 5
    with pytest.raises(FormatError):
        from_bytes(buf[:10])


def test_bad_magic_and_version():
    buf = bytearray(to_bytes(generate_synthetic(SynthConfig(n=4))))
    bad = bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="magic"):
        from_bytes(bad)
    buf[4] = 9
    with pytest.raises(FormatError, match="version") as exc:
        from_bytes(bytes(buf))
    assert exc.value.offset == 4


def test_trailing_bytes_rejected():
    buf = to_bytes(generate_synthetic(SynthConfig(n=4)))
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(buf + b"\0")


def test_csv_import(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("e0,e1,e2,e3,y,s\n0.1,0.2,0.3,0.4,1,0\n1,2,3,4,0,1\n-1,-2,-3,-4,1,1\n")
    ds = read_csv(path)
    assert (ds.n, ds.d) == (3, 4)
    np.testing.assert_array_equal(ds.y, [1, 0, 1])
    np.testing.assert_array_equal(ds.s[:, 0], [0, 1, 1])
    assert (ds.split == 0).all()


def test_csv_split_column(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("e0,e1,y,s0,s1,split\n0,1,1,0,1,test\n2,3,0,1,1,val\n")
    ds = read_csv(path)
    assert ds.attr_count == 2
    np.testing.assert_array_equal(ds.split, [2, 1])


def test_batches_even():
    out = batches(64, 32, seed=0, epoch=0)
    assert [b.size for b in out] == [32, 32]
    assert sorted(np.concatenate(out).tolist()) == list(range(64))


def test_batches_drop_singleton():
    out = batches(33, 32, seed=0, epoch=0)
    assert [b.size for b in out] == [32]


def test_batches_deterministic_and_epoch_dependent():
    a = batches(100, 10, seed=3, epoch=1)
    b = batches(100, 10, seed=3, epoch=1)
    c = batches(100, 10, seed=3, epoch=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 200), st.integers(2, 64), st.integers(0, 1000))
def test_batches_partition_property(n, bs, seed):
    out = batches(n, bs, seed, 0)
    flat = np.concatenate(out)
    assert len(set(flat.tolist())) == flat.size
    assert n - flat.size in (0, 1)
    assert all(b.size >= 2 for b in out)


def test_dataset_validation():
    with pytest.raises(ValueError):
        EmbeddingDataset(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 1)), np.zeros(3))


def test_group_index_two_attributes():
    ds = EmbeddingDataset(np.zeros((4, 2)), np.zeros(4), np.array([[0, 0], [1, 0], [0, 1], [1, 1]]), np.zeros(4))
    np.testing.assert_array_equal(ds.group, [0, 1, 2, 3])
