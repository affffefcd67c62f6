import gzip
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtae import datahub as dh
from vtae.diffcore import ContractViolation, FormatError, load_tensor


def idx_file(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload))
    return path


class TestIdx:
    def test_hand_crafted_two_images(self, tmp_path):
        pix = [0, 51, 102, 255, 7, 8, 9, 10]
        img = idx_file(tmp_path / "i", 0x00000803, (2, 2, 2), pix)
        lab = idx_file(tmp_path / "l", 0x00000801, (2,), [3, 9])
        ds = dh.load_idx(img, lab)
        assert ds.images.shape == (2, 1, 2, 2)
        assert ds.images.ravel().tolist() == [p / 255 for p in pix]
        assert ds.labels.tolist() == [3, 9]

    def test_label_magic_rejected_for_images(self, tmp_path):
        bad = idx_file(tmp_path / "i", 0x00000801, (2,), [1, 2])
        with pytest.raises(FormatError, match="00 00 08 01"):
            dh.load_idx(bad)

    def test_truncated(self, tmp_path):
        p = tmp_path / "i"
        p.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5))
        with pytest.raises(FormatError, match="expected 24 bytes, got 21"):
            dh.load_idx(p)

    def test_count_mismatch(self, tmp_path):
        img = idx_file(tmp_path / "i", 0x803, (2, 1, 1), [0, 1])
        lab = idx_file(tmp_path / "l", 0x801, (3,), [0, 1, 2])
        with pytest.raises(FormatError, match="2 images.*3 labels"):
            dh.load_idx(img, lab)

    def test_gzip(self, tmp_path):
        raw = struct.pack(">IIII", 0x803, 1, 1, 2) + bytes([0, 255])
        (tmp_path / "i.gz").write_bytes(gzip.compress(raw))
        assert dh.load_idx(tmp_path / "i.gz").images.ravel().tolist() == [0.0, 1.0]

    def test_transpose_flag(self, tmp_path):
        img = idx_file(tmp_path / "i", 0x803, (1, 2, 2), [1, 2, 3, 4])
        plain = dh.load_idx(img).images[0, 0]
        flipped = dh.load_idx(img, transpose=True).images[0, 0]
        assert np.array_equal(flipped, plain.T)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.randoms(use_true_random=False))
    def test_byte_exact_roundtrip(self, n, h, w, rnd):
        import tempfile
        from pathlib import Path

        pix = bytes(rnd.randrange(256) for _ in range(n * h * w))
        labels = bytes(rnd.randrange(10) for _ in range(n))
        with tempfile.TemporaryDirectory() as d:
            d = Path(d)
            src_i = idx_file(d / "i", 0x803, (n, h, w), pix)
            src_l = idx_file(d / "l", 0x801, (n,), labels)
            ds = dh.load_idx(src_i, src_l)
            dh.write_idx(ds, d / "i2", d / "l2")
            assert (d / "i2").read_bytes() == src_i.read_bytes()
            assert (d / "l2").read_bytes() == src_l.read_bytes()

    def test_missing_dir_file(self, tmp_path):
        with pytest.raises(FormatError, match="missing"):
            dh.load_idx_dir(tmp_path)


class TestDataset:
    def test_pixel_range(self):
        with pytest.raises(ContractViolation):
            dh.Dataset(np.full((1, 1, 2, 2), 2.0))

    def test_label_alignment(self):
        with pytest.raises(ContractViolation):
            dh.Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3))

    def test_holdout(self):
        ds = dh.Dataset(np.zeros((5, 1, 2, 2)), np.array([0, 2, 1, 2, 3]))
        keep, out = dh.split_holdout(ds, 2)
        assert keep.labels.tolist() == [0, 1, 3] and out.labels.tolist() == [2, 2]
        assert out.split == "outlier"


class TestDonut:
    def test_radii(self):
        ds = dh.make_donut(2000, 0.8, 1.2, seed=1)
        r = np.linalg.norm(ds.images, axis=1)
        assert r.min() >= 0.8 and r.max() <= 1.2
        assert not np.any(r < 0.75)

    def test_empty(self):
        assert len(dh.make_donut(0)) == 0

    def test_bad_radii(self):
        with pytest.raises(ContractViolation):
            dh.make_donut(10, 1.0, 0.5)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 2 ** 31))
    def test_pure_function_of_seed(self, n, seed):
        assert dh.make_donut(n, seed=seed).images.tobytes() == dh.make_donut(n, seed=seed).images.tobytes()


class TestGlyphs:
    def test_bank(self):
        assert dh.GLYPHS.shape == (4, 28, 28)
        assert set(np.unique(dh.GLYPHS)) == {0.0, 1.0}

    def test_zero_range_is_base_glyphs(self):
        zero = {"angle": 0.0, "shear": 0.0, "scale": (1.0, 1.0), "shift": 0.0}
        ds, truth = dh.make_glyphs(12, zero, seed=3)
        for img, gid in zip(ds.images, truth["appearance"]):
            assert np.array_equal(img[0], dh.GLYPHS[gid])

    def test_reproducible(self):
        a, ta = dh.make_glyphs(10, seed=4)
        b, tb = dh.make_glyphs(10, seed=4)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(ta["params"], tb["params"])

    def test_unsafe_ranges(self):
        with pytest.raises(ContractViolation):
            dh.make_glyphs(2, {"scale": (-1.0, 1.0)})

    def test_export(self, tmp_path):
        ds, _ = dh.make_glyphs(3, seed=5)
        path, side = dh.export_dataset(ds, tmp_path / "g.glt")
        assert np.array_equal(load_tensor(path), ds.images)
        meta = json.loads(side.read_text())
        assert meta["provenance"]["seed"] == 5 and meta["labels"] == ds.labels.tolist()


def test_sample_mnist(tmp_path):
    pytest.importorskip("mlxtend")
    dh.write_sample_mnist(tmp_path)
    tr = dh.load_idx_dir(tmp_path, "train")
    te = dh.load_idx_dir(tmp_path, "test")
    assert len(tr) == 4000 and len(te) == 1000
    assert set(np.unique(te.labels)) == set(range(10))
    assert tr.images.shape[1:] == (1, 28, 28)
