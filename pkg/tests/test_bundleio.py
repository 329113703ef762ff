import math
import struct

import numpy as np
import pytest

from symprune.bundleio import (GAUSSIAN, MLP, BundleFormatError, BundleMeta, TensorBundle,
                               bundle_bytes, fd_check, gen_gaussian, gen_mlp, mlp_bundle,
                               read_bundle, toy_mlp, write_bundle)

from conftest import make_layer


def assert_same_bundle(a, b):
    assert a.meta == b.meta
    assert [layer.name for layer in a] == [layer.name for layer in b]
    for la, lb in zip(a, b):
        for name in ("W", "G", "Xcal", "xnorm"):
            x, y = getattr(la, name), getattr(lb, name)
            assert x.dtype == y.dtype == np.float32
            assert x.tobytes() == y.tobytes()


class TestFormat:
    def test_round_trip_gaussian(self, tmp_path):
        b = gen_gaussian(5, n_layers=3, rows=4, cols=6, n_samples=9)
        write_bundle(b, tmp_path / "b.pzb")
        assert_same_bundle(read_bundle(tmp_path / "b.pzb"), b)

    def test_round_trip_mlp(self, tmp_path):
        b = gen_mlp(2, d=8, h=4, o=3, n_samples=16)
        write_bundle(b, tmp_path / "b.pzb")
        back = read_bundle(tmp_path / "b.pzb")
        assert_same_bundle(back, b)
        assert back.meta.kind == MLP
        assert (tmp_path / "b.pzb").read_bytes() == bundle_bytes(back)

    def test_header_layout(self):
        b = TensorBundle([make_layer([[1.0, 2.0]], [[3.0, 4.0]], [[5.0, 6.0]], name="é")],
                         BundleMeta(7, GAUSSIAN, 11))
        want = (b"PZB1" + struct.pack("<IQBQI", 1, 7, 0, 11, 1)
                + struct.pack("<H", 2) + "é".encode() + struct.pack("<III", 1, 2, 1)
                + struct.pack("<6f", 1, 2, 3, 4, 5, 6))
        assert bundle_bytes(b) == want

    def test_empty_layer_list(self, tmp_path):
        write_bundle(TensorBundle(), tmp_path / "e.pzb")
        back = read_bundle(tmp_path / "e.pzb")
        assert len(back) == 0
        assert (tmp_path / "e.pzb").stat().st_size == 4 + 4 + 8 + 1 + 8 + 4

    def test_xnorm_rederived(self, tmp_path):
        b = gen_gaussian(1, n_layers=1, rows=2, cols=5, n_samples=30)
        write_bundle(b, tmp_path / "b.pzb")
        layer = read_bundle(tmp_path / "b.pzb").layers[0]
        manual = [math.sqrt(sum(float(layer.Xcal[s, j]) ** 2 for s in range(30))) for j in range(5)]
        np.testing.assert_array_equal(layer.xnorm, np.float32(manual))

    @pytest.mark.parametrize("mutate, msg", [
        (lambda d: b"PZB2" + d[4:], "PZB1"),
        (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
        (lambda d: d[:-3], "truncated"),
        (lambda d: d[:30], "truncated"),
        (lambda d: d + b"\x00\x00", "trailing"),
    ])
    def test_corruption(self, tmp_path, mutate, msg):
        path = tmp_path / "b.pzb"
        write_bundle(gen_gaussian(0, n_layers=1, rows=2, cols=3, n_samples=2), path)
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(BundleFormatError, match=msg):
            read_bundle(path)

    def test_dimension_overflow(self, tmp_path):
        data = (b"PZB1" + struct.pack("<IQBQI", 1, 0, 0, 0, 1) + struct.pack("<H", 1) + b"a"
                + struct.pack("<III", 1 << 16, 1 << 16, 1))
        (tmp_path / "o.pzb").write_bytes(data)
        with pytest.raises(BundleFormatError, match="overflow"):
            read_bundle(tmp_path / "o.pzb")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_bundle(tmp_path / "nope.pzb")

    def test_non_finite_refused(self):
        layer = make_layer([[np.nan, 1.0]])
        with pytest.raises(ValueError, match="non-finite"):
            bundle_bytes(TensorBundle([layer]))

    def test_duplicate_names_refused(self):
        with pytest.raises(ValueError, match="unique"):
            TensorBundle([make_layer([[1.0]], name="a"), make_layer([[2.0]], name="a")])


class TestGaussian:
    def test_deterministic(self):
        assert bundle_bytes(gen_gaussian(42)) == bundle_bytes(gen_gaussian(42))
        assert bundle_bytes(gen_gaussian(42)) != bundle_bytes(gen_gaussian(43))

    def test_default_shapes(self):
        b = gen_gaussian(0)
        assert len(b) == 2
        assert b.layers[0].W.shape == (16, 32) and b.layers[0].Xcal.shape == (128, 32)
        assert b.meta == BundleMeta(0, GAUSSIAN, 0)

    def test_anisotropy_scales_columns(self):
        b = gen_gaussian(0, n_layers=1, rows=2, cols=4, n_samples=512, anisotropy=[10, 1, 1, 1])
        xn = b.layers[0].xnorm
        for j in (1, 2, 3):
            assert 7 <= xn[0] / xn[j] <= 13

    def test_anisotropy_tiles(self):
        b = gen_gaussian(0, n_layers=1, rows=1, cols=8, n_samples=2000, anisotropy=[4, 1])
        xn = b.layers[0].xnorm
        assert (xn[::2] > 2.5 * xn[1::2]).all()

    def test_anisotropy_must_tile(self):
        with pytest.raises(ValueError):
            gen_gaussian(0, cols=6, anisotropy=[1, 2, 3, 4])

    def test_minimal(self, tmp_path):
        b = gen_gaussian(0, n_layers=1, rows=1, cols=4, n_samples=1)
        write_bundle(b, tmp_path / "m.pzb")
        assert_same_bundle(read_bundle(tmp_path / "m.pzb"), b)

    def test_zero_dims_rejected(self):
        with pytest.raises(ValueError):
            gen_gaussian(0, rows=0)

    def test_moments(self):
        W = gen_gaussian(3, n_layers=1, rows=200, cols=200, n_samples=1).layers[0].W
        assert abs(W.mean()) < 0.02
        assert abs(W.std() - 1) < 0.02


class TestMLP:
    def test_layer_structure(self):
        mlp = toy_mlp(1, d=8, h=5, o=3, n_samples=20)
        b = mlp_bundle(mlp)
        fc1, fc2 = b.layers
        assert (fc1.name, fc2.name) == ("fc1", "fc2")
        assert fc1.W.shape == (5, 8) and fc2.W.shape == (3, 5)
        np.testing.assert_allclose(fc2.Xcal, np.tanh(mlp.X @ mlp.W1.T), rtol=1e-6, atol=1e-7)

    def test_layer_two_gradient_formula(self):
        mlp = toy_mlp(4, d=6, h=5, o=3, n_samples=10)
        H = np.tanh(mlp.X @ mlp.W1.T)
        pred = H @ mlp.W2.T
        np.testing.assert_allclose(mlp.grads()[1], (2 / 10) * (pred - mlp.Y).T @ H, rtol=1e-12)

    def test_zero_targets_and_weights(self):
        mlp = toy_mlp(0, d=4, h=3, o=2, n_samples=6)
        mlp.W1[:] = 0
        mlp.W2[:] = 0
        mlp.Y[:] = 0
        g1, g2 = mlp.grads()
        assert not g1.any() and not g2.any()
        assert mlp.loss() == 0.0

    def test_deterministic(self):
        assert bundle_bytes(gen_mlp(9)) == bundle_bytes(gen_mlp(9))

    def test_default_dims(self):
        fc1, fc2 = gen_mlp(0).layers
        assert fc1.W.shape == (16, 64) and fc2.W.shape == (8, 16)
        assert fc1.Xcal.shape[0] == 128

    def test_fd_small(self):
        assert fd_check(toy_mlp(3, 8, 6, 4, 64), 1e-3) < 1e-4

    def test_fd_plain_central_difference(self):
        assert fd_check(toy_mlp(3, 8, 6, 4, 64), 1e-3, order=2) < 1e-3

    def test_fd_can_fail(self):
        assert fd_check(toy_mlp(3, 8, 6, 4, 64), 1.0) > 1e-2

    def test_fd_linear_network_is_near_exact(self):
        assert fd_check(toy_mlp(3, 8, 6, 4, 64, activation="identity"), 1e-3) < 1e-7

    def test_fd_subsample(self):
        mlp = toy_mlp(1)
        assert fd_check(mlp, 1e-3, max_weights=200, seed=1) < 1e-4

    def test_fd_rejects_bad_step(self):
        with pytest.raises(ValueError):
            fd_check(toy_mlp(0, 4, 3, 2, 8), 0.0)

    def test_gradient_matches_float64_numerics(self):
        # the stored f32 gradient must equal the analytic one up to f32 rounding
        mlp = toy_mlp(5, d=10, h=4, o=2, n_samples=12)
        b = mlp_bundle(mlp)
        g1, g2 = mlp.grads()
        np.testing.assert_allclose(b.layers[0].G, g1, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(b.layers[1].G, g2, rtol=1e-6, atol=1e-9)
