import numpy as np
import pytest

from e2enet.tensor import ShapeError, elementwise, init_kernel, make_rng, pad_crop_depth, spawn_rngs


class TestInitKernel:
    def test_unit_fan_in(self):
        w = init_kernel(make_rng(3), (1, 1, 1, 1, 1))
        assert w.shape == (1, 1, 1, 1, 1)
        assert -1.0 <= w.item() <= 1.0

    def test_bound(self):
        w = init_kernel(make_rng(7), (2, 4, 1, 3, 3))
        assert w.size == 72
        assert np.all(np.abs(w) <= 1 / 6)

    def test_deterministic(self):
        a = init_kernel(make_rng(11), (3, 2, 1, 3, 3))
        b = init_kernel(make_rng(11), (3, 2, 1, 3, 3))
        assert a.tobytes() == b.tobytes()
        assert a.dtype == np.float32

    def test_zero_extent(self):
        with pytest.raises(ShapeError):
            init_kernel(make_rng(0), (2, 0, 1, 3, 3))

    def test_wrong_rank(self):
        with pytest.raises(ShapeError):
            init_kernel(make_rng(0), (2, 2, 3, 3))

    def test_distribution(self):
        w = init_kernel(make_rng(5), (100, 4, 1, 5, 5)).astype(np.float64)
        b = np.sqrt(1 / 100)
        assert w.size >= 10_000
        assert abs(w.mean()) < 0.01 * b
        assert np.all(np.abs(w) <= b)


def test_spawned_streams_differ_and_repeat():
    a1, b1 = spawn_rngs(9, 2)
    a2, _ = spawn_rngs(9, 2)
    x, y = a1.random(4), b1.random(4)
    assert not np.array_equal(x, y)
    assert np.array_equal(x, a2.random(4))


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(elementwise(np.array([1, 2]), np.array([3, 4]), "add"), [4, 6])

    def test_mul_zero(self, rng):
        x = rng.normal(size=(3, 4))
        assert not elementwise(x, np.zeros_like(x), "mul").any()

    def test_sub_self(self, rng):
        x = rng.normal(size=(5,))
        assert not elementwise(x, x, "sub").any()

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise(np.zeros(2), np.zeros(3), "add")

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise(np.zeros(2), np.zeros(2), "div")


class TestPadCropDepth:
    abc = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)

    def test_identity(self, rng):
        x = rng.normal(size=(2, 4, 3, 3))
        np.testing.assert_array_equal(pad_crop_depth(x, 0), x)

    def test_forward(self):
        assert pad_crop_depth(self.abc, 1).ravel().tolist() == [0.0, 1.0, 2.0]

    def test_backward(self):
        assert pad_crop_depth(self.abc, -1).ravel().tolist() == [2.0, 3.0, 0.0]

    def test_round_trip_interior(self, rng):
        x = rng.normal(size=(2, 5, 2, 2))
        y = pad_crop_depth(pad_crop_depth(x, 1), -1)
        np.testing.assert_array_equal(y[:, :-1], x[:, :-1])

    def test_too_far(self):
        with pytest.raises(ShapeError):
            pad_crop_depth(self.abc, 3)
