import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxshape import geometry
from voxshape.autodiff import Node, backward, check_composite, ops
from voxshape.errors import NotTrainedError
from voxshape.losses import dice_value


def _theta(**kw):
    p = np.zeros(9)
    names = ["rx", "ry", "rz", "tx", "ty", "tz", "sx", "sy", "sz"]
    for k, v in kw.items():
        p[names.index(k)] = v
    return p


class TestAffineMatrix:
    def test_identity(self):
        np.testing.assert_array_equal(geometry.build_affine_matrix(np.zeros(9)), np.eye(4))

    def test_pure_scale(self):
        m = geometry.build_affine_matrix(_theta(sx=np.log(2)))
        np.testing.assert_allclose(m, np.diag([2.0, 1, 1, 1]), atol=1e-15)

    def test_quarter_turn_about_z(self):
        m = geometry.build_affine_matrix(_theta(rz=np.pi / 2))
        np.testing.assert_allclose(m[:3, :3] @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_pure_shift(self):
        m = geometry.build_affine_matrix(_theta(tx=0.5))
        np.testing.assert_array_equal(m[:, 3], [0.5, 0, 0, 1])

    def test_last_row_fixed(self):
        m = geometry.build_affine_matrix(np.random.default_rng(0).standard_normal(9))
        np.testing.assert_array_equal(m[3], [0, 0, 0, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
    def test_no_shear(self, p):
        a = geometry.build_affine_matrix(np.array(p))[:3, :3]
        sym = geometry.polar_symmetric_factor(a)
        off = sym - np.diag(np.diag(sym))
        assert np.max(np.abs(off)) < 1e-6
        np.testing.assert_allclose(np.linalg.det(a), np.exp(sum(p[6:9])), rtol=1e-9)


class TestGrid:
    def test_identity_corner_aligned(self):
        g = geometry.generate_grid(np.eye(4), (3, 3, 3))
        np.testing.assert_array_equal(np.unique(g[0]), [-1.0, 0.0, 1.0])
        np.testing.assert_array_equal(g[0, 0, 0], [-1.0, 0.0, 1.0])  # x varies along the last axis
        np.testing.assert_array_equal(g[2, :, 0, 0], [-1.0, 0.0, 1.0])  # z along the first

    def test_scale_two_reaches_outside(self):
        g = geometry.generate_grid(np.diag([2.0, 2, 2, 1]), (3, 3, 3))
        assert g.min() == -2.0 and g.max() == 2.0

    def test_translation_shifts_x(self):
        base = geometry.generate_grid(np.eye(4), (3, 4, 5))
        g = geometry.generate_grid(geometry.build_affine_matrix(_theta(tx=0.5)), (3, 4, 5))
        np.testing.assert_allclose(g[0] - base[0], 0.5)
        np.testing.assert_array_equal(g[1:], base[1:])

    def test_too_small_extent(self):
        with pytest.raises(ValueError):
            geometry.generate_grid(np.eye(4), (1, 3, 3))


class TestTrilinear:
    def test_identity_exact(self):
        v = np.random.default_rng(0).random((5, 6, 7)).astype(np.float32)
        out = geometry.resample(v, np.eye(4))
        np.testing.assert_array_equal(out, v)

    def test_midpoint(self):
        v = np.zeros((2, 2, 2))
        v[:, :, 1] = 1.0
        grid = np.zeros((1, 3, 1, 1, 1))  # (0,0,0) is halfway along every axis
        out = geometry.trilinear_sample(Node(v[None]), Node(grid)).value
        assert out.item() == pytest.approx(0.5)

    def test_far_outside_is_zero(self):
        v = np.ones((4, 4, 4))
        grid = np.full((1, 3, 1, 1, 1), 5.0)
        assert geometry.trilinear_sample(Node(v[None]), Node(grid)).value.item() == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    def test_linear_in_volume(self, a, b, seed):
        rng = np.random.default_rng(seed)
        v1, v2 = rng.random((2, 1, 4, 5, 6))
        grid = rng.uniform(-1.2, 1.2, (1, 3, 3, 3, 3))
        s = lambda v: geometry.trilinear_sample(Node(v), Node(grid)).value  # noqa: E731
        np.testing.assert_allclose(s(a * v1 + b * v2), a * s(v1) + b * s(v2), atol=1e-12)

    def test_theta_chain_finite_differences(self):
        from voxshape.autodiff.gradcheck import _lattice_safe_grid

        for seed in range(5):
            rng = np.random.default_rng(seed)
            v = rng.random((1, 5, 5, 5))
            theta = _lattice_safe_grid(rng, (5, 5, 5), (4, 4, 4))
            weights = rng.standard_normal((1, 4, 4, 4))

            def fn(th):
                grid = geometry.affine_grid(geometry.affine_matrix(th), (4, 4, 4))
                return ops.reduce_sum(ops.mul(geometry.trilinear_sample(Node(v), grid), Node(weights)))

            assert check_composite(fn, [theta]) < 1e-4

    def test_round_trip_smooth_volume(self):
        idx = geometry.normalized_coords((32, 32, 32))
        r2 = (idx[0] / 0.6) ** 2 + (idx[1] / 0.45) ** 2 + (idx[2] / 0.35) ** 2
        v = 1.0 / (1.0 + np.exp((r2 - 1.0) * 6))
        p = _theta(rx=0.15, ry=-0.1, rz=0.2, sx=0.1, sy=-0.15, sz=0.05)
        forward = geometry.transform_volume(v, p)
        back = geometry.resample(forward, geometry.build_affine_matrix(p))
        assert dice_value(back > 0.5, v > 0.5) >= 0.97


class TestNormalizer:
    def test_train_centres_columns(self):
        st_ = geometry.NormalizerState()
        batch = np.tile(np.array([[1.0], [3.0]]), (1, 9))
        out = geometry.normalize_params(Node(batch), st_, "train").value
        np.testing.assert_array_equal(out[:, 0], [-1.0, 1.0])
        np.testing.assert_array_equal(out.mean(axis=0), np.zeros(9))

    def test_centred_input_unchanged(self):
        batch = np.random.default_rng(0).standard_normal((4, 9))
        batch -= batch.mean(axis=0)
        out = geometry.normalize_params(Node(batch), geometry.NormalizerState(), "train").value
        np.testing.assert_allclose(out, batch, atol=1e-15)

    def test_single_sample_zero(self):
        out = geometry.normalize_params(Node(np.arange(9.0)[None]), geometry.NormalizerState(), "train")
        np.testing.assert_array_equal(out.value, np.zeros((1, 9)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.integers(0, 10_000))
    def test_zero_column_means(self, b, seed):
        batch = np.random.default_rng(seed).standard_normal((b, 9)) * 10
        out = geometry.normalize_params(Node(batch), geometry.NormalizerState(), "train").value
        assert np.max(np.abs(out.mean(axis=0))) < 1e-12

    def test_running_mean_and_eval(self):
        st_ = geometry.NormalizerState(running_mean=np.zeros(9), momentum=0.9)
        batch = np.full((3, 9), 2.0)
        geometry.normalize_params(Node(batch), st_, "train")
        np.testing.assert_allclose(st_.running_mean, 0.2)
        out = geometry.normalize_params(Node(batch), st_, "eval").value
        np.testing.assert_allclose(out, 1.8)

    def test_eval_before_training(self):
        with pytest.raises(NotTrainedError):
            geometry.normalize_params(Node(np.zeros((2, 9))), geometry.NormalizerState(), "eval")

    def test_train_mode_differentiable(self):
        x = Node(np.random.default_rng(2).standard_normal((4, 9)), requires_grad=True)
        w = np.random.default_rng(3).standard_normal((4, 9))
        backward(ops.reduce_sum(ops.mul(geometry.normalize_params(x, geometry.NormalizerState()), Node(w))))
        np.testing.assert_allclose(x.grad, w - w.mean(axis=0))
