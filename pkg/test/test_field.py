import numpy as np
import pytest

from cbct_toxicity.field import (
    DisplacementField,
    JacobianField,
    JacobianGridError,
    RigidTransform,
    apply_rigid,
    compose,
    deformed_fraction,
    jacobian_determinant,
    jacobian_field,
    jacobian_summary,
    through_rigid,
    warp,
)
from cbct_toxicity.interpolation import identity_grid
from cbct_toxicity.volio import GridMismatchError, Volume


def random_volume(shape_zyx=(6, 7, 8), seed=0, spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    return Volume(rng.standard_normal((1,) + shape_zyx).astype(np.float32), spacing)


def linear_field(matrix, shape_zyx=(6, 7, 8), spacing=(1.0, 1.0, 1.0)):
    """``u(p) = A p`` on physical coordinates."""
    like = Volume(np.zeros((1,) + shape_zyx), spacing)
    points = like.physical_grid()
    data = np.tensordot(np.asarray(matrix, dtype=np.float64), points, axes=(1, 0))
    return DisplacementField(data, spacing)


def interior(array):
    return array[..., 1:-1, 1:-1, 1:-1]


class TestRigidTransform:
    def test_inverse_composes_to_identity(self):
        t = RigidTransform((0.1, -0.2, 0.3), (1.0, -2.0, 0.5), (3.0, 4.0, 5.0))
        both = t.compose(t.inverse())
        np.testing.assert_allclose(both.parameters(), np.zeros(6), atol=1e-9)

    def test_map_points_then_inverse(self):
        t = RigidTransform((0.4, 0.1, -0.7), (2.0, 0.0, -1.0), (1.0, 1.0, 1.0))
        points = np.random.default_rng(1).uniform(-10, 10, (3, 20))
        np.testing.assert_allclose(t.inverse().map_points(t.map_points(points)), points, atol=1e-9)

    def test_compose_matches_sequential_application(self):
        a = RigidTransform((0.1, 0.0, 0.2), (1.0, 2.0, 3.0), (0.0, 1.0, 0.0))
        b = RigidTransform((0.0, -0.3, 0.1), (-1.0, 0.0, 0.5), (2.0, 0.0, 1.0))
        points = np.random.default_rng(2).uniform(-5, 5, (3, 10))
        np.testing.assert_allclose(
            a.compose(b).map_points(points), a.map_points(b.map_points(points)), atol=1e-9
        )

    def test_rotation_matrix_is_orthonormal(self):
        r = RigidTransform((0.3, 1.1, -2.0)).matrix()
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_dict_round_trip(self):
        t = RigidTransform((0.1, 0.2, 0.3), (4.0, 5.0, 6.0), (7.0, 8.0, 9.0))
        assert RigidTransform.from_dict(t.to_dict()) == t


class TestApplyRigid:
    def test_identity(self):
        vol = random_volume()
        out = apply_rigid(vol, RigidTransform.identity())
        np.testing.assert_array_equal(out.data, vol.data)

    def test_translation_by_one_voxel(self):
        vol = random_volume(spacing=(2.0, 2.0, 2.0))
        out = apply_rigid(vol, RigidTransform(translation_mm=(2.0, 0.0, 0.0)))
        np.testing.assert_allclose(out.data[0, :, :, 1:], vol.data[0, :, :, :-1], atol=1e-6)

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_full_turn_is_identity(self, axis):
        rotation = [0.0, 0.0, 0.0]
        rotation[axis] = 2 * np.pi
        vol = random_volume()
        out = apply_rigid(vol, RigidTransform(tuple(rotation), center_mm=(3.5, 3.0, 2.5)))
        np.testing.assert_allclose(out.data, vol.data, atol=1e-4)

    def test_output_follows_reference_grid(self):
        vol = random_volume()
        reference = Volume(np.zeros((1, 3, 4, 5)), (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
        out = apply_rigid(vol, RigidTransform.identity(), reference=reference)
        assert out.dims == reference.dims
        assert out.spacing_mm == reference.spacing_mm


class TestWarp:
    def test_zero_field_is_exact_identity(self):
        vol = random_volume()
        out = warp(vol, DisplacementField.zeros(vol))
        np.testing.assert_array_equal(out.data, vol.data)

    def test_one_voxel_shift(self):
        vol = random_volume(spacing=(1.5, 1.0, 1.0))
        out = warp(vol, DisplacementField.translation(vol, (1.5, 0.0, 0.0)))
        np.testing.assert_array_equal(out.data[0, :, :, :-1], vol.data[0, :, :, 1:])

    def test_half_voxel_shift_on_ramp(self):
        ramp = np.broadcast_to(np.arange(8, dtype=np.float64) * 3.0, (1, 4, 4, 8))
        vol = Volume(ramp)
        out = warp(vol, DisplacementField.translation(vol, (0.5, 0.0, 0.0)))
        np.testing.assert_allclose(out.data[0, :, :, :-1], ramp[0, :, :, :-1] + 1.5)

    def test_grid_mismatch(self):
        vol = random_volume()
        other = DisplacementField(np.zeros((3, 2, 2, 2)))
        with pytest.raises(GridMismatchError):
            warp(vol, other)


class TestCompose:
    def test_zero_is_identity_element(self):
        vol = random_volume()
        u = DisplacementField(np.random.default_rng(3).uniform(-2, 2, (3, 6, 7, 8)))
        zero = DisplacementField.zeros(vol, dtype=np.float64)
        np.testing.assert_array_equal(compose(u, zero).data, u.data)
        np.testing.assert_array_equal(compose(zero, u).data, u.data)

    def test_translations_add(self):
        vol = random_volume()
        a = DisplacementField.translation(vol, (0.3, -1.2, 0.7))
        b = DisplacementField.translation(vol, (1.1, 0.4, -0.2))
        np.testing.assert_allclose(compose(a, b).data, a.data + b.data, atol=1e-12)

    @pytest.mark.parametrize(
        "first, second",
        [((1.0, 0.0, 0.0), (0.0, 2.0, 0.0)), ((1.0, 0.0, 0.0), (2.0, 0.0, 0.0))],
    )
    def test_warp_sequence_equals_warp_of_composition(self, first, second):
        vol = random_volume()
        u1 = DisplacementField.translation(vol, first)
        u2 = DisplacementField.translation(vol, second)
        sequential = warp(warp(vol, u1), u2)
        direct = warp(vol, compose(u1, u2))
        assert sequential.data.tobytes() == direct.data.tobytes()

    def test_associative_for_translations(self):
        vol = random_volume()
        a, b, c = (
            DisplacementField.translation(vol, v)
            for v in ((1.0, 0.0, 2.0), (0.0, 1.0, 1.0), (2.0, 1.0, 0.0))
        )
        np.testing.assert_array_equal(
            compose(compose(a, b), c).data, compose(a, compose(b, c)).data
        )


class TestThroughRigid:
    def test_identity_keeps_field(self):
        u = linear_field(np.diag([0.1, -0.2, 0.05]))
        np.testing.assert_allclose(through_rigid(u, RigidTransform()).data, u.data, atol=1e-12)

    def test_translation_is_subtracted(self):
        like = random_volume()
        u = DisplacementField.translation(like, (1.0, 0.5, 0.0))
        chained = through_rigid(u, RigidTransform(translation_mm=(4.0, 0.0, -1.0)))
        np.testing.assert_allclose(chained.data[0], -3.0)
        np.testing.assert_allclose(chained.data[1], 0.5)
        np.testing.assert_allclose(chained.data[2], 1.0)

    def test_matches_warping_the_rigidly_aligned_image(self):
        like = Volume(np.zeros((1, 12, 12, 12)))
        # trilinear sampling is exact on a linear ramp
        ramp = np.tensordot([1.0, -2.0, 0.5], like.physical_grid(), axes=(0, 0))
        vol = Volume(ramp[np.newaxis])
        t = RigidTransform((0.0, 0.0, 0.05), (0.6, -0.4, 0.0), tuple(vol.center_mm()))
        u = DisplacementField.translation(vol, (0.3, 0.2, -0.1))
        via_rigid = warp(apply_rigid(vol, t), u)
        direct = warp(vol, through_rigid(u, t))
        core = (slice(None), slice(3, -3), slice(3, -3), slice(3, -3))
        np.testing.assert_allclose(direct.data[core], via_rigid.data[core], atol=1e-9)


class TestJacobian:
    def test_zero_field_is_identity(self):
        jf = jacobian_field(DisplacementField.zeros(random_volume()))
        np.testing.assert_array_equal(jf.matrices(), np.broadcast_to(np.eye(3), (6, 7, 8, 3, 3)))

    def test_translation_is_identity(self):
        vol = random_volume()
        jf = jacobian_field(DisplacementField.translation(vol, (3.0, -1.0, 2.5)))
        np.testing.assert_allclose(jf.matrices(), np.broadcast_to(np.eye(3), (6, 7, 8, 3, 3)))

    def test_linear_field_gives_identity_plus_matrix(self):
        a = np.random.default_rng(4).uniform(-0.3, 0.3, (3, 3))
        jf = jacobian_field(linear_field(a, spacing=(1.5, 2.0, 0.75)))
        errors = np.abs(jf.matrices() - (np.eye(3) + a))
        assert errors[1:-1, 1:-1, 1:-1].max() < 1e-10

    def test_row_major_channels(self):
        a = np.zeros((3, 3))
        a[0, 1] = 0.25
        jf = jacobian_field(linear_field(a))
        assert np.allclose(jf.data[1], 0.25)
        assert np.allclose(jf.data[3], 0.0)

    def test_second_order_convergence(self):
        amplitude, length = 2.0, 32.0
        k = 2 * np.pi / length

        def max_error(h):
            n = int(round(length / h)) + 1
            like = Volume(np.zeros((1, 3, 3, n)), (h, h, h))
            x = like.physical_grid()[0]
            data = np.zeros((3,) + x.shape)
            data[0] = amplitude * np.sin(k * x)
            jf = jacobian_field(DisplacementField(data, (h, h, h)))
            expected = 1.0 + amplitude * k * np.cos(k * x)
            return np.abs(jf.data[0] - expected)[:, :, 1:-1].max()

        ratio = max_error(1.0) / max_error(0.5)
        assert 3.5 <= ratio <= 4.5

    def test_too_small_grid(self):
        with pytest.raises(JacobianGridError):
            jacobian_field(DisplacementField(np.zeros((3, 2, 4, 4))))


class TestDeterminant:
    def test_identity_field_has_unit_determinant(self):
        jf = jacobian_field(DisplacementField.zeros(random_volume()))
        np.testing.assert_allclose(jacobian_determinant(jf).data, 1.0)

    def test_scaled_identity(self):
        data = np.zeros((9, 3, 3, 3))
        for i in (0, 4, 8):
            data[i] = 2.0
        det = jacobian_determinant(JacobianField(data))
        assert det.channels == 1
        np.testing.assert_allclose(det.data, 8.0)

    def test_stretch_along_x(self):
        jf = jacobian_field(linear_field(np.diag([0.1, 0.0, 0.0])))
        np.testing.assert_allclose(interior(jacobian_determinant(jf).data), 1.1)


class TestDeformedFraction:
    def test_zero_field(self):
        jf = jacobian_field(DisplacementField.zeros(random_volume()))
        assert deformed_fraction(jf) == 0.0

    def test_linear_field_counts_every_voxel(self):
        a = np.diag([0.1, -0.05, 0.02])
        jf = jacobian_field(linear_field(a))
        assert deformed_fraction(jf, eps=0.5 * np.linalg.norm(a)) == 1.0

    def test_threshold_above_deviation(self):
        jf = jacobian_field(linear_field(np.diag([0.1, 0.0, 0.0])))
        assert deformed_fraction(jf, eps=1.0) == 0.0

    def test_invalid_eps(self):
        jf = jacobian_field(DisplacementField.zeros(random_volume()))
        with pytest.raises(ValueError):
            deformed_fraction(jf, eps=0.0)


def test_jacobian_summary_reports_folding():
    like = Volume(np.zeros((1, 5, 5, 5)))
    data = np.zeros((3, 5, 5, 5))
    data[0] = -2.0 * identity_grid((5, 5, 5))[0]
    summary = jacobian_summary(jacobian_field(DisplacementField(data, like.spacing_mm)))
    assert summary["folding_fraction"] == 1.0
    assert summary["det_max"] == pytest.approx(-1.0)
    assert summary["deformed_fraction"] == 1.0
