import json
import math

import numpy as np
import pytest

from rblkit import (
    DimensionMismatchError,
    EmbeddingError,
    InvalidParameterError,
    Pose,
    RankDeficiencyError,
    RigidBodyTemplate,
    RotationParam,
    apply_pose,
    distance_matrix,
    mirror_template,
    procrustes_align,
    recover_template_mds,
    rotation_matrix,
    wrap_angle,
)
from rblkit.geometry import (
    angle_difference,
    load_template,
    rotation_angles_from_matrix,
    rotation_matrix_derivative,
    save_template,
    template_from_dict,
    template_to_dict,
)


def square_template(side=1.0):
    nodes = np.array([[0, side, side, 0], [0, 0, side, side]], dtype=float)
    return RigidBodyTemplate(dim=2, nodes=nodes, label="square")


def random_template(rng, dim=2, k=4):
    while True:
        nodes = rng.uniform(-2.0, 2.0, size=(dim, k))
        try:
            return RigidBodyTemplate(dim=dim, nodes=nodes)
        except InvalidParameterError:
            continue


def random_pose(rng, dim=2, principal_pitch=True):
    if dim == 2:
        angles = (rng.uniform(-math.pi, math.pi),)
    else:
        beta_hi = math.pi / 2 - 0.05 if principal_pitch else math.pi
        angles = (
            rng.uniform(-math.pi, math.pi),
            rng.uniform(-beta_hi, beta_hi),
            rng.uniform(-math.pi, math.pi),
        )
    return Pose(RotationParam(angles), rng.uniform(-5.0, 5.0, size=dim))


class TestWrapAngle:
    def test_interval_is_half_open(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert wrap_angle(0.0) == 0.0

    def test_array_input(self):
        out = wrap_angle(np.array([0.0, 2 * math.pi, -3 * math.pi / 2]))
        assert np.allclose(out, [0.0, 0.0, math.pi / 2])

    def test_difference_wraps(self):
        assert angle_difference(3.0, -3.0) == pytest.approx(6.0 - 2 * math.pi)


class TestRotationMatrix:
    def test_zero_angle_is_identity(self):
        assert np.allclose(rotation_matrix(RotationParam((0.0,))), np.eye(2))

    def test_quarter_turn(self):
        q = rotation_matrix(RotationParam((math.pi / 2,)))
        assert np.allclose(q, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)

    def test_pi_over_six_matches_direct_trig(self):
        q = rotation_matrix(RotationParam((math.pi / 6,)))
        c, s = math.cos(math.pi / 6), math.sin(math.pi / 6)
        assert np.allclose(q, [[c, -s], [s, c]], atol=1e-15)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_orthonormal_proper(self, dim):
        rng = np.random.default_rng(101)
        for _ in range(200):
            pose = random_pose(rng, dim=dim, principal_pitch=False)
            q = rotation_matrix(pose.rotation)
            assert np.allclose(q.T @ q, np.eye(dim), atol=1e-12)
            assert abs(np.linalg.det(q) - 1.0) < 1e-12

    def test_non_finite_angle_rejected(self):
        with pytest.raises(InvalidParameterError):
            RotationParam((float("nan"),))
        with pytest.raises(InvalidParameterError):
            RotationParam((float("inf"),))

    def test_angle_count_validated(self):
        with pytest.raises(InvalidParameterError):
            RotationParam((0.1, 0.2))

    def test_derivative_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        h = 1e-7
        for dim in (2, 3):
            n_angles = 1 if dim == 2 else 3
            for _ in range(20):
                angles = rng.uniform(-2.5, 2.5, size=n_angles)
                for i in range(n_angles):
                    plus = angles.copy()
                    minus = angles.copy()
                    plus[i] += h
                    minus[i] -= h
                    fd = (
                        rotation_matrix(RotationParam(tuple(plus)))
                        - rotation_matrix(RotationParam(tuple(minus)))
                    ) / (2 * h)
                    an = rotation_matrix_derivative(RotationParam(tuple(angles)), i)
                    assert np.allclose(an, fd, atol=1e-6)


class TestApplyPose:
    def test_identity_pose(self):
        tpl = square_template()
        out = apply_pose(tpl, Pose.identity(2))
        assert np.array_equal(out, tpl.nodes)

    def test_single_node_quarter_turn(self):
        tpl = RigidBodyTemplate(dim=2, nodes=np.array([[1.0], [0.0]]))
        pose = Pose(RotationParam((math.pi / 2,)), np.zeros(2))
        assert np.allclose(apply_pose(tpl, pose), [[0.0], [1.0]], atol=1e-15)

    def test_matches_per_column_oracle(self):
        # Independent oracle: rotate and translate each column separately.
        tpl = RigidBodyTemplate(
            dim=2, nodes=np.array([[0.0, 2.0, 1.0], [0.0, 0.0, 1.5]])
        )
        pose = Pose(RotationParam((math.pi / 4,)), np.array([1.0, 2.0]))
        q = rotation_matrix(pose.rotation)
        expected = np.column_stack(
            [q @ tpl.nodes[:, k] + pose.translation for k in range(3)]
        )
        assert np.allclose(apply_pose(tpl, pose), expected, atol=1e-12)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_preserves_distances(self, dim):
        rng = np.random.default_rng(77)
        for _ in range(100):
            tpl = random_template(rng, dim=dim, k=5)
            pose = random_pose(rng, dim=dim)
            moved = apply_pose(tpl, pose)
            assert np.allclose(
                distance_matrix(moved), distance_matrix(tpl.nodes), atol=1e-12
            )

    def test_dimension_mismatch(self):
        tpl = square_template()
        pose = Pose(RotationParam((0.1, 0.2, 0.3)), np.zeros(3))
        with pytest.raises(DimensionMismatchError):
            apply_pose(tpl, pose)

    def test_rotation_composition_matches_matrix_product(self):
        rng = np.random.default_rng(13)
        tpl = square_template()
        for _ in range(50):
            p1 = random_pose(rng)
            p2 = random_pose(rng)
            q1 = rotation_matrix(p1.rotation)
            q2 = rotation_matrix(p2.rotation)
            # Apply p1, then p2 to the result; equals the composed transform.
            step = q2 @ apply_pose(tpl, p1) + p2.translation[:, None]
            combined = Pose(
                RotationParam(rotation_angles_from_matrix(q2 @ q1)),
                q2 @ p1.translation + p2.translation,
            )
            assert np.allclose(step, apply_pose(tpl, combined), atol=1e-12)


class TestDistanceMatrix:
    def test_single_node(self):
        dm = distance_matrix(np.array([[2.0], [3.0]]))
        assert dm.shape == (1, 1)
        assert dm[0, 0] == 0.0

    def test_three_four_five(self):
        dm = distance_matrix(np.array([[0.0, 3.0], [0.0, 4.0]]))
        assert dm[0, 1] == pytest.approx(5.0)
        assert dm[1, 0] == pytest.approx(5.0)

    def test_unit_square_hand_enumeration(self):
        dm = distance_matrix(square_template().nodes)
        root2 = math.sqrt(2.0)
        expected = np.array(
            [
                [0.0, 1.0, root2, 1.0],
                [1.0, 0.0, 1.0, root2],
                [root2, 1.0, 0.0, 1.0],
                [1.0, root2, 1.0, 0.0],
            ]
        )
        assert np.allclose(dm, expected, atol=1e-15)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidParameterError):
            distance_matrix(np.array([[0.0, np.nan], [0.0, 1.0]]))

    def test_invariants(self):
        rng = np.random.default_rng(3)
        body = rng.uniform(-5, 5, size=(2, 6))
        dm = distance_matrix(body)
        assert np.allclose(dm, dm.T)
        assert np.all(np.diag(dm) == 0.0)
        assert np.all(dm >= 0.0)
        for i in range(6):
            for j in range(6):
                for k in range(6):
                    assert dm[i, j] <= dm[i, k] + dm[k, j] + 1e-9


def best_mirror_residual(recovered, reference_nodes):
    """Procrustes residual resolving the reflection ambiguity of MDS."""
    r_direct = procrustes_align(recovered, reference_nodes)[1]
    r_mirror = procrustes_align(mirror_template(recovered), reference_nodes)[1]
    return min(r_direct, r_mirror)


class TestRecoverTemplateMds:
    def test_two_points_on_axis(self):
        dm = np.array([[0.0, 2.0], [2.0, 0.0]])
        rec = recover_template_mds(dm, dim=2)
        xs = sorted(rec.nodes[0])
        assert xs == pytest.approx([-1.0, 1.0], abs=1e-9)
        assert np.allclose(rec.nodes[1], 0.0, atol=1e-9)

    def test_unit_square_roundtrip(self):
        tpl = square_template()
        rec = recover_template_mds(distance_matrix(tpl.nodes), dim=2)
        assert best_mirror_residual(rec, tpl.nodes) < 1e-9

    def test_random_roundtrip(self):
        rng = np.random.default_rng(11)
        nodes = rng.uniform(-3, 3, size=(2, 5))
        rec = recover_template_mds(distance_matrix(nodes), dim=2)
        assert best_mirror_residual(rec, nodes) < 1e-9
        assert np.allclose(
            distance_matrix(rec.nodes), distance_matrix(nodes), atol=1e-6
        )

    def test_centroid_at_origin(self):
        rng = np.random.default_rng(12)
        nodes = rng.uniform(-3, 3, size=(2, 6))
        rec = recover_template_mds(distance_matrix(nodes), dim=2)
        assert np.allclose(rec.nodes.mean(axis=1), 0.0, atol=1e-12)

    def test_not_embeddable_reports_deficit(self):
        # Triangle-inequality violation: no Euclidean configuration exists,
        # so the Gram matrix picks up a negative eigenvalue.
        dm = np.array(
            [
                [0.0, 1.0, 3.0],
                [1.0, 0.0, 1.0],
                [3.0, 1.0, 0.0],
            ]
        )
        with pytest.raises(EmbeddingError) as err:
            recover_template_mds(dm, dim=2)
        assert err.value.deficit > 0.0

    def test_3d_roundtrip(self):
        rng = np.random.default_rng(21)
        nodes = rng.uniform(-2, 2, size=(3, 6))
        rec = recover_template_mds(distance_matrix(nodes), dim=3)
        assert best_mirror_residual(rec, nodes) < 1e-9

    def test_asymmetric_rejected(self):
        dm = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(InvalidParameterError):
            recover_template_mds(dm, dim=2)


class TestProcrustesAlign:
    def test_identity(self):
        tpl = square_template()
        pose, residual = procrustes_align(tpl, tpl.nodes)
        assert residual < 1e-12
        assert abs(pose.rotation.angles[0]) < 1e-12
        assert np.allclose(pose.translation, 0.0, atol=1e-12)

    def test_forward_transform_oracle(self):
        tpl = square_template()
        truth = Pose(RotationParam((math.radians(30),)), np.array([2.0, -1.0]))
        observed = apply_pose(tpl, truth)
        pose, residual = procrustes_align(tpl, observed)
        assert residual < 1e-12
        assert pose.rotation.angles[0] == pytest.approx(math.radians(30), abs=1e-9)
        assert np.allclose(pose.translation, [2.0, -1.0], atol=1e-9)

    def test_noisy_result_beats_local_grid(self):
        # Grid-search oracle: no pose on a fine local grid does better.
        rng = np.random.default_rng(42)
        tpl = square_template()
        truth = Pose(RotationParam((0.8,)), np.array([1.0, 0.5]))
        observed = apply_pose(tpl, truth) + rng.normal(0, 0.05, size=(2, 4))
        pose, residual = procrustes_align(tpl, observed)
        a_hat = pose.rotation.angles[0]
        t_hat = pose.translation
        for da in np.arange(-4, 5) * 1e-3:
            for dx in np.arange(-4, 5) * 1e-2:
                for dy in np.arange(-4, 5) * 1e-2:
                    cand = Pose(RotationParam((a_hat + da,)), t_hat + [dx, dy])
                    cand_res = np.linalg.norm(apply_pose(tpl, cand) - observed)
                    assert residual <= cand_res + 1e-12

    @pytest.mark.parametrize("dim", [2, 3])
    def test_roundtrip_identity_on_poses(self, dim):
        rng = np.random.default_rng(dim * 100 + 7)
        for _ in range(100):
            tpl = random_template(rng, dim=dim, k=5)
            truth = random_pose(rng, dim=dim)
            pose, residual = procrustes_align(tpl, apply_pose(tpl, truth))
            assert residual < 1e-9
            diff = angle_difference(
                np.asarray(pose.rotation.angles), np.asarray(truth.rotation.angles)
            )
            assert np.max(np.abs(diff)) < 1e-9
            assert np.allclose(pose.translation, truth.translation, atol=1e-9)

    def test_single_node_2d_degenerate(self):
        tpl = RigidBodyTemplate(dim=2, nodes=np.array([[1.0], [1.0]]))
        with pytest.raises(RankDeficiencyError) as err:
            procrustes_align(tpl, np.array([[0.0], [0.0]]))
        assert err.value.rank == 0

    def test_collinear_3d_degenerate(self):
        nodes = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0], [0.0, 1.0, 2.0]])
        tpl = RigidBodyTemplate(dim=3, nodes=nodes)
        with pytest.raises(RankDeficiencyError) as err:
            procrustes_align(tpl, nodes)
        assert err.value.rank == 1
        assert err.value.required == 2

    def test_shape_mismatch(self):
        tpl = square_template()
        with pytest.raises(DimensionMismatchError):
            procrustes_align(tpl, np.zeros((2, 3)))


class TestTemplateType:
    def test_coincident_nodes_rejected(self):
        nodes = np.array([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(InvalidParameterError):
            RigidBodyTemplate(dim=2, nodes=nodes)

    def test_bad_dim_rejected(self):
        with pytest.raises(InvalidParameterError):
            RigidBodyTemplate(dim=4, nodes=np.zeros((4, 2)))

    def test_nodes_are_readonly(self):
        tpl = square_template()
        with pytest.raises(ValueError):
            tpl.nodes[0, 0] = 5.0

    def test_json_roundtrip(self, tmp_path):
        tpl = square_template()
        path = tmp_path / "square.json"
        save_template(tpl, path)
        loaded = load_template(path)
        assert loaded.dim == tpl.dim
        assert loaded.label == tpl.label
        assert np.array_equal(loaded.nodes, tpl.nodes)
        doc = json.loads(path.read_text())
        assert doc["dim"] == 2
        assert doc["nodes"] == [[0, 0], [1, 0], [1, 1], [0, 1]]

    def test_dict_shape_row_per_node(self):
        tpl = square_template()
        doc = template_to_dict(tpl)
        assert len(doc["nodes"]) == tpl.num_nodes
        back = template_from_dict(doc)
        assert np.array_equal(back.nodes, tpl.nodes)
