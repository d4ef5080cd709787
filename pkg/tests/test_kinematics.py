import json

import numpy as np
import pytest
import scipy.sparse as sp
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from signmotion.kinematics import (
    BehindCameraError,
    Camera,
    KinematicTree,
    VertexRegressor,
    axis_angle_to_matrix,
    default_regressor,
    default_tree,
    fk_torch,
    forward_kinematics,
    load_skeleton,
    project,
    proxy_vertices,
    save_skeleton,
)
from signmotion.params import ParamSequence
from signmotion._validation import ShapeError


def chain(n=3):
    offsets = np.zeros((n, 3))
    offsets[1:, 0] = 1.0
    return KinematicTree(tuple(range(-1, n - 1)), offsets, tuple(f"j{i}" for i in range(n)))


def fk(tree, rot):
    joints, _ = fk_torch(tree, torch.as_tensor(np.asarray(rot, dtype=np.float64)))
    return joints.numpy()


def test_identity_pose_gives_cumulative_offsets():
    tree = default_tree()
    joints = fk(tree, np.zeros((1, tree.joint_count, 3)))[0]
    expected = np.zeros_like(joints)
    for i in range(1, tree.joint_count):
        expected[i] = expected[tree.parents[i]] + tree.offsets[i]
    np.testing.assert_allclose(joints, expected, atol=1e-15)


def test_root_rotated_half_turn_about_z():
    rot = np.zeros((1, 3, 3))
    rot[0, 0] = [0, 0, np.pi]
    joints = fk(chain(), rot)[0]
    np.testing.assert_allclose(joints, [[0, 0, 0], [-1, 0, 0], [-2, 0, 0]], atol=1e-12)


def test_elbow_quarter_turn_matches_hand_rotation():
    rot = np.zeros((1, 3, 3))
    rot[0, 1] = [0, 0, np.pi / 2]
    # oracle: elbow at (1,0,0), tip = elbow + Rz(90) @ (1,0,0)
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    tip = np.array([1.0, 0, 0]) + Rz @ np.array([1.0, 0, 0])
    joints = fk(chain(), rot)[0]
    np.testing.assert_allclose(joints[2], tip, atol=1e-12)
    np.testing.assert_allclose(joints[2], [1, 1, 0], atol=1e-12)


@pytest.mark.parametrize("scale", [0.0, 1e-5, 1e-3, 0.5, 3.0])
def test_rodrigues_matches_scipy(scale):
    rng = np.random.default_rng(3)
    aa = rng.normal(size=(20, 3)) * scale
    ours = axis_angle_to_matrix(torch.as_tensor(aa)).numpy()
    np.testing.assert_allclose(ours, Rotation.from_rotvec(aa).as_matrix(), atol=1e-12)


def test_rodrigues_gradient_finite_at_zero():
    aa = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    axis_angle_to_matrix(aa).sum().backward()
    assert torch.isfinite(aa.grad).all()


rotations = arrays(np.float64, (2, 16, 3), elements=st.floats(-2.0, 2.0))


@settings(max_examples=30, deadline=None)
@given(rotations, arrays(np.float64, 3, elements=st.floats(-2.0, 2.0)))
def test_global_rotation_equivariance(rot, root_aa):
    tree = default_tree()
    base = fk(tree, rot)
    R = Rotation.from_rotvec(root_aa)
    rotated = rot.copy()
    rotated[:, 0] = (R * Rotation.from_rotvec(rot[:, 0])).as_rotvec()
    np.testing.assert_allclose(fk(tree, rotated), base @ R.as_matrix().T, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(rotations)
def test_bone_lengths_invariant(rot):
    tree = default_tree()
    joints = fk(tree, rot)
    for i in range(1, tree.joint_count):
        length = np.linalg.norm(joints[:, i] - joints[:, tree.parents[i]], axis=-1)
        np.testing.assert_allclose(length, np.linalg.norm(tree.offsets[i]), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(rotations, arrays(np.float64, 3, elements=st.floats(-2.0, 2.0)))
def test_leaf_rotation_moves_nothing_else(rot, delta):
    tree = default_tree()
    leaves = [i for i in range(tree.joint_count) if not tree.children[i]]
    perturbed = rot.copy()
    perturbed[:, leaves[0]] += delta
    np.testing.assert_array_equal(fk(tree, perturbed), fk(tree, rot))


def test_ancestor_only_dependence():
    tree = default_tree()
    rng = np.random.default_rng(0)
    rot = rng.normal(size=(1, 16, 3))
    j = tree.index("l_elbow")
    moved = rot.copy()
    moved[:, j] += 0.3
    a, b = fk(tree, rot)[0], fk(tree, moved)[0]
    descendants = {8, 9, 10, 11}
    for i in range(tree.joint_count):
        if i in descendants:
            assert not np.allclose(a[i], b[i])
        else:
            np.testing.assert_array_equal(a[i], b[i])


def test_forward_kinematics_on_param_sequence_with_translation():
    tree = default_tree()
    seq = ParamSequence(np.zeros((2, 24)), np.zeros((2, 24)), np.zeros((2, 4)), transl=np.tile([0, 0, 2.0], (2, 1)))
    joints = forward_kinematics(tree, seq)
    assert joints.shape == (2, 16, 3)
    np.testing.assert_allclose(joints[:, 0], [[0, 0, 2.0]] * 2)


def test_forward_kinematics_dimension_mismatch():
    seq = ParamSequence(np.zeros((2, 21)), np.zeros((2, 24)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        forward_kinematics(default_tree(), seq)


def test_tree_invariants_enforced():
    with pytest.raises(ValueError):
        KinematicTree((-1, 2, 0), np.zeros((3, 3)), ("a", "b", "c"))
    with pytest.raises(ValueError):
        KinematicTree((-1, -1), np.zeros((2, 3)), ("a", "b"))
    with pytest.raises(ValueError):
        KinematicTree((-1, 0), np.zeros((2, 3)), ("a", "b"), hand_joints=(1,), arm_joints=(1,))


def test_default_tree_subsets():
    tree = default_tree()
    assert tree.joint_count == 16
    assert len(tree.body_joints) == 8
    assert tree.left_hand_joints == (8, 9, 10, 11)
    assert tree.right_hand_joints == (12, 13, 14, 15)
    src, dst = tree.edges
    assert len(src) == 2 * (tree.joint_count - 1)


def test_skeleton_json_roundtrip(tmp_path):
    tree = default_tree()
    path = tmp_path / "skel.json"
    save_skeleton(tree, path)
    assert set(json.loads(path.read_text())) == {"parents", "offsets", "names", "hand_joints", "arm_joints"}
    back = load_skeleton(path)
    assert back.parents == tree.parents and back.names == tree.names
    np.testing.assert_array_equal(back.offsets, tree.offsets)
    assert back.hand_joints == tree.hand_joints and back.arm_joints == tree.arm_joints


# projection


def test_optical_axis_projects_to_principal_point():
    cam = Camera.from_params(400, 410, 300.5, 200.25)
    np.testing.assert_allclose(project(cam, [[0, 0, 3.0]]), [[300.5, 200.25]])


def test_identity_intrinsics():
    np.testing.assert_allclose(project(Camera(np.eye(3)), [[0.3, -0.7, 1.0]]), [[0.3, -0.7]])


def test_pinhole_worked_example():
    x, y, z, f, cx, cy = 0.1, -0.2, 2.0, 500.0, 320.0, 240.0
    expected = (f * x / z + cx, f * y / z + cy)
    assert expected == (345.0, 190.0)
    np.testing.assert_allclose(project(Camera.from_params(f, f, cx, cy), [[x, y, z]]), [expected])


def test_behind_camera_rejected():
    with pytest.raises(BehindCameraError):
        project(Camera(), [[0, 0, 0.0]])
    with pytest.raises(BehindCameraError):
        project(Camera(), [[0, 0, -1.0]])


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 3, elements=st.floats(-5, 5)).filter(lambda p: p[2] > 0.1),
    st.floats(0.01, 100),
)
def test_projection_scale_invariance(p, s):
    cam = Camera()
    np.testing.assert_allclose(project(cam, p * s), project(cam, p), rtol=1e-9, atol=1e-9)


def test_camera_must_be_upper_triangular():
    with pytest.raises(ValueError):
        Camera(np.array([[1.0, 0, 0], [1, 1, 0], [0, 0, 1]]))


# proxy vertices


def test_identity_regressor():
    joints = np.random.default_rng(0).normal(size=(4, 5, 3))
    reg = VertexRegressor(sp.identity(5, format="csr"))
    np.testing.assert_array_equal(proxy_vertices(reg, joints), joints)


def test_midpoint_vertex():
    reg = VertexRegressor(sp.csr_matrix([[0.5, 0.5]]))
    out = proxy_vertices(reg, np.array([[[0.0, 0, 0], [2, 0, 0]]]))
    np.testing.assert_allclose(out, [[[1.0, 0, 0]]])


def test_random_sparse_regressor_matches_dense_product():
    rng = np.random.default_rng(1)
    dense = rng.random((7, 5)) * (rng.random((7, 5)) < 0.5)
    dense[:, 0] += 1e-3
    dense /= dense.sum(axis=1, keepdims=True)
    joints = rng.normal(size=(3, 5, 3))
    expected = np.stack([dense @ joints[f] for f in range(3)])
    np.testing.assert_allclose(proxy_vertices(VertexRegressor(sp.csr_matrix(dense)), joints), expected, atol=1e-14)


def test_regressor_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        VertexRegressor(sp.csr_matrix([[0.5, 0.4]]))


def test_regressor_shape_mismatch():
    with pytest.raises(ShapeError):
        proxy_vertices(default_regressor(default_tree()), np.zeros((2, 5, 3)))


def test_default_regressor_regions():
    tree = default_tree()
    reg = default_regressor(tree)
    assert reg.vertex_count == 16 + 2 * 15
    assert set(reg.regions) == {"body", "left_hand", "right_hand"}
