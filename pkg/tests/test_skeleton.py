import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from errors import InvalidInputError, MappingIncompleteError, ShapeMismatchError
from skeleton import (
    NUM_BONES,
    NUM_JOINTS,
    PELVIS,
    BoneLengthVector,
    SkeletonTopology,
    TPose,
    extract_bone_lengths,
    forward_kinematics_tpose,
    frame_bone_lengths,
    retarget_to_unified,
)


def test_canonical_topology_shape(topo):
    assert topo.num_joints == NUM_JOINTS
    assert topo.num_bones == NUM_BONES
    assert topo.root == PELVIS
    order = topo.dfs_order()
    assert sorted(order) == list(range(NUM_JOINTS))
    seen = set()
    for joint in order:
        parent = topo.parent_index[joint]
        assert parent == -1 or parent in seen
        seen.add(joint)


def test_bone_index_is_child_minus_one(topo):
    for e, (parent, child) in enumerate(topo.bone_edges):
        assert child == e + 1
        assert topo.bone_of_child(child) == e
    assert topo.tail_bones() == [21, 22, 23]


def test_topology_rejects_cycles(topo):
    parents = list(topo.parent_index)
    parents[1] = 2
    edges = tuple((parents[c], c) for c in range(1, NUM_JOINTS))
    with pytest.raises(InvalidInputError):
        SkeletonTopology(topo.joint_names, tuple(parents), edges, topo.bone_directions)


def test_fk_then_extract_is_identity(topo):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b = BoneLengthVector(rng.uniform(0.0, 1.0, NUM_BONES))
        recovered = extract_bone_lengths(forward_kinematics_tpose(b, topo), topo)
        assert np.max(np.abs(recovered.lengths - b.lengths)) <= 1e-9


def test_fk_zero_lengths_collapse_to_origin(topo):
    tpose = forward_kinematics_tpose(BoneLengthVector(np.zeros(NUM_BONES)), topo)
    assert np.all(tpose.joints == 0.0)
    assert tpose.flatten().shape == (75,)


def test_fk_places_root_at_origin_and_walks_directions(topo):
    b = BoneLengthVector(np.full(NUM_BONES, 0.5))
    joints = forward_kinematics_tpose(b, topo).joints
    assert np.array_equal(joints[PELVIS], np.zeros(3))
    head = topo.joint_names.index('head')
    assert np.allclose(joints[head], [0.0, 2.5, 0.0])


def test_bone_length_vector_validation():
    with pytest.raises(InvalidInputError):
        BoneLengthVector(np.full(NUM_BONES, -0.1))
    with pytest.raises(InvalidInputError):
        BoneLengthVector(np.full(NUM_BONES, np.nan))
    with pytest.raises(ShapeMismatchError):
        BoneLengthVector(np.ones(NUM_BONES - 1))


def test_tpose_shape_is_checked():
    with pytest.raises(ShapeMismatchError):
        TPose(np.zeros((NUM_JOINTS - 1, 3)))


def test_frame_bone_lengths_rejects_non_finite(topo):
    frame = np.zeros((NUM_JOINTS, 3))
    frame[4, 1] = np.inf
    with pytest.raises(InvalidInputError):
        frame_bone_lengths(frame, topo)


def _human_like(topo):
    b = np.full(NUM_BONES, 0.2)
    b[topo.tail_bones()] = 0.0
    return forward_kinematics_tpose(BoneLengthVector(b), topo).joints


def test_retarget_with_virtual_tail(topo):
    src = _human_like(topo)[:22][::-1].copy()
    joint_map = [(21 - j, j) for j in range(22)]
    out = retarget_to_unified(src, joint_map, scale=2.0, virtual=(22, 23, 24))
    assert out.shape == (NUM_JOINTS, 3)
    expected = _human_like(topo)[:22] * 2.0
    assert np.allclose(out[:22], expected)
    for tail in (22, 23, 24):
        assert np.array_equal(out[tail], out[PELVIS])


def test_retarget_sequence_input(topo):
    frames = np.stack([_human_like(topo)[:22] + t for t in range(3)])
    out = retarget_to_unified(frames, [(j, j) for j in range(22)], 1.0, virtual=(22, 23, 24))
    assert out.shape == (3, NUM_JOINTS, 3)


def test_retarget_incomplete_map_names_missing_joints(topo):
    src = _human_like(topo)[:22]
    with pytest.raises(MappingIncompleteError, match='left_knee'):
        retarget_to_unified(src, [(j, j) for j in range(22) if j != 7], 1.0, virtual=(22, 23, 24))


def test_retarget_rejects_bad_scale(topo):
    with pytest.raises(InvalidInputError):
        retarget_to_unified(np.zeros((NUM_JOINTS, 3)), [(j, j) for j in range(NUM_JOINTS)], 0.0)


def test_bone_lengths_survive_rigid_motion(topo):
    b = BoneLengthVector(np.random.default_rng(4).uniform(0.1, 0.6, NUM_BONES))
    joints = forward_kinematics_tpose(b, topo).joints
    turned = Rotation.from_rotvec([0.3, -1.1, 0.7]).apply(joints) + np.array([2.0, 0.5, -1.0])
    assert np.allclose(frame_bone_lengths(turned, topo).lengths, b.lengths, atol=1e-9)

    knee = topo.joint_names.index('left_knee')
    shin = [topo.joint_names.index(name) for name in ('left_ankle', 'left_foot')]
    bent = joints.copy()
    bent[shin] = joints[knee] + Rotation.from_euler('x', 70, degrees=True).apply(joints[shin] - joints[knee])
    assert np.allclose(frame_bone_lengths(bent, topo).lengths, b.lengths, atol=1e-9)
    assert not np.allclose(bent, joints)
