"""Unified 25-joint skeleton: topology, bone-length extraction, FK and retargeting.

Every species is expressed on the same kinematic tree. Morphology lives entirely in
the 24 bone lengths; bone directions are fixed per bone so a bone-length vector fully
determines a T-pose.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from errors import InvalidInputError, MappingIncompleteError, ShapeMismatchError

logger = logging.getLogger(__name__)

NUM_JOINTS = 25
NUM_BONES = 24
PELVIS = 0
TAIL_JOINTS = (22, 23, 24)

JOINT_NAMES = (
    'pelvis', 'spine1', 'spine2', 'spine3', 'neck', 'head',
    'left_hip', 'left_knee', 'left_ankle', 'left_foot',
    'right_hip', 'right_knee', 'right_ankle', 'right_foot',
    'left_scapula', 'left_shoulder', 'left_elbow', 'left_wrist',
    'right_scapula', 'right_shoulder', 'right_elbow', 'right_wrist',
    'tail1', 'tail2', 'tail3',
)

PARENTS = (
    -1, 0, 1, 2, 3, 4,
    0, 6, 7, 8,
    0, 10, 11, 12,
    3, 14, 15, 16,
    3, 18, 19, 20,
    0, 22, 23,
)

_UP = (0.0, 1.0, 0.0)
_DOWN = (0.0, -1.0, 0.0)
_FORWARD = (0.0, 0.0, 1.0)
_BACK = (0.0, 0.0, -1.0)
_LEFT = (-1.0, 0.0, 0.0)
_RIGHT = (1.0, 0.0, 0.0)

# Indexed by child joint; the root has no bone.
_CHILD_DIRECTIONS = {
    1: _UP, 2: _UP, 3: _UP, 4: _UP, 5: _UP,
    6: _LEFT, 7: _DOWN, 8: _DOWN, 9: _FORWARD,
    10: _RIGHT, 11: _DOWN, 12: _DOWN, 13: _FORWARD,
    14: _LEFT, 15: _LEFT, 16: _LEFT, 17: _LEFT,
    18: _RIGHT, 19: _RIGHT, 20: _RIGHT, 21: _RIGHT,
    22: _BACK, 23: _BACK, 24: _BACK,
}


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    joint_names: tuple
    parent_index: tuple
    bone_edges: tuple
    bone_directions: np.ndarray

    def __post_init__(self):
        n = len(self.joint_names)
        if len(self.parent_index) != n:
            raise InvalidInputError('parent_index length does not match joint_names')
        if len(self.bone_edges) != n - 1:
            raise InvalidInputError(f'a tree over {n} joints needs {n - 1} edges, got {len(self.bone_edges)}')
        directions = np.asarray(self.bone_directions, dtype=np.float64)
        if directions.shape != (n - 1, 3):
            raise ShapeMismatchError(f'bone_directions must be ({n - 1}, 3), got {directions.shape}')
        norms = np.linalg.norm(directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InvalidInputError('bone directions must be unit vectors')
        directions.setflags(write=False)
        object.__setattr__(self, 'bone_directions', directions)
        for parent, child in self.bone_edges:
            if self.parent_index[child] != parent:
                raise InvalidInputError(f'edge ({parent}, {child}) disagrees with parent_index')
        if len(self.dfs_order()) != n:
            raise InvalidInputError('parent_index does not form a single-rooted tree')

    @property
    def num_joints(self):
        return len(self.joint_names)

    @property
    def num_bones(self):
        return len(self.bone_edges)

    @property
    def root(self):
        roots = [j for j, p in enumerate(self.parent_index) if p == -1]
        if len(roots) != 1:
            raise InvalidInputError(f'expected exactly one root, found {len(roots)}')
        return roots[0]

    def children(self, joint):
        return [j for j, p in enumerate(self.parent_index) if p == joint]

    def dfs_order(self):
        """Joints in depth-first order from the root; each joint appears once."""
        order, seen, stack = [], set(), [self.root]
        while stack:
            joint = stack.pop()
            if joint in seen:
                continue
            seen.add(joint)
            order.append(joint)
            stack.extend(reversed(self.children(joint)))
        return order

    def bone_of_child(self, joint):
        for e, (_, child) in enumerate(self.bone_edges):
            if child == joint:
                return e
        raise InvalidInputError(f'joint {joint} has no incoming bone')

    def tail_bones(self):
        return [self.bone_of_child(j) for j in TAIL_JOINTS]

    def __eq__(self, other):
        if not isinstance(other, SkeletonTopology):
            return NotImplemented
        return (
            tuple(self.joint_names) == tuple(other.joint_names)
            and tuple(self.parent_index) == tuple(other.parent_index)
            and tuple(map(tuple, self.bone_edges)) == tuple(map(tuple, other.bone_edges))
            and np.array_equal(self.bone_directions, other.bone_directions)
        )

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class BoneLengthVector:
    lengths: np.ndarray

    def __post_init__(self):
        lengths = np.array(self.lengths, dtype=np.float64)
        if lengths.shape != (NUM_BONES,):
            raise ShapeMismatchError(f'bone-length vector must have {NUM_BONES} entries, got {lengths.shape}')
        if not np.all(np.isfinite(lengths)):
            raise InvalidInputError('bone lengths must be finite')
        if np.any(lengths < 0):
            raise InvalidInputError('bone lengths must be nonnegative')
        lengths.setflags(write=False)
        object.__setattr__(self, 'lengths', lengths)

    def __eq__(self, other):
        if not isinstance(other, BoneLengthVector):
            return NotImplemented
        return np.array_equal(self.lengths, other.lengths)

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class TPose:
    joints: np.ndarray

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, 3):
            raise ShapeMismatchError(f'T-pose must be ({NUM_JOINTS}, 3), got {joints.shape}')
        joints.setflags(write=False)
        object.__setattr__(self, 'joints', joints)

    def flatten(self):
        """All 25 joints as 75 reals; the root row is the origin."""
        return self.joints.reshape(-1).copy()


@lru_cache(maxsize=None)
def canonical_topology():
    edges = tuple((PARENTS[child], child) for child in range(1, NUM_JOINTS))
    directions = np.array([_CHILD_DIRECTIONS[child] for _, child in edges], dtype=np.float64)
    return SkeletonTopology(
        joint_names=JOINT_NAMES,
        parent_index=PARENTS,
        bone_edges=edges,
        bone_directions=directions,
    )


def _check_frames(joints, topo):
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape[-2:] != (topo.num_joints, 3):
        raise ShapeMismatchError(f'expected (..., {topo.num_joints}, 3) joints, got {joints.shape}')
    if not np.all(np.isfinite(joints)):
        raise InvalidInputError('joint coordinates must be finite')
    return joints


def bone_lengths_array(joints, topo):
    """Per-edge Euclidean lengths for any leading batch shape: (..., J, 3) -> (..., B)."""
    joints = _check_frames(joints, topo)
    parents = np.array([p for p, _ in topo.bone_edges])
    children = np.array([c for _, c in topo.bone_edges])
    return np.linalg.norm(joints[..., children, :] - joints[..., parents, :], axis=-1)


def extract_bone_lengths(tpose, topo):
    return BoneLengthVector(bone_lengths_array(tpose.joints, topo))


def frame_bone_lengths(local_joints, topo):
    local_joints = np.asarray(local_joints)
    if local_joints.shape != (topo.num_joints, 3):
        raise ShapeMismatchError(f'a frame must be ({topo.num_joints}, 3), got {local_joints.shape}')
    return BoneLengthVector(bone_lengths_array(local_joints, topo))


def forward_kinematics_tpose(b, topo):
    """Place the root at the origin and walk the tree along the canonical directions.

    Zero-length bones are legal, so directions are used as given and never
    renormalized by length.
    """
    lengths = b.lengths if isinstance(b, BoneLengthVector) else BoneLengthVector(b).lengths
    joints = np.zeros((topo.num_joints, 3), dtype=np.float64)
    bone_for_child = {child: e for e, (_, child) in enumerate(topo.bone_edges)}
    for joint in topo.dfs_order():
        parent = topo.parent_index[joint]
        if parent < 0:
            continue
        e = bone_for_child[joint]
        joints[joint] = joints[parent] + lengths[e] * topo.bone_directions[e]
    return TPose(joints)


def retarget_to_unified(src_joints, joint_map, scale, virtual=(), topo=None):
    """Copy a foreign skeleton onto the unified topology.

    ``joint_map`` is a sequence of ``(src_index, unified_index)`` pairs. Unified joints
    listed in ``virtual`` (e.g. the tail of a human) are placed at the output pelvis.
    Accepts one frame ``(N_src, 3)`` or a sequence ``(L, N_src, 3)``.
    """
    topo = topo or canonical_topology()
    if not scale > 0:
        raise InvalidInputError(f'scale must be positive, got {scale}')
    src = np.asarray(src_joints, dtype=np.float64)
    single = src.ndim == 2
    if single:
        src = src[None]
    if src.ndim != 3 or src.shape[-1] != 3:
        raise ShapeMismatchError(f'source joints must be (L, N, 3) or (N, 3), got {np.shape(src_joints)}')
    if not np.all(np.isfinite(src)):
        raise InvalidInputError('source joint coordinates must be finite')

    mapping = {}
    for src_index, unified_index in joint_map:
        if not 0 <= unified_index < topo.num_joints:
            raise InvalidInputError(f'unified index {unified_index} out of range')
        if not 0 <= src_index < src.shape[1]:
            raise InvalidInputError(f'source index {src_index} out of range')
        mapping[unified_index] = src_index
    virtual = set(virtual)
    missing = [j for j in range(topo.num_joints) if j not in mapping and j not in virtual]
    if missing:
        names = ', '.join(topo.joint_names[j] for j in missing)
        raise MappingIncompleteError(f'unmapped non-virtual joints: {names}')
    if topo.root not in mapping:
        raise MappingIncompleteError('the pelvis cannot be virtual')

    out = np.empty((src.shape[0], topo.num_joints, 3), dtype=np.float64)
    for unified_index, src_index in mapping.items():
        out[:, unified_index] = src[:, src_index] * scale
    for joint in virtual - set(mapping):
        out[:, joint] = out[:, topo.root]
    return out[0] if single else out
