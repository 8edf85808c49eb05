"""Essential-feature frame representation (76 values per frame).

Layout of one frame::

    [0]      root rotation velocity (rad/frame, yaw about +y)
    [1:3]    root linear velocity (x, z) in the yaw-aligned root frame (m/frame)
    [3]      root height (world y, m)
    [4:76]   joints 1..24 in the root-local frame: x/z relative to the root and
             rotated by -yaw, y kept absolute

Because y stays absolute, a frame is rebuilt with the root at (0, height, 0).
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from errors import InvalidInputError, ShapeMismatchError, TooShortError
from skeleton import NUM_JOINTS, bone_lengths_array, canonical_topology

logger = logging.getLogger(__name__)

FEATURE_DIM = NUM_JOINTS * 3 + 1
ROT_VEL = 0
LIN_VEL = slice(1, 3)
ROOT_HEIGHT = 3
LOCAL_JOINTS = slice(4, FEATURE_DIM)
STD_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class MotionSequence:
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if not np.issubdtype(frames.dtype, np.floating):
            frames = frames.astype(np.float64)
        if frames.ndim != 2 or frames.shape[1] != FEATURE_DIM:
            raise ShapeMismatchError(f'motion frames must be (L, {FEATURE_DIM}), got {frames.shape}')
        if frames.shape[0] < 1:
            raise TooShortError('a motion sequence needs at least one frame')
        if not np.all(np.isfinite(frames)):
            raise InvalidInputError('motion features must be finite')
        object.__setattr__(self, 'frames', frames)

    @property
    def length(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.frames.dtype == other.frames.dtype and np.array_equal(self.frames, other.frames)

    __hash__ = object.__hash__


@dataclass(frozen=True, eq=False)
class GlobalMotion:
    joints_world: np.ndarray
    root_yaw: np.ndarray

    def __post_init__(self):
        joints = np.asarray(self.joints_world, dtype=np.float64)
        yaw = np.asarray(self.root_yaw, dtype=np.float64)
        if joints.ndim != 3 or joints.shape[1:] != (NUM_JOINTS, 3):
            raise ShapeMismatchError(f'world joints must be (L, {NUM_JOINTS}, 3), got {joints.shape}')
        if yaw.shape != (joints.shape[0],):
            raise ShapeMismatchError('root_yaw must have one entry per frame')
        if not (np.all(np.isfinite(joints)) and np.all(np.isfinite(yaw))):
            raise InvalidInputError('global motion must be finite')
        object.__setattr__(self, 'joints_world', joints)
        object.__setattr__(self, 'root_yaw', yaw)

    @property
    def length(self):
        return self.joints_world.shape[0]


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (FEATURE_DIM,) or std.shape != (FEATURE_DIM,):
            raise ShapeMismatchError(f'norm stats must be {FEATURE_DIM}-vectors')
        if np.any(std < STD_FLOOR):
            raise InvalidInputError(f'std entries must be >= {STD_FLOOR}')
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    __hash__ = object.__hash__


def rotate_y(xz, yaw):
    """Rotate planar (x, z) vectors by ``yaw`` about +y. ``yaw`` broadcasts over leading axes."""
    c, s = np.cos(yaw), np.sin(yaw)
    x, z = xz[..., 0], xz[..., 1]
    return np.stack([c * x + s * z, -s * x + c * z], axis=-1)


def encode_features(global_motion, topo=None):
    joints = global_motion.joints_world
    yaw = global_motion.root_yaw
    L = global_motion.length
    if L < 2:
        raise TooShortError(f'feature encoding needs at least 2 frames, got {L}')

    root = joints[:, 0]
    rot_vel = np.empty(L)
    rot_vel[:-1] = np.diff(yaw)
    rot_vel[-1] = rot_vel[-2]

    displacement = root[1:, [0, 2]] - root[:-1, [0, 2]]
    lin_vel = np.empty((L, 2))
    lin_vel[:-1] = rotate_y(displacement, -yaw[:-1])
    lin_vel[-1] = lin_vel[-2]

    rel_xz = joints[:, 1:, [0, 2]] - root[:, None, [0, 2]]
    local = np.empty((L, NUM_JOINTS - 1, 3))
    local[..., [0, 2]] = rotate_y(rel_xz, -yaw[:, None])
    local[..., 1] = joints[:, 1:, 1]

    frames = np.concatenate(
        [rot_vel[:, None], lin_vel, root[:, 1:2], local.reshape(L, -1)], axis=1,
    )
    return MotionSequence(frames)


def decode_to_global(seq, initial_yaw=0.0, initial_xz=(0.0, 0.0)):
    frames = np.asarray(seq.frames, dtype=np.float64)
    L = frames.shape[0]
    rot_vel = frames[:, ROT_VEL]
    yaw = np.empty(L)
    yaw[0] = initial_yaw
    yaw[1:] = initial_yaw + np.cumsum(rot_vel[:-1])

    world_step = rotate_y(frames[:, LIN_VEL], yaw)
    root_xz = np.empty((L, 2))
    root_xz[0] = initial_xz
    root_xz[1:] = np.asarray(initial_xz, dtype=np.float64) + np.cumsum(world_step[:-1], axis=0)

    local = frames[:, LOCAL_JOINTS].reshape(L, NUM_JOINTS - 1, 3)
    joints = np.empty((L, NUM_JOINTS, 3))
    joints[:, 0, [0, 2]] = root_xz
    joints[:, 0, 1] = frames[:, ROOT_HEIGHT]
    joints[:, 1:, [0, 2]] = rotate_y(local[..., [0, 2]], yaw[:, None]) + root_xz[:, None]
    joints[:, 1:, 1] = local[..., 1]
    return GlobalMotion(joints, yaw)


def local_frames(seq):
    """(L, 25, 3) joints in the root-local frame with the root at (0, height, 0)."""
    frames = np.asarray(seq.frames, dtype=np.float64)
    L = frames.shape[0]
    joints = np.zeros((L, NUM_JOINTS, 3))
    joints[:, 0, 1] = frames[:, ROOT_HEIGHT]
    joints[:, 1:] = frames[:, LOCAL_JOINTS].reshape(L, NUM_JOINTS - 1, 3)
    return joints


def bone_lengths_per_frame(seq, topo=None):
    return bone_lengths_array(local_frames(seq), topo or canonical_topology())


def local_frames_torch(features):
    """Differentiable counterpart of :func:`local_frames` for (..., 76) tensors."""
    height = features[..., ROOT_HEIGHT:ROOT_HEIGHT + 1]
    zeros = torch.zeros_like(height)
    root = torch.cat([zeros, height, zeros], dim=-1).unsqueeze(-2)
    rest = features[..., LOCAL_JOINTS].reshape(*features.shape[:-1], NUM_JOINTS - 1, 3)
    return torch.cat([root, rest], dim=-2)


def bone_lengths_torch(features, topo=None):
    topo = topo or canonical_topology()
    joints = local_frames_torch(features)
    parents = [p for p, _ in topo.bone_edges]
    children = [c for _, c in topo.bone_edges]
    return torch.linalg.vector_norm(joints[..., children, :] - joints[..., parents, :], dim=-1)


def compute_norm_stats(sequences, floor=STD_FLOOR):
    sequences = list(sequences)
    if not sequences:
        raise InvalidInputError('cannot compute normalization statistics of an empty dataset')
    flat = np.concatenate([np.asarray(s.frames, dtype=np.float64) for s in sequences], axis=0)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), floor)
    return NormStats(mean, std)


def normalize(seq, stats):
    return MotionSequence((np.asarray(seq.frames, dtype=np.float64) - stats.mean) / stats.std)


def denormalize(seq, stats):
    return MotionSequence(np.asarray(seq.frames, dtype=np.float64) * stats.std + stats.mean)
