import numpy as np
import pytest
import torch

from errors import InvalidInputError, ShapeMismatchError, TooShortError
from motion_features import (
    FEATURE_DIM,
    GlobalMotion,
    MotionSequence,
    NormStats,
    bone_lengths_per_frame,
    bone_lengths_torch,
    compute_norm_stats,
    decode_to_global,
    denormalize,
    encode_features,
    local_frames,
    local_frames_torch,
    normalize,
)
from skeleton import NUM_JOINTS, BoneLengthVector, forward_kinematics_tpose


def _random_trajectory(rng, L):
    yaw = np.cumsum(rng.normal(0, 0.05, L)) + rng.uniform(-np.pi, np.pi)
    joints = rng.normal(0, 0.5, (L, NUM_JOINTS, 3))
    joints[:, 0] = np.cumsum(rng.normal(0, 0.03, (L, 3)), axis=0)
    return GlobalMotion(joints, yaw)


def test_feature_layout_width():
    assert FEATURE_DIM == 76


def test_round_trip_reproduces_world_joints():
    rng = np.random.default_rng(0)
    for _ in range(100):
        L = int(rng.integers(2, 60))
        gm = _random_trajectory(rng, L)
        seq = encode_features(gm)
        back = decode_to_global(seq, initial_yaw=gm.root_yaw[0], initial_xz=gm.joints_world[0, 0, [0, 2]])
        assert np.max(np.abs(back.joints_world - gm.joints_world)) <= 1e-6 * L
        assert np.allclose(back.root_yaw, gm.root_yaw)


def test_encode_needs_two_frames():
    gm = GlobalMotion(np.zeros((1, NUM_JOINTS, 3)), np.zeros(1))
    with pytest.raises(TooShortError):
        encode_features(gm)


def test_local_frames_keep_bone_lengths(topo):
    b = BoneLengthVector(np.linspace(0.1, 0.5, 24))
    tpose = forward_kinematics_tpose(b, topo).joints + np.array([0.0, 1.0, 0.0])
    yaw = np.array([0.3, 0.5, 0.9])
    world = np.stack([tpose] * 3)
    world[:, :, 0] += np.arange(3)[:, None]
    seq = encode_features(GlobalMotion(world, yaw))
    assert np.allclose(bone_lengths_per_frame(seq, topo), b.lengths)
    assert np.allclose(local_frames(seq)[0, 0], [0.0, 1.0, 0.0])


def test_torch_helpers_match_numpy(topo):
    frames = np.random.default_rng(1).normal(size=(5, FEATURE_DIM))
    seq = MotionSequence(frames)
    t = torch.as_tensor(frames, dtype=torch.float64)
    assert np.allclose(local_frames_torch(t).numpy(), local_frames(seq))
    assert np.allclose(bone_lengths_torch(t).numpy(), bone_lengths_per_frame(seq, topo))


def test_motion_sequence_validation():
    with pytest.raises(ShapeMismatchError):
        MotionSequence(np.zeros((4, FEATURE_DIM - 1)))
    with pytest.raises(InvalidInputError):
        MotionSequence(np.full((4, FEATURE_DIM), np.nan))


def test_norm_stats_floor_and_round_trip():
    frames = np.random.default_rng(2).normal(size=(20, FEATURE_DIM))
    frames[:, 5] = 3.0
    seqs = [MotionSequence(frames[:10]), MotionSequence(frames[10:])]
    stats = compute_norm_stats(seqs)
    assert stats.std[5] == pytest.approx(1e-6)
    restored = denormalize(normalize(seqs[0], stats), stats)
    assert np.allclose(restored.frames, seqs[0].frames)


def test_norm_stats_reject_small_std():
    with pytest.raises(InvalidInputError):
        NormStats(np.zeros(FEATURE_DIM), np.zeros(FEATURE_DIM))
    with pytest.raises(InvalidInputError):
        compute_norm_stats([])
