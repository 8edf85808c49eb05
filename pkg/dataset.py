"""Desk-scale dataset pipeline.

A procedural multi-species gait generator stands in for the real cross-species
corpus. Records are filtered by length, split 80/5/15 with unseen species held out,
and stored in a bit-exact little-endian container (``UMO4``).
"""
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import (
    ContainerError,
    InvalidInputError,
    MagicMismatchError,
    TruncatedPayloadError,
    UnknownSpeciesError,
    VersionMismatchError,
)
from motion_features import FEATURE_DIM, GlobalMotion, MotionSequence, NormStats, encode_features, rotate_y
from skeleton import NUM_BONES, NUM_JOINTS, BoneLengthVector, SkeletonTopology, canonical_topology

logger = logging.getLogger(__name__)

GAIT_KINDS = ('walk', 'run', 'turn_left', 'turn_right', 'idle', 'rear_up')
MIN_LENGTH_EXCLUSIVE = 18
MAX_LENGTH_EXCLUSIVE = 300
SPLIT_FRACTIONS = (0.80, 0.05, 0.15)
SPLIT_NAMES = ('train', 'val', 'test', 'unseen_test')
BONE_RANGE = (0.05, 0.8)

CONTAINER_MAGIC = b'UMO4'
CONTAINER_VERSION = 1

BIPED_NAMES = ('human', 'gorilla', 'chimpanzee', 'gibbon', 'orangutan', 'bonobo', 'siamang')
QUADRUPED_NAMES = ('tiger', 'wolf', 'horse', 'deer', 'fox', 'lion', 'bear', 'goat', 'cheetah', 'elk', 'hyena', 'boar')

# Base bone lengths (m) indexed by bone e = child joint - 1.
_BIPED_TEMPLATE = np.array([
    0.10, 0.12, 0.12, 0.10, 0.12,
    0.09, 0.42, 0.40, 0.14,
    0.09, 0.42, 0.40, 0.14,
    0.14, 0.12, 0.28, 0.25,
    0.14, 0.12, 0.28, 0.25,
    0.0, 0.0, 0.0,
])
_QUADRUPED_TEMPLATE = np.array([
    0.18, 0.18, 0.18, 0.20, 0.18,
    0.08, 0.30, 0.30, 0.10,
    0.08, 0.30, 0.30, 0.10,
    0.10, 0.10, 0.28, 0.26,
    0.10, 0.10, 0.28, 0.26,
    0.20, 0.18, 0.15,
])
_TORSO_BONES = slice(0, 5)
_LIMB_BONES = slice(5, 21)
_TAIL_BONES = slice(21, 24)

CAPTION_TEMPLATES = {
    'walk': (
        'the {s} walks forward',
        'a {s} strolls ahead',
        'the {s} ambles forward at a steady pace',
        'a {s} is walking',
    ),
    'run': (
        'the {s} runs forward',
        'a {s} sprints ahead',
        'the {s} dashes forward quickly',
        'a {s} is running fast',
    ),
    'turn_left': (
        'the {s} turns to the left',
        'a {s} walks and veers left',
        'the {s} circles around to its left',
    ),
    'turn_right': (
        'the {s} turns to the right',
        'a {s} walks and veers right',
        'the {s} circles around to its right',
    ),
    'idle': (
        'the {s} stands still',
        'a {s} idles in place',
        'the {s} waits quietly without moving',
    ),
    'rear_up': (
        'the {s} rears up on its hind legs',
        'a {s} lifts its front body upward',
        'the {s} stands up tall',
    ),
}

# speed as a fraction of leg length per frame, cycles per frame, swing amplitude (rad), yaw rate (rad/frame)
_GAIT_PARAMS = {
    'walk': (0.030, 1 / 30, 0.40, 0.0),
    'run': (0.075, 1 / 15, 0.70, 0.0),
    'turn_left': (0.025, 1 / 30, 0.35, 0.03),
    'turn_right': (0.025, 1 / 30, 0.35, -0.03),
    'idle': (0.0, 1 / 60, 0.03, 0.0),
    'rear_up': (0.0, 1 / 40, 0.10, 0.0),
}


@dataclass(frozen=True, eq=False)
class SpeciesProfile:
    name: str
    bone_lengths: BoneLengthVector
    theme: str

    @property
    def leg_length(self):
        b = self.bone_lengths.lengths
        return float(b[6] + b[7])


@dataclass(frozen=True, eq=False)
class MotionRecord:
    record_id: str
    motion: MotionSequence
    captions: tuple
    species_name: str
    tpose_bone_lengths: BoneLengthVector

    def __post_init__(self):
        captions = tuple(self.captions)
        if not captions:
            raise InvalidInputError(f'record {self.record_id} needs at least one caption')
        object.__setattr__(self, 'captions', captions)

    @property
    def length(self):
        return self.motion.length

    def __eq__(self, other):
        if not isinstance(other, MotionRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.species_name == other.species_name
            and self.captions == other.captions
            and self.tpose_bone_lengths == other.tpose_bone_lengths
            and self.motion == other.motion
        )

    __hash__ = object.__hash__


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    unseen_test: list = field(default_factory=list)

    def as_manifest(self):
        manifest = {}
        for name in SPLIT_NAMES:
            for record_id in getattr(self, name):
                manifest[record_id] = name
        return manifest


# --- synthetic species and gaits -----------------------------------------------------

def generate_synthetic_species(seed, species_count):
    if species_count < 2:
        raise InvalidInputError(f'species_count must be >= 2, got {species_count}')
    rng = np.random.default_rng(seed)
    biped_pool = list(rng.permutation(BIPED_NAMES))
    quadruped_pool = list(rng.permutation(QUADRUPED_NAMES))
    used = {}
    species = []
    for i in range(species_count):
        theme = 'biped' if i % 2 == 0 else 'quadruped'
        pool = biped_pool if theme == 'biped' else quadruped_pool
        base = str(pool[(i // 2) % len(pool)])
        used[base] = used.get(base, 0) + 1
        name = base if used[base] == 1 else f'{base}_{used[base]}'

        template = _BIPED_TEMPLATE if theme == 'biped' else _QUADRUPED_TEMPLATE
        lengths = template * rng.uniform(0.9, 1.1, size=NUM_BONES)
        lengths[_TORSO_BONES] *= rng.uniform(0.7, 1.3)
        lengths[_LIMB_BONES] *= rng.uniform(0.6, 1.4)
        lengths[_TAIL_BONES] *= rng.uniform(0.5, 1.5)
        lengths = np.clip(lengths, *BONE_RANGE)
        if theme == 'biped':
            lengths[_TAIL_BONES] = 0.0
        species.append(SpeciesProfile(name, BoneLengthVector(lengths), theme))
    return species


def _rot_x(v, angle):
    """Rotate (..., 3) vectors about +x; ``angle`` broadcasts over the leading axes."""
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([x + 0 * c, c * y - s * z, s * y + c * z], axis=-1)


def _rot_y(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([c * x + s * z, y + 0 * c, -s * x + c * z], axis=-1)


def _bone_directions(theme, phase, amplitude, L):
    """Per-frame unit direction of every bone, shape (L, 24, 3).

    Directions are built from rotations of axis vectors, so they stay unit length
    and the posed skeleton is rigid by construction.
    """
    ones = np.ones(L)
    up = np.array([0.0, 1.0, 0.0]) * ones[:, None]
    down = -up
    forward = np.array([0.0, 0.0, 1.0]) * ones[:, None]
    back = -forward
    left = np.array([-1.0, 0.0, 0.0]) * ones[:, None]
    right = -left

    swing_l = amplitude * np.sin(phase)
    swing_r = amplitude * np.sin(phase + np.pi)
    knee_l = 0.6 * amplitude * np.maximum(0.0, np.sin(phase + 0.5))
    knee_r = 0.6 * amplitude * np.maximum(0.0, np.sin(phase + np.pi + 0.5))
    sway = 0.05 * amplitude * np.sin(2 * phase)

    d = np.empty((L, NUM_BONES, 3))
    if theme == 'biped':
        trunk = _rot_x(up, sway)
        d[:, 0:3] = trunk[:, None]
        d[:, 3] = trunk
        d[:, 4] = _rot_x(up, -sway)
        arm_l, arm_r = swing_r, swing_l
        fore_l = _rot_x(down, -arm_l)
        fore_r = _rot_x(down, -arm_r)
        elbow_l = _rot_x(down, -arm_l - 0.3 * amplitude)
        elbow_r = _rot_x(down, -arm_r - 0.3 * amplitude)
    else:
        trunk = _rot_x(forward, 0.3 * sway)
        d[:, 0:3] = trunk[:, None]
        d[:, 3] = _rot_x(forward, -0.8 + sway)
        d[:, 4] = _rot_x(forward, -0.2)
        arm_l, arm_r = amplitude * np.sin(phase + np.pi / 2), amplitude * np.sin(phase + 3 * np.pi / 2)
        fore_l = _rot_x(down, -arm_l)
        fore_r = _rot_x(down, -arm_r)
        elbow_l = _rot_x(down, -arm_l + 0.4 * amplitude)
        elbow_r = _rot_x(down, -arm_r + 0.4 * amplitude)

    d[:, 5] = left
    d[:, 6] = _rot_x(down, -swing_l)
    d[:, 7] = _rot_x(down, -swing_l + knee_l)
    d[:, 8] = _rot_x(forward, 0.2 * swing_l)
    d[:, 9] = right
    d[:, 10] = _rot_x(down, -swing_r)
    d[:, 11] = _rot_x(down, -swing_r + knee_r)
    d[:, 12] = _rot_x(forward, 0.2 * swing_r)

    d[:, 13] = left
    d[:, 14] = left
    d[:, 15] = fore_l
    d[:, 16] = elbow_l
    d[:, 17] = right
    d[:, 18] = right
    d[:, 19] = fore_r
    d[:, 20] = elbow_r

    wag = 0.4 * np.sin(2 * phase)
    d[:, 21] = _rot_y(_rot_x(back, 0.3), wag)
    d[:, 22] = _rot_y(_rot_x(back, 0.2), 1.5 * wag)
    d[:, 23] = _rot_y(back, 2.0 * wag)
    return d


def _pose_frames(bone_lengths, directions, topo):
    """Root-relative joint positions (L, 25, 3) from per-frame bone directions."""
    L = directions.shape[0]
    joints = np.zeros((L, NUM_JOINTS, 3))
    for e, (parent, child) in enumerate(topo.bone_edges):
        joints[:, child] = joints[:, parent] + bone_lengths[e] * directions[:, e]
    return joints


def generate_gait(species, gait_kind, length, seed, topo=None):
    if gait_kind not in GAIT_KINDS:
        raise InvalidInputError(f'unknown gait {gait_kind!r}; expected one of {GAIT_KINDS}')
    if not MIN_LENGTH_EXCLUSIVE < length < MAX_LENGTH_EXCLUSIVE:
        raise InvalidInputError(
            f'length must satisfy {MIN_LENGTH_EXCLUSIVE} < L < {MAX_LENGTH_EXCLUSIVE}, got {length}'
        )
    topo = topo or canonical_topology()
    rng = np.random.default_rng(seed)
    speed_frac, freq, amplitude, yaw_rate = _GAIT_PARAMS[gait_kind]
    jitter = rng.uniform(0.85, 1.15)
    t = np.arange(length, dtype=np.float64)
    phase = 2 * np.pi * freq * jitter * t + rng.uniform(0, 2 * np.pi)

    b = species.bone_lengths.lengths
    directions = _bone_directions(species.theme, phase, amplitude * jitter, length)
    posed = _pose_frames(b, directions, topo)

    if gait_kind == 'rear_up':
        pitch = -1.1 * np.sin(np.pi * t / (length - 1))
        posed = _rot_x(posed, pitch[:, None])

    leg = species.leg_length
    bounce = 0.02 * leg * amplitude * np.sin(2 * phase)
    height = 0.95 * leg + bounce

    yaw = rng.uniform(-np.pi, np.pi) + yaw_rate * jitter * t
    speed = speed_frac * leg * jitter
    root_xz = np.empty((length, 2))
    root_xz[0] = rng.uniform(-1.0, 1.0, size=2)
    if length > 1:
        steps = rotate_y(np.tile([0.0, speed], (length - 1, 1)), yaw[:-1])
        root_xz[1:] = root_xz[0] + np.cumsum(steps, axis=0)

    world = np.empty_like(posed)
    world[..., [0, 2]] = rotate_y(posed[..., [0, 2]], yaw[:, None]) + root_xz[:, None]
    world[..., 1] = posed[..., 1] + height[:, None]

    features = encode_features(GlobalMotion(world, yaw), topo)
    motion = MotionSequence(features.frames.astype(np.float32))

    templates = CAPTION_TEMPLATES[gait_kind]
    count = int(rng.integers(1, min(3, len(templates)) + 1))
    chosen = sorted(rng.choice(len(templates), size=count, replace=False))
    spoken_name = species.name.split('_')[0]
    captions = tuple(templates[i].format(s=spoken_name) for i in chosen)

    record_id = f'{species.name}_{gait_kind}_{seed}'
    return MotionRecord(record_id, motion, captions, species.name, species.bone_lengths)


def build_toy_dataset(seed, species_count=8, records_per_gait=25, min_length=40, max_length=120, workers=1):
    """Species list plus ``species_count * len(GAIT_KINDS) * records_per_gait`` records.

    Each record draws from its own seed stream, so ``workers > 1`` changes nothing
    but wall time.
    """
    species = generate_synthetic_species(seed, species_count)
    jobs = [(s, gait) for s in species for gait in GAIT_KINDS for _ in range(records_per_gait)]
    seeds = np.random.SeedSequence(seed).generate_state(len(jobs), dtype=np.uint32)
    length_rng = np.random.default_rng([seed, 1])
    lengths = length_rng.integers(min_length, max_length + 1, size=len(jobs))

    def make(i):
        profile, gait = jobs[i]
        record = generate_gait(profile, gait, int(lengths[i]), int(seeds[i]))
        return MotionRecord(f'{i:05d}_{record.record_id}', record.motion, record.captions,
                            record.species_name, record.tpose_bone_lengths)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(make, range(len(jobs))))
    else:
        records = [make(i) for i in range(len(jobs))]
    logger.info('generated %d records over %d species', len(records), len(species))
    return species, records


# --- filtering and splits ------------------------------------------------------------

def is_admissible_length(length):
    return MIN_LENGTH_EXCLUSIVE < length < MAX_LENGTH_EXCLUSIVE


def filter_by_length(records):
    return [r for r in records if is_admissible_length(r.length)]


def make_splits(records, holdout_species, seed):
    holdout_species = set(holdout_species)
    known = {r.species_name for r in records}
    unknown = holdout_species - known
    if unknown:
        raise UnknownSpeciesError(f'holdout species not in dataset: {sorted(unknown)}')

    unseen = [r.record_id for r in records if r.species_name in holdout_species]
    seen = [r.record_id for r in records if r.species_name not in holdout_species]
    order = np.random.default_rng(seed).permutation(len(seen))
    shuffled = [seen[i] for i in order]
    n_train = math.floor(SPLIT_FRACTIONS[0] * len(shuffled))
    n_val = math.floor(SPLIT_FRACTIONS[1] * len(shuffled))
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        unseen_test=unseen,
    )


def write_split_manifest(path, split):
    with open(path, 'w') as f:
        json.dump(split.as_manifest(), f, indent=2, sort_keys=True)


def read_split_manifest(path):
    with open(path) as f:
        manifest = json.load(f)
    split = DatasetSplit()
    for record_id in sorted(manifest):
        label = manifest[record_id]
        if label not in SPLIT_NAMES:
            raise ContainerError(f'record {record_id!r} has unknown split label {label!r} in {path}')
        getattr(split, label).append(record_id)
    return split


def select(records, record_ids):
    wanted = set(record_ids)
    return [r for r in records if r.record_id in wanted]


# --- inspection ----------------------------------------------------------------------

def records_table(records, split=None):
    manifest = split.as_manifest() if split is not None else {}
    rows = []
    for r in records:
        b = r.tpose_bone_lengths.lengths
        rows.append({
            'record_id': r.record_id,
            'species': r.species_name,
            'length': r.length,
            'captions': len(r.captions),
            'split': manifest.get(r.record_id, 'unassigned'),
            'thigh': b[6],
            'upper_arm': b[15],
            'tail': b[21:24].sum(),
        })
    return pd.DataFrame(rows)


def summarize_by_species(table):
    return table.groupby('species').agg(
        records=('record_id', 'count'),
        mean_length=('length', 'mean'),
        min_length=('length', 'min'),
        max_length=('length', 'max'),
        thigh=('thigh', 'first'),
        upper_arm=('upper_arm', 'first'),
        tail=('tail', 'first'),
    )


# --- binary container ----------------------------------------------------------------

def _pack_str(text):
    data = text.encode('utf-8')
    return struct.pack('<I', len(data)) + data


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f'payload truncated at byte {self.pos} (needed {n} more)')
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self):
        return self.unpack('<I')[0]

    def string(self):
        start = self.pos
        raw = self.take(self.u32())
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise ContainerError(f'invalid UTF-8 in string at byte {start}: {e.reason}') from e

    def array(self, dtype, count):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).copy()

    def done(self):
        if self.pos != len(self.data):
            raise ContainerError(f'{len(self.data) - self.pos} trailing bytes after payload')


def pack_topology(topo):
    parts = [struct.pack('<I', topo.num_joints)]
    parts += [_pack_str(name) for name in topo.joint_names]
    parts.append(struct.pack(f'<{topo.num_joints}i', *topo.parent_index))
    parts.append(struct.pack('<I', topo.num_bones))
    for parent, child in topo.bone_edges:
        parts.append(struct.pack('<II', parent, child))
    parts.append(topo.bone_directions.astype('<f8').tobytes())
    return b''.join(parts)


def unpack_topology(reader):
    n = reader.u32()
    names = tuple(reader.string() for _ in range(n))
    parents = reader.unpack(f'<{n}i')
    n_bones = reader.u32()
    edges = tuple(reader.unpack('<II') for _ in range(n_bones))
    directions = reader.array('<f8', n_bones * 3).reshape(n_bones, 3)
    try:
        return SkeletonTopology(names, tuple(parents), edges, directions.astype(np.float64))
    except (InvalidInputError, IndexError) as e:
        raise ContainerError(f'stored topology is invalid: {e}') from e


def pack_stats(stats):
    if stats is None:
        return struct.pack('<B', 0)
    return (struct.pack('<B', 1) + stats.mean.astype('<f8').tobytes()
            + stats.std.astype('<f8').tobytes())


def unpack_stats(reader):
    (present,) = reader.unpack('<B')
    if not present:
        return None
    mean = reader.array('<f8', FEATURE_DIM).astype(np.float64)
    std = reader.array('<f8', FEATURE_DIM).astype(np.float64)
    try:
        return NormStats(mean, std)
    except InvalidInputError as e:
        raise ContainerError(f'stored norm stats are invalid: {e}') from e


def encode_container(records, topo, stats=None):
    parts = [CONTAINER_MAGIC, struct.pack('<I', CONTAINER_VERSION), pack_topology(topo), pack_stats(stats),
             struct.pack('<I', len(records))]
    for r in records:
        parts.append(_pack_str(r.record_id))
        parts.append(_pack_str(r.species_name))
        parts.append(struct.pack('<I', len(r.captions)))
        parts += [_pack_str(c) for c in r.captions]
        parts.append(r.tpose_bone_lengths.lengths.astype('<f8').tobytes())
        parts.append(struct.pack('<I', r.length))
        parts.append(np.ascontiguousarray(r.motion.frames, dtype='<f4').tobytes())
    return b''.join(parts)


def decode_container(data):
    reader = _Reader(data)
    magic = reader.take(4)
    if magic != CONTAINER_MAGIC:
        raise MagicMismatchError(f'expected magic {CONTAINER_MAGIC!r}, got {magic!r}')
    version = reader.u32()
    if version != CONTAINER_VERSION:
        raise VersionMismatchError(f'unsupported container version {version}')
    topo = unpack_topology(reader)
    stats = unpack_stats(reader)
    records = []
    for _ in range(reader.u32()):
        record_id = reader.string()
        species_name = reader.string()
        captions = tuple(reader.string() for _ in range(reader.u32()))
        lengths = reader.array('<f8', NUM_BONES).astype(np.float64)
        L = reader.u32()
        frames = reader.array('<f4', L * FEATURE_DIM).astype(np.float32).reshape(L, FEATURE_DIM)
        try:
            records.append(MotionRecord(record_id, MotionSequence(frames), captions, species_name,
                                        BoneLengthVector(lengths)))
        except InvalidInputError as e:
            raise ContainerError(f'record {record_id!r} is invalid: {e}') from e
    reader.done()
    return records, topo, stats


def write_container(path, records, topo, stats=None):
    data = encode_container(records, topo, stats)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info('wrote %d records (%d bytes) to %s', len(records), len(data), path)


def read_container(path):
    with open(path, 'rb') as f:
        return decode_container(f.read())
