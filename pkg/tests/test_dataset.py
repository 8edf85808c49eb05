import json
import struct

import numpy as np
import pytest

from dataset import (
    CONTAINER_MAGIC,
    GAIT_KINDS,
    DatasetSplit,
    MotionRecord,
    build_toy_dataset,
    decode_container,
    encode_container,
    filter_by_length,
    generate_gait,
    generate_synthetic_species,
    is_admissible_length,
    make_splits,
    read_container,
    read_split_manifest,
    records_table,
    select,
    summarize_by_species,
    write_container,
    write_split_manifest,
)
from errors import (
    ContainerError,
    InvalidInputError,
    MagicMismatchError,
    TruncatedPayloadError,
    UnknownSpeciesError,
    VersionMismatchError,
)
from metrics import mme
from motion_features import LIN_VEL, compute_norm_stats, decode_to_global


def test_species_are_distinct_and_bipeds_have_no_tail(topo):
    species = generate_synthetic_species(0, 8)
    assert len({s.name for s in species}) == 8
    for s in species:
        tail = s.bone_lengths.lengths[topo.tail_bones()]
        if s.theme == 'biped':
            assert np.all(tail == 0.0)
        else:
            assert np.all(tail > 0.0)


def test_species_count_must_allow_a_holdout():
    with pytest.raises(InvalidInputError):
        generate_synthetic_species(0, 1)


@pytest.mark.parametrize('gait', GAIT_KINDS)
def test_generated_gaits_are_rigid(gait, topo):
    species = generate_synthetic_species(1, 2)[1]
    record = generate_gait(species, gait, 60, seed=7)
    assert record.length == 60
    assert record.motion.frames.dtype == np.float32
    assert mme(record.motion, species.bone_lengths, topo) < 1e-5
    assert record.captions
    assert all(species.name.split('_')[0] in c for c in record.captions)


def test_gait_length_bounds():
    species = generate_synthetic_species(0, 2)[0]
    for bad in (18, 300):
        with pytest.raises(InvalidInputError):
            generate_gait(species, 'walk', bad, seed=0)
    with pytest.raises(InvalidInputError):
        generate_gait(species, 'moonwalk', 40, seed=0)


def test_build_is_deterministic_and_worker_independent():
    _, a = build_toy_dataset(5, species_count=2, records_per_gait=1, min_length=24, max_length=30)
    _, b = build_toy_dataset(5, species_count=2, records_per_gait=1, min_length=24, max_length=30, workers=3)
    assert len(a) == 2 * len(GAIT_KINDS)
    assert a == b


def test_length_filter_boundaries(records):
    assert not is_admissible_length(18)
    assert is_admissible_length(19)
    assert is_admissible_length(299)
    assert not is_admissible_length(300)
    assert filter_by_length(records) == records


def test_splits_partition_and_hold_out():
    species, records = build_toy_dataset(0, species_count=4, records_per_gait=4, min_length=24, max_length=30)
    holdout = species[0].name
    split = make_splits(records, [holdout], seed=1)
    ids = split.train + split.val + split.test + split.unseen_test
    assert sorted(ids) == sorted(r.record_id for r in records)
    seen = len(records) - len(split.unseen_test)
    assert len(split.train) == int(0.8 * seen)
    assert len(split.val) == int(0.05 * seen)
    unseen = {r.species_name for r in select(records, split.unseen_test)}
    assert unseen == {holdout}
    assert holdout not in {r.species_name for r in select(records, split.train + split.val + split.test)}
    assert make_splits(records, [holdout], seed=1) == split


def test_unknown_holdout_species(records):
    with pytest.raises(UnknownSpeciesError):
        make_splits(records, ['dragon'], seed=0)


def test_manifest_round_trip(tmp_path, records):
    split = make_splits(records, [], seed=2)
    path = tmp_path / 'split.json'
    write_split_manifest(path, split)
    loaded = read_split_manifest(path)
    for name in ('train', 'val', 'test', 'unseen_test'):
        assert sorted(getattr(loaded, name)) == sorted(getattr(split, name))


def test_container_round_trip_is_byte_exact(tmp_path, records, topo):
    stats = compute_norm_stats(r.motion for r in records)
    path = tmp_path / 'toy.umo4'
    write_container(path, records, topo, stats)
    data = path.read_bytes()
    assert data[:4] == CONTAINER_MAGIC
    loaded, loaded_topo, loaded_stats = read_container(path)
    assert loaded == records
    assert loaded_topo == topo
    assert loaded_stats == stats
    assert encode_container(loaded, loaded_topo, loaded_stats) == data


def test_container_without_stats(records, topo):
    _, _, stats = decode_container(encode_container(records[:2], topo))
    assert stats is None


def test_container_errors(records, topo):
    data = encode_container(records[:1], topo)
    with pytest.raises(MagicMismatchError):
        decode_container(b'XXXX' + data[4:])
    with pytest.raises(VersionMismatchError):
        decode_container(data[:4] + (2).to_bytes(4, 'little') + data[8:])
    with pytest.raises(TruncatedPayloadError):
        decode_container(data[:-3])
    with pytest.raises(ContainerError):
        decode_container(data + b'\x00')


def test_record_needs_a_caption(records):
    r = records[0]
    with pytest.raises(InvalidInputError):
        MotionRecord(r.record_id, r.motion, (), r.species_name, r.tpose_bone_lengths)


def test_inspection_table(records):
    split = make_splits(records, [], seed=0)
    table = records_table(records, split)
    assert len(table) == len(records)
    assert set(table['split']) <= {'train', 'val', 'test'}
    summary = summarize_by_species(table)
    assert summary['records'].sum() == len(records)
    assert list(summary.columns[:4]) == ['records', 'mean_length', 'min_length', 'max_length']


def test_empty_split_manifest():
    assert DatasetSplit().as_manifest() == {}


def test_idle_stands_still_and_left_turns_keep_turning(topo):
    species = generate_synthetic_species(2, 2)[1]
    idle = generate_gait(species, 'idle', 50, seed=3)
    assert np.allclose(idle.motion.frames[:, LIN_VEL], 0.0, atol=1e-6)

    turn = generate_gait(species, 'turn_left', 50, seed=3)
    yaw = decode_to_global(turn.motion).root_yaw
    assert np.all(np.diff(yaw) > 0)


def test_hundred_seen_records_split_80_5_15(records):
    r = records[0]
    many = [MotionRecord(f'{i:03d}', r.motion, r.captions, r.species_name, r.tpose_bone_lengths)
            for i in range(100)]
    split = make_splits(many, [], seed=0)
    assert (len(split.train), len(split.val), len(split.test), len(split.unseen_test)) == (80, 5, 15, 0)


def test_invalid_utf8_caption_is_a_container_error(records, topo):
    data = encode_container(records[:1], topo)
    at = data.index(records[0].captions[0].encode('utf-8'))
    corrupt = data[:at] + b'\xff' + data[at + 1:]
    with pytest.raises(ContainerError, match='UTF-8'):
        decode_container(corrupt)


def test_invalid_stored_topology_is_a_container_error(records, topo):
    data = encode_container(records[:1], topo)
    at = data.index(topo.bone_directions.astype('<f8').tobytes())
    corrupt = data[:at] + struct.pack('<d', 2.0) + data[at + 8:]
    with pytest.raises(ContainerError, match='topology'):
        decode_container(corrupt)


def test_unknown_split_label_is_rejected(tmp_path):
    path = tmp_path / 'split.json'
    path.write_text(json.dumps({'00000_wolf_walk_1': 'train', '00001_wolf_run_2': 'holdout'}))
    with pytest.raises(ContainerError, match='holdout'):
        read_split_manifest(path)
