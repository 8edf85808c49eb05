"""Desk-scale training runs. Slow: run with ``pytest -m slow``."""
import json
import os

import numpy as np
import pytest

from cgae import reconstruct_mean, sample_tpose
from checkpoint import ModelBundle
from config import run_config_from_dict
from dataset import build_toy_dataset, make_splits, select
from generator import cross_species_transition, generate_motion
from mcm import mcm_predict
from metrics import evaluate_generation, mme, seam_continuity
from motion_ae import DOWNSAMPLE, ae_decode, ae_encode
from skeleton import canonical_topology, extract_bone_lengths, forward_kinematics_tpose
from training import run_stage

pytestmark = pytest.mark.slow

STAGES = ('cgae', 'ae', 'mcm', 'gen', 'matcher')


def _read_log(run_dir, stage):
    with open(os.path.join(run_dir, f'{stage}.jsonl')) as f:
        return [json.loads(line) for line in f]


def _reconstruction_mme(ae, records):
    return float(np.mean([mme(ae_decode(ae, ae_encode(ae, r.motion), r.length), r.tpose_bone_lengths)
                          for r in records]))


@pytest.fixture(scope='module')
def toy_split():
    species, records = build_toy_dataset(seed=0)
    holdout = [species[-1].name, species[-2].name]
    split = make_splits(records, holdout, seed=0)
    return records, split


@pytest.fixture(scope='module')
def trained(toy_split, tmp_path_factory):
    records, split = toy_split
    run_dir = str(tmp_path_factory.mktemp('desk'))
    bundle = ModelBundle(run_config_from_dict({'run_dir': run_dir}))
    train = select(records, split.train)
    for stage in STAGES:
        run_stage(bundle, stage, train)
    return bundle


def test_ae_reconstruction(trained, toy_split):
    records, split = toy_split
    log = _read_log(trained.config.run_dir, 'ae')
    assert np.mean([row['mse'] for row in log[-20:]]) * 5 <= log[0]['mse']
    assert _reconstruction_mme(trained.ae, select(records, split.test)) <= 0.05


def test_cgae_reconstructs_train_species(trained, toy_split):
    records, split = toy_split
    seen = {r.species_name: r.tpose_bone_lengths for r in select(records, split.train)}
    for name, b in seen.items():
        c = trained.species_provider.species_embed(name)
        recon = reconstruct_mean(trained.cgae, b, c)
        assert np.linalg.norm(recon - b.lengths) < 0.05 * np.linalg.norm(b.lengths)


def test_mcm_reads_bone_lengths_from_latents(trained, toy_split):
    records, split = toy_split
    errors = [np.abs(mcm_predict(trained.mcm, ae_encode(trained.ae, r.motion)) - r.tpose_bone_lengths.lengths)
              for r in select(records, split.test)]
    assert np.mean(errors) < 0.02


def test_sampled_tposes_are_plausible_for_seen_species(trained, toy_split):
    records, split = toy_split
    topo = canonical_topology()
    seen = {r.species_name: r.tpose_bone_lengths for r in select(records, split.train)}
    for name, b in seen.items():
        c = trained.species_provider.species_embed(name)
        for seed in range(3):
            sampled = extract_bone_lengths(sample_tpose(trained.cgae, c, seed, topo), topo).lengths
            present = b.lengths > 0
            ratio = sampled[present] / b.lengths[present]
            assert np.all((ratio >= 0.5) & (ratio <= 2.0)), name


def test_generation_is_morphologically_consistent(trained, toy_split):
    records, split = toy_split
    topo = canonical_topology()
    test = select(records, split.test)[:32]
    seen = [(generate_motion(trained, r.captions[0], r.species_name, r.length, seed=j), r.captions[0],
             r.tpose_bone_lengths) for j, r in enumerate(test)]
    report = evaluate_generation(seen, [r.motion for r in test], trained.matcher, trained.text_provider,
                                 pool_size=32, top_k=3)
    assert report['mme'] <= 0.08
    assert report['r_precision']['top1'] >= 9 / 32

    unseen = []
    for j, r in enumerate(select(records, split.unseen_test)[:32]):
        motion, tpose = generate_motion(trained, r.captions[0], r.species_name, r.length, seed=j,
                                        return_tpose=True)
        unseen.append(mme(motion, extract_bone_lengths(tpose, topo)))
    assert np.mean(unseen) <= 1.5 * report['mme']


def test_transition_seam_is_smooth(trained, toy_split):
    records, split = toy_split
    test = select(records, split.test)
    a, b = test[0], test[1]
    tpose = forward_kinematics_tpose(b.tpose_bone_lengths, canonical_topology())
    gap = 4
    motion = cross_species_transition(trained, a.motion, b.motion, gap, b.captions[0], tpose, seed=0)
    Ta = a.length // DOWNSAMPLE
    seams = [DOWNSAMPLE * Ta - 1, DOWNSAMPLE * (Ta + gap) - 1]
    assert seam_continuity(motion, seams) <= 3.0


@pytest.mark.parametrize('section, field', [('ae', 'lambda_morph_recon'), ('gen', 'lambda_morph_guide')])
def test_morphological_losses_lower_mme(toy_split, tmp_path, section, field):
    records, split = toy_split
    train = select(records, split.train)
    test = select(records, split.test)[:16]

    def score(weight, seed):
        cfg = run_config_from_dict({'seed': seed, 'run_dir': str(tmp_path / f'{weight}_{seed}'),
                                    section: {field: weight}})
        bundle = ModelBundle(cfg)
        stages = ('ae',) if section == 'ae' else ('cgae', 'ae', 'mcm', 'gen')
        for stage in stages:
            run_stage(bundle, stage, train)
        if section == 'ae':
            return _reconstruction_mme(bundle.ae, test)
        return float(np.mean([mme(generate_motion(bundle, r.captions[0], r.species_name, r.length, seed=j),
                                  r.tpose_bone_lengths) for j, r in enumerate(test)]))

    default = getattr(getattr(run_config_from_dict({}), section), field)
    with_loss = np.mean([score(default, seed) for seed in range(3)])
    without = np.mean([score(0.0, seed) for seed in range(3)])
    assert without > with_loss
