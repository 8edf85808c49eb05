"""Stage training loops shared by the CLI.

Each loop is a pure function of (model state, records, stage config, seed): batches are
drawn from a seeded numpy generator and noise from a seeded torch generator.
"""
import json
import logging
import os
import random

import numpy as np
import torch
from tqdm import tqdm

from cgae import cgae_train_step
from errors import NumericError
from generator import collate_generator_batch, gen_train_step
from mcm import collate_latents, mcm_train_step, parameter_checksum
from metrics import train_toy_matcher
from motion_ae import ae_encode, ae_train_step, collate_motions
from motion_features import compute_norm_stats
from optimization import make_optimizer
from skeleton import canonical_topology, forward_kinematics_tpose

logger = logging.getLogger(__name__)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


class StepLogger:
    """Append one JSON object per training step to ``<run_dir>/<stage>.jsonl``."""

    def __init__(self, run_dir, stage):
        os.makedirs(run_dir, exist_ok=True)
        self.stage = stage
        self.path = os.path.join(run_dir, f'{stage}.jsonl')
        self._file = open(self.path, 'w')

    def log(self, step, **values):
        record = {'stage': self.stage, 'step': int(step)}
        record.update(values)
        self._file.write(json.dumps(record, sort_keys=True) + '\n')

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _progress(steps, stage):
    return tqdm(range(steps), desc=stage, disable=steps == 0, leave=False)


def _species_tensors(records, species_provider, dtype=torch.float32):
    """One (bone lengths, condition) row per distinct species, in name order."""
    by_species = {}
    for r in records:
        by_species.setdefault(r.species_name, r.tpose_bone_lengths.lengths)
    names = sorted(by_species)
    b = torch.as_tensor(np.stack([by_species[n] for n in names]), dtype=dtype)
    c = torch.as_tensor(np.stack([species_provider.species_embed(n).vector for n in names]), dtype=dtype)
    return names, b, c


def train_cgae(bundle, records, seed, step_logger=None):
    cfg = bundle.config.cgae
    model = bundle.cgae
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    names, b, c = _species_tensors(records, bundle.species_provider)
    optimizer = make_optimizer(model.parameters(), cfg.lr)
    model.train()
    for step in _progress(cfg.steps, 'cgae'):
        metrics = cgae_train_step(model, optimizer, b, c, generator, cfg.beta, step)
        if step_logger is not None:
            step_logger.log(step, **metrics)
    model.eval()
    bundle.present.add('cgae')
    bundle.optimizers['cgae'] = optimizer.state_dict()
    bundle.meta['species'] = sorted(set(bundle.meta.get('species', [])) | set(names))
    logger.info('cgae trained for %d steps on %d species', cfg.steps, len(names))
    return model


def train_ae(bundle, records, seed, step_logger=None):
    cfg = bundle.config.ae
    model = bundle.ae
    if cfg.normalize_features:
        model.set_stats(compute_norm_stats(r.motion for r in records))
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    optimizer = make_optimizer(model.parameters(), cfg.lr)
    model.train()
    for step in _progress(cfg.steps, 'ae'):
        picked = rng.choice(len(records), size=min(cfg.batch_size, len(records)), replace=False)
        x, mask = collate_motions([records[i].motion for i in picked])
        metrics = ae_train_step(model, optimizer, x, mask, cfg.lambda_morph_recon, step)
        if step_logger is not None:
            step_logger.log(step, **metrics)
    model.eval()
    bundle.present.add('ae')
    bundle.optimizers['ae'] = optimizer.state_dict()
    return model


def encode_records(ae, records):
    return [ae_encode(ae, r.motion) for r in records]


def train_mcm(bundle, records, seed, step_logger=None):
    bundle.require('ae')
    cfg = bundle.config.mcm
    model = bundle.mcm
    latents = encode_records(bundle.ae, records)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model.requires_grad_(True)
    optimizer = make_optimizer(model.parameters(), cfg.lr)
    model.train()
    for step in _progress(cfg.steps, 'mcm'):
        picked = rng.choice(len(records), size=min(cfg.batch_size, len(records)), replace=False)
        z, lengths = collate_latents([latents[i] for i in picked])
        b = torch.as_tensor(np.stack([records[i].tpose_bone_lengths.lengths for i in picked]), dtype=z.dtype)
        metrics = mcm_train_step(model, optimizer, z, b, lengths, step)
        if step_logger is not None:
            step_logger.log(step, **metrics)
    model.freeze()
    bundle.present.add('mcm')
    bundle.optimizers['mcm'] = optimizer.state_dict()
    return model


def train_generator(bundle, records, seed, step_logger=None):
    bundle.require('ae')
    cfg = bundle.config.gen
    model = bundle.generator
    mcm = None
    if cfg.lambda_morph_guide > 0:
        bundle.require('mcm')
        mcm = bundle.mcm.freeze()
    checksum = parameter_checksum(bundle.mcm)

    topo = canonical_topology()
    latents = encode_records(bundle.ae, records)
    tposes = [forward_kinematics_tpose(r.tpose_bone_lengths, topo) for r in records]
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer = make_optimizer(model.parameters(), cfg.lr)
    model.train()
    for step in _progress(cfg.steps, 'gen'):
        picked = rng.choice(len(records), size=min(cfg.batch_size, len(records)), replace=False)
        captions = [records[i].captions[rng.integers(len(records[i].captions))] for i in picked]
        batch = collate_generator_batch(
            [latents[i] for i in picked],
            [tposes[i] for i in picked],
            [bundle.text_provider.text_features(c) for c in captions],
            [records[i].tpose_bone_lengths for i in picked],
        )
        metrics = gen_train_step(model, optimizer, batch, rng, generator, mcm, cfg.lambda_morph_guide,
                                 cfg.cond_drop_prob, step)
        if step_logger is not None:
            step_logger.log(step, **metrics)
    model.eval()
    if parameter_checksum(bundle.mcm) != checksum:
        raise NumericError('MCM parameters changed during generator training', {'stage': 'gen'})
    bundle.present.add('generator')
    bundle.optimizers['gen'] = optimizer.state_dict()
    return model


def train_matcher(bundle, records, seed, step_logger=None):
    cfg = bundle.config.matcher
    stats = compute_norm_stats(r.motion for r in records)
    matcher = train_toy_matcher(records, bundle.text_provider, stats, cfg.steps, cfg.batch_size, cfg.lr,
                                cfg.temperature, seed, cfg.hidden, cfg.feature_dim, step_logger)
    bundle.matcher.load_state_dict(matcher.state_dict())
    bundle.matcher.eval()
    bundle.present.add('matcher')
    return bundle.matcher


STAGES = {
    'cgae': train_cgae,
    'ae': train_ae,
    'mcm': train_mcm,
    'gen': train_generator,
    'matcher': train_matcher,
}


def run_stage(bundle, stage, records, seed=None):
    seed = bundle.config.seed if seed is None else seed
    seed_everything(seed)
    with StepLogger(bundle.config.run_dir, stage) as step_logger:
        STAGES[stage](bundle, records, seed, step_logger)
    bundle.step += 1
    return bundle
