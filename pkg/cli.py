"""Command-line entry point: ``python cli.py <command> ...``.

Exit codes: 0 ok, 2 config, 3 io/container, 4 numeric, 5 invalid input.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from cgae import sample_tpose
from checkpoint import ModelBundle
from config import config as profiles
from config import load_run_config
from dataset import (
    SPLIT_NAMES,
    MotionRecord,
    build_toy_dataset,
    filter_by_length,
    make_splits,
    read_container,
    read_split_manifest,
    records_table,
    select,
    summarize_by_species,
    write_container,
    write_split_manifest,
)
from errors import ConfigError, ContainerError, InvalidInputError, NumericError
from generator import generate_motion, transition_latents
from metrics import aggregate_repeats, evaluate_generation, evaluate_reconstruction, seam_continuity
from motion_ae import DOWNSAMPLE, ae_decode, dump_latents
from motion_features import compute_norm_stats
from skeleton import canonical_topology, extract_bone_lengths, retarget_to_unified
from training import run_stage

logger = logging.getLogger('crossmotion')

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_INVALID = 5


def _run_config(args, overrides=None):
    profile = profiles[os.environ.get('CROSSMOTION_ENV', 'default')]
    merged = dict(profile.RUN_OVERRIDES)
    merged.update(overrides or {})
    cfg = load_run_config(args.config, merged)
    if args.run_dir:
        cfg.run_dir = args.run_dir
    return cfg


def _bundle(args, overrides=None):
    if args.checkpoint and os.path.exists(args.checkpoint):
        bundle = ModelBundle.load(args.checkpoint)
        if args.run_dir:
            bundle.config.run_dir = args.run_dir
        return bundle
    return ModelBundle(_run_config(args, overrides))


def _split_records(container, manifest, name):
    records, _, _ = read_container(container)
    if manifest is None:
        return records
    split = read_split_manifest(manifest)
    return select(records, getattr(split, name))


def _print_json(payload):
    print(json.dumps(payload, indent=2, sort_keys=True, default=float))


# --- dataset -------------------------------------------------------------------------

def cmd_dataset_gen(args):
    cfg = _run_config(args)
    species, records = build_toy_dataset(
        args.seed, args.species, args.records_per_gait, cfg.data.min_length, cfg.data.max_length, args.workers)
    records = filter_by_length(records)
    stats = compute_norm_stats(r.motion for r in records)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_container(args.out, records, canonical_topology(), stats)
    _print_json({'records': len(records), 'species': [s.name for s in species], 'container': args.out})


def cmd_dataset_split(args):
    records, _, _ = read_container(args.container)
    holdout = [s for s in (args.holdout or '').split(',') if s]
    split = make_splits(records, holdout, args.seed)
    out = args.out or os.path.splitext(args.container)[0] + '_split.json'
    write_split_manifest(out, split)
    _print_json({name: len(getattr(split, name)) for name in SPLIT_NAMES})


def cmd_dataset_inspect(args):
    records, _, _ = read_container(args.container)
    split = read_split_manifest(args.manifest) if args.manifest else None
    table = records_table(records, split)
    summary = summarize_by_species(table)
    csv_path = args.csv or os.path.splitext(args.container)[0] + '_inspect.csv'
    table.to_csv(csv_path, index=False)
    print(summary.to_string())
    print(f'\n{len(table)} records; per-record table written to {csv_path}')


# --- training ------------------------------------------------------------------------

def cmd_train(args):
    bundle = _bundle(args)
    if args.steps is not None:
        getattr(bundle.config, args.stage).steps = args.steps
    records = _split_records(args.container, args.manifest, 'train')
    if not records:
        raise InvalidInputError('no training records selected')
    run_stage(bundle, args.stage, records, args.seed)
    bundle.save(args.checkpoint)
    _print_json({'stage': args.stage, 'records': len(records), 'checkpoint': args.checkpoint,
                 'log': os.path.join(bundle.config.run_dir, f'{args.stage}.jsonl')})


def cmd_dump_latents(args):
    bundle = ModelBundle.load(args.checkpoint)
    bundle.require('ae')
    records, _, _ = read_container(args.container)
    arrays = dump_latents(bundle.ae, records, args.out)
    _print_json({'records': len(arrays), 'out': args.out})


# --- generation ----------------------------------------------------------------------

def _generation_settings(args, cfg):
    return (args.rounds or cfg.gen.rounds, args.ode_steps or cfg.gen.ode_steps,
            cfg.gen.omega if args.omega is None else args.omega)


def cmd_generate(args):
    bundle = ModelBundle.load(args.checkpoint)
    bundle.require('cgae', 'ae', 'generator')
    R, N, omega = _generation_settings(args, bundle.config)
    motion, tpose = generate_motion(bundle, args.caption, args.species, args.length, args.seed, R, N, omega,
                                    return_tpose=True)
    b = extract_bone_lengths(tpose, canonical_topology())
    record = MotionRecord(f'generated_{args.seed}', motion, (args.caption,), args.species, b)
    write_container(args.out, [record], canonical_topology())
    _print_json({'out': args.out, 'frames': motion.length, 'species': args.species, 'caption': args.caption})


def cmd_transition(args):
    bundle = ModelBundle.load(args.checkpoint)
    bundle.require('cgae', 'ae', 'generator')
    records, _, _ = read_container(args.container)
    by_id = {r.record_id: r for r in records}
    for record_id in (args.record_a, args.record_b):
        if record_id not in by_id:
            raise InvalidInputError(f'record {record_id!r} not found in {args.container}')
    a, b = by_id[args.record_a], by_id[args.record_b]
    species = args.species or b.species_name
    tpose = sample_tpose(bundle.cgae, bundle.species_provider.species_embed(species), args.seed)
    R, N, omega = _generation_settings(args, bundle.config)
    latents, Ta, _ = transition_latents(bundle, a.motion, b.motion, args.gap, args.caption, tpose, args.seed,
                                        R, N, omega)
    motion = ae_decode(bundle.ae, latents, DOWNSAMPLE * latents.length)
    seams = [DOWNSAMPLE * Ta - 1, DOWNSAMPLE * (Ta + args.gap) - 1]
    record = MotionRecord(f'transition_{args.record_a}_{args.record_b}', motion, (args.caption,), species,
                          extract_bone_lengths(tpose, canonical_topology()))
    write_container(args.out, [record], canonical_topology())
    _print_json({'out': args.out, 'frames': motion.length, 'seams': seams,
                 'seam_ratio': seam_continuity(motion, seams)})


# --- evaluation ----------------------------------------------------------------------

def _generate_for(bundle, records, seed, use_sampled_reference):
    cfg = bundle.config
    R, N, omega = cfg.gen.rounds, cfg.gen.ode_steps, cfg.gen.omega
    topo = canonical_topology()
    out = []
    for j, r in enumerate(records):
        motion, tpose = generate_motion(bundle, r.captions[0], r.species_name, r.length, seed * 100003 + j,
                                        R, N, omega, return_tpose=True)
        reference = extract_bone_lengths(tpose, topo) if use_sampled_reference else r.tpose_bone_lengths
        out.append((motion, r.captions[0], reference))
    return out


def run_evaluation(bundle, records, split, repeat_seed):
    cfg = bundle.config.eval
    rng = np.random.default_rng(repeat_seed)
    report = {}
    for name, unseen in (('seen', False), ('unseen', True)):
        pool = select(records, getattr(split, 'unseen_test' if unseen else 'test'))
        if not pool:
            continue
        picked = [pool[i] for i in sorted(rng.choice(len(pool), size=min(cfg.samples, len(pool)), replace=False))]
        generated = _generate_for(bundle, picked, repeat_seed, unseen)
        report[name] = evaluate_generation(generated, [r.motion for r in pool], bundle.matcher, bundle.text_provider,
                                           cfg.pool_size, cfg.top_k, cfg.diversity_pairs, repeat_seed)
    test = select(records, split.test)
    if test:
        report['reconstruction'] = evaluate_reconstruction(bundle.ae, test, bundle.matcher, bundle.text_provider,
                                                           repeat_seed)
    return report


def cmd_eval(args):
    bundle = ModelBundle.load(args.checkpoint)
    bundle.require('cgae', 'ae', 'generator', 'matcher')
    records, _, _ = read_container(args.container)
    split = read_split_manifest(args.manifest)
    repeats = args.repeats or bundle.config.eval.repeats
    reports = [run_evaluation(bundle, records, split, bundle.config.eval.seed + i) for i in range(repeats)]
    out = args.out or os.path.join(bundle.config.run_dir, 'eval.json')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    document = {'repeats': reports, 'config': asdict(bundle.config.eval)}
    if repeats > 1:
        summary = aggregate_repeats(reports)
        summary.to_csv(os.path.splitext(out)[0] + '_summary.csv')
        document['summary'] = summary.to_dict(orient='index')
    with open(out, 'w') as f:
        json.dump(document, f, indent=2, sort_keys=True, default=float)
    _print_json(document.get('summary', reports[0]))


# --- utilities -----------------------------------------------------------------------

def cmd_retarget(args):
    src = np.load(args.input)
    with open(args.map) as f:
        joint_map = [tuple(pair) for pair in json.load(f)]
    virtual = [int(v) for v in (args.virtual or '').split(',') if v]
    out = retarget_to_unified(src, joint_map, args.scale, virtual)
    np.save(args.out, out)
    _print_json({'out': args.out, 'shape': list(out.shape)})


def cmd_export_plot(args):
    from plots import plot_joint_trajectories, plot_seam_continuity

    records, _, _ = read_container(args.container)
    record = records[0] if args.record is None else {r.record_id: r for r in records}.get(args.record)
    if record is None:
        raise InvalidInputError(f'record {args.record!r} not found in {args.container}')
    os.makedirs(args.out_dir, exist_ok=True)
    written = [plot_joint_trajectories(record.motion, os.path.join(args.out_dir, f'{record.record_id}_joints.png'),
                                       title=record.captions[0])]
    seams = [int(s) for s in (args.seams or '').split(',') if s]
    if seams:
        written.append(plot_seam_continuity(record.motion, seams,
                                            os.path.join(args.out_dir, f'{record.record_id}_seams.png')))
    _print_json({'written': written})


def build_parser():
    parser = argparse.ArgumentParser(prog='crossmotion', description='Cross-species text-to-motion toolkit')
    parser.add_argument('--config', help='run configuration JSON')
    parser.add_argument('--run-dir', help='directory for step logs and reports')
    parser.add_argument('-v', '--verbose', action='store_true')
    sub = parser.add_subparsers(dest='command', required=True)

    dataset = sub.add_parser('dataset').add_subparsers(dest='action', required=True)
    p = dataset.add_parser('gen')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--species', type=int, default=8)
    p.add_argument('--records-per-gait', type=int, default=25)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_dataset_gen)
    p = dataset.add_parser('split')
    p.add_argument('--container', required=True)
    p.add_argument('--holdout', help='comma-separated species names')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')
    p.set_defaults(func=cmd_dataset_split)
    p = dataset.add_parser('inspect')
    p.add_argument('--container', required=True)
    p.add_argument('--manifest')
    p.add_argument('--csv')
    p.set_defaults(func=cmd_dataset_inspect)

    p = sub.add_parser('train')
    p.add_argument('stage', choices=('cgae', 'ae', 'mcm', 'gen', 'matcher'))
    p.add_argument('--container', required=True)
    p.add_argument('--manifest')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--steps', type=int)
    p.add_argument('--seed', type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('dump-latents')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--container', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_dump_latents)

    for name, func in (('generate', cmd_generate), ('transition', cmd_transition)):
        p = sub.add_parser(name)
        p.add_argument('--checkpoint', required=True)
        p.add_argument('--caption', required=True)
        p.add_argument('--seed', type=int, default=0)
        p.add_argument('--rounds', type=int)
        p.add_argument('--ode-steps', type=int)
        p.add_argument('--omega', type=float)
        p.add_argument('--out', required=True)
        p.set_defaults(func=func)
        if name == 'generate':
            p.add_argument('--species', required=True)
            p.add_argument('--length', type=int, default=120)
        else:
            p.add_argument('--container', required=True)
            p.add_argument('--record-a', required=True)
            p.add_argument('--record-b', required=True)
            p.add_argument('--gap', type=int, default=4)
            p.add_argument('--species', help='target species (defaults to record b)')

    p = sub.add_parser('eval')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--container', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--repeats', type=int)
    p.add_argument('--out')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('retarget')
    p.add_argument('--input', required=True, help='.npy of shape (L, N_src, 3) or (N_src, 3)')
    p.add_argument('--map', required=True, help='JSON list of [src_index, unified_index] pairs')
    p.add_argument('--scale', type=float, default=1.0)
    p.add_argument('--virtual', help='comma-separated unified joints placed at the pelvis')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser('export-plot')
    p.add_argument('--container', required=True)
    p.add_argument('--record')
    p.add_argument('--seams', help='comma-separated seam frame indices')
    p.add_argument('--out-dir', required=True)
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        args.func(args)
    except ConfigError as exc:
        print(f'error[config]: {exc}', file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ContainerError) as exc:
        print(f'error[io]: {exc}', file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f'error[numeric]: {exc} {json.dumps(exc.diagnostics, default=str)}', file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidInputError as exc:
        print(f'error[input]: {exc}', file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == '__main__':
    sys.exit(main())
