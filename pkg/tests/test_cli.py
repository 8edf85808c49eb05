import json
import os

import numpy as np
import pytest
import torch

import cli
from checkpoint import ModelBundle
from config import TestingConfig
from dataset import read_container, read_split_manifest
from errors import NumericError

STAGE_ORDER = ('cgae', 'ae', 'mcm', 'gen', 'matcher')


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    """A two-species container, its split and a checkpoint with every stage trained."""
    root = tmp_path_factory.mktemp('cli')
    run_config = root / 'micro.json'
    run_config.write_text(json.dumps(TestingConfig.RUN_OVERRIDES))
    container = root / 'toy.umo4'
    base = ['--config', run_config, '--run-dir', root / 'run']

    assert _run(*base, 'dataset', 'gen', '--seed', 0, '--species', 2, '--records-per-gait', 2,
                '--out', container) == 0
    records, _, _ = read_container(container)
    holdout = sorted({r.species_name for r in records})[-1]
    assert _run(*base, 'dataset', 'split', '--container', container, '--holdout', holdout) == 0
    manifest = root / 'toy_split.json'
    checkpoint = root / 'model.umck'
    for stage in STAGE_ORDER:
        assert _run(*base, 'train', stage, '--container', container, '--manifest', manifest,
                    '--checkpoint', checkpoint) == 0
    return {'root': root, 'base': base, 'container': container, 'manifest': manifest,
            'checkpoint': checkpoint, 'records': records, 'holdout': holdout}


def test_dataset_gen_is_byte_identical(workspace):
    again = workspace['root'] / 'again.umo4'
    assert _run(*workspace['base'], 'dataset', 'gen', '--seed', 0, '--species', 2, '--records-per-gait', 2,
                '--workers', 2, '--out', again) == 0
    assert again.read_bytes() == workspace['container'].read_bytes()


def test_split_holds_out_a_species(workspace):
    split = read_split_manifest(workspace['manifest'])
    by_id = {r.record_id: r for r in workspace['records']}
    assert {by_id[i].species_name for i in split.unseen_test} == {workspace['holdout']}
    assert workspace['holdout'] not in {by_id[i].species_name for i in split.train}


def test_inspect_writes_csv(workspace, capsys):
    csv_path = workspace['root'] / 'inspect.csv'
    assert _run('dataset', 'inspect', '--container', workspace['container'], '--manifest', workspace['manifest'],
                '--csv', csv_path) == 0
    assert csv_path.exists()
    assert f'{len(workspace["records"])} records' in capsys.readouterr().out


def test_training_wrote_step_logs(workspace):
    for stage in STAGE_ORDER:
        assert (workspace['root'] / 'run' / f'{stage}.jsonl').exists()


def test_zero_steps_keeps_the_initialization(workspace, tmp_path):
    checkpoint = tmp_path / 'zero.umck'
    assert _run(*workspace['base'], 'train', 'ae', '--container', workspace['container'],
                '--checkpoint', checkpoint, '--steps', 0) == 0
    trained = ModelBundle.load(checkpoint)
    fresh = ModelBundle(trained.config)
    for key, value in fresh.ae.state_dict().items():
        if key not in ('mean', 'std'):
            assert torch.equal(trained.ae.state_dict()[key], value)


def test_dump_latents(workspace):
    out = workspace['root'] / 'latents.npz'
    assert _run('dump-latents', '--checkpoint', workspace['checkpoint'], '--container', workspace['container'],
                '--out', out) == 0
    assert out.exists()


def test_generate_writes_a_container(workspace):
    out = workspace['root'] / 'generated.umo4'
    assert _run('generate', '--checkpoint', workspace['checkpoint'], '--caption', 'the wolf runs forward',
                '--species', 'wolf', '--length', 40, '--seed', 3, '--out', out) == 0
    records, _, _ = read_container(out)
    assert len(records) == 1
    assert records[0].length == 40
    assert records[0].species_name == 'wolf'


def test_transition_reports_seams(workspace, capsys):
    a, b = workspace['records'][0], workspace['records'][1]
    out = workspace['root'] / 'transition.umo4'
    assert _run('transition', '--checkpoint', workspace['checkpoint'], '--caption', 'it turns around',
                '--container', workspace['container'], '--record-a', a.record_id, '--record-b', b.record_id,
                '--gap', 2, '--out', out) == 0
    payload = json.loads(capsys.readouterr().out)
    ta = a.length // 4
    assert payload['seams'] == [4 * ta - 1, 4 * (ta + 2) - 1]
    assert payload['seam_ratio'] >= 0


def test_eval_with_repeats_writes_summary(workspace):
    out = workspace['root'] / 'eval.json'
    assert _run('eval', '--checkpoint', workspace['checkpoint'], '--container', workspace['container'],
                '--manifest', workspace['manifest'], '--repeats', 2, '--out', out) == 0
    document = json.loads(out.read_text())
    assert len(document['repeats']) == 2
    assert {'seen', 'unseen', 'reconstruction'} <= set(document['repeats'][0])
    assert 'mme' in document['repeats'][0]['unseen']
    assert (workspace['root'] / 'eval_summary.csv').exists()
    assert 'unseen.mme' in document['summary']


def test_retarget(tmp_path):
    src = np.random.default_rng(0).normal(size=(5, 24, 3))
    np.save(tmp_path / 'src.npy', src)
    (tmp_path / 'map.json').write_text(json.dumps([[i, i] for i in range(24)]))
    out = tmp_path / 'out.npy'
    assert _run('retarget', '--input', tmp_path / 'src.npy', '--map', tmp_path / 'map.json', '--scale', 2.0,
                '--virtual', 24, '--out', out) == 0
    result = np.load(out)
    assert result.shape == (5, 25, 3)
    assert np.allclose(result[:, :24], 2.0 * src)
    assert np.allclose(result[:, 24], result[:, 0])


def test_export_plot(workspace, tmp_path):
    record = workspace['records'][0]
    assert _run('export-plot', '--container', workspace['container'], '--record', record.record_id,
                '--seams', '10,20', '--out-dir', tmp_path) == 0
    assert (tmp_path / f'{record.record_id}_joints.png').exists()
    assert (tmp_path / f'{record.record_id}_seams.png').exists()


# --- exit codes ----------------------------------------------------------------------

def test_unknown_config_key_exits_2(tmp_path, workspace, capsys):
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps({'gen': {'bogus': 1}}))
    code = _run('--config', bad, 'train', 'cgae', '--container', workspace['container'],
                '--checkpoint', tmp_path / 'new.umck')
    assert code == cli.EXIT_CONFIG
    assert 'error[config]' in capsys.readouterr().err


def test_missing_container_exits_3(tmp_path):
    assert _run('dataset', 'inspect', '--container', tmp_path / 'missing.umo4') == cli.EXIT_IO


def test_corrupt_container_exits_3(tmp_path):
    path = tmp_path / 'corrupt.umo4'
    path.write_bytes(b'XXXX' + bytes(16))
    assert _run('dataset', 'inspect', '--container', path) == cli.EXIT_IO


def test_numeric_failure_exits_4(tmp_path, workspace, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise NumericError('loss diverged', {'stage': 'ae', 'step': 7})

    monkeypatch.setattr(cli, 'run_stage', explode)
    code = _run(*workspace['base'], 'train', 'ae', '--container', workspace['container'],
                '--checkpoint', tmp_path / 'new.umck')
    assert code == cli.EXIT_NUMERIC
    assert '"step": 7' in capsys.readouterr().err
    assert not os.path.exists(tmp_path / 'new.umck')


def test_unknown_holdout_species_exits_5(workspace, tmp_path):
    code = _run('dataset', 'split', '--container', workspace['container'], '--holdout', 'dragon',
                '--out', tmp_path / 'split.json')
    assert code == cli.EXIT_INVALID


def test_undecodable_caption_exits_3(workspace, tmp_path, capsys):
    data = workspace['container'].read_bytes()
    at = data.index(workspace['records'][0].captions[0].encode('utf-8'))
    path = tmp_path / 'garbled.umo4'
    path.write_bytes(data[:at] + b'\xff' + data[at + 1:])
    assert _run('dataset', 'inspect', '--container', path) == cli.EXIT_IO
    assert 'error[io]' in capsys.readouterr().err
