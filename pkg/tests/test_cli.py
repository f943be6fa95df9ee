import json
import logging

import numpy as np
import pytest

from mural_restoration import cli
from mural_restoration.checkpoint import MissingCheckpointError
from mural_restoration.config import ConfigError, write_config
from mural_restoration.diffusion import NonFiniteError
from mural_restoration.image import Image, write_image
from mural_restoration.manifest import read_manifest
from mural_restoration.path import OutputLockedError
from mural_restoration.pipeline import StageError


@pytest.fixture(autouse=True)
def root_handlers():
    logger = logging.getLogger()
    saved, level = list(logger.handlers), logger.level
    yield
    logger.handlers = saved
    logger.setLevel(level)


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / 'tiny.conf'
    write_config(tiny_config, path)
    return str(path)


@pytest.mark.parametrize('exc,code', [
    (MissingCheckpointError('x.pt', 16), 2),
    (ConfigError('bad', 'T'), 3),
    (NonFiniteError('eps', timestep=3), 4),
    (OutputLockedError('locked'), 5),
    (RuntimeError('other'), 1),
    (StageError('train', MissingCheckpointError('x.pt', 8)), 2),
    (StageError('restore', NonFiniteError('eps')), 4),
])
def test_exit_code(exc, code):
    assert cli.exit_code(exc) == code


def test_extract_contour(tmp_path, config_file):
    data = np.full((8, 8, 3), 0.8)
    data[3, :] = 0.1
    write_image(Image(data), tmp_path / 'in.png')
    code = cli.main(['extract-contour', '--config', config_file,
                     '--input', str(tmp_path / 'in.png'),
                     '--output', str(tmp_path / 'mask.png')])
    assert code == 0
    assert (tmp_path / 'mask.png').is_file()


def test_extract_contour_degenerate(tmp_path, config_file):
    write_image(Image(np.full((4, 4, 3), 0.5)), tmp_path / 'flat.png')
    args = ['extract-contour', '--config', config_file,
            '--input', str(tmp_path / 'flat.png'),
            '--output', str(tmp_path / 'mask.png')]
    assert cli.main(args) == 1
    assert cli.main(args + ['--allow-degenerate']) == 0


def test_invalid_config(tmp_path):
    path = tmp_path / 'bad.conf'
    path.write_text('T = 0\n')
    assert cli.main(['synth', '--config', str(path), '--out',
                     str(tmp_path / 'data')]) == 3


def test_invalid_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv('MURAL_SEED', 'seven')
    assert cli.main(['synth', '--out', str(tmp_path)]) == 3


def test_usage_error():
    with pytest.raises(SystemExit) as e_info:
        cli.main(['restore', '--input', 'x.png'])
    assert e_info.value.code == 2


def test_synth_is_deterministic(tmp_path, config_file):
    for out in ('a', 'b'):
        assert cli.main(['synth', '--config', config_file, '--count', '1',
                         '--out', str(tmp_path / out)]) == 0
    first = tmp_path / 'a' / 'train'
    second = tmp_path / 'b' / 'train'
    for name in ('index.tsv', 'clean/train_0000.png', 'mask/train_0000.png',
                 'damaged/train_0000.png'):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_env_seed_changes_output(tmp_path, config_file, monkeypatch):
    cli.main(['synth', '--config', config_file, '--count', '1',
              '--out', str(tmp_path / 'a')])
    monkeypatch.setenv('MURAL_SEED', '99')
    cli.main(['synth', '--config', config_file, '--count', '1',
              '--out', str(tmp_path / 'b')])
    name = 'train/clean/train_0000.png'
    assert (tmp_path / 'a' / name).read_bytes() != \
        (tmp_path / 'b' / name).read_bytes()


def test_restore_missing_checkpoint(tmp_path, config_file):
    split = tmp_path / 'test'
    write_image(Image(np.full((16, 16, 3), 0.5)), split / 'damaged' / 'x.png')
    write_image(Image(np.zeros((16, 16, 1))), split / 'mask' / 'x.png')
    code = cli.main(['restore', '--config', config_file,
                     '--input', str(split / 'damaged' / 'x.png'),
                     '--checkpoint-dir', str(tmp_path / 'none'),
                     '--output', str(tmp_path / 'out.png')])
    assert code == 2
    manifest = json.loads((tmp_path / 'out.manifest.json').read_text())
    assert manifest['status'] == 'failed: restore'


def test_pipeline_locked(tmp_path, config_file):
    out = tmp_path / 'run'
    out.mkdir()
    (out / '.lock').write_text('1')
    assert cli.main(['pipeline', '--config', config_file,
                     '--out', str(out)]) == 5


def test_pipeline_non_finite(tmp_path, config_file, mocker):
    mocker.patch('mural_restoration.cli.run_pipeline',
                 side_effect=StageError('train', NonFiniteError('loss')))
    assert cli.main(['pipeline', '--config', config_file,
                     '--out', str(tmp_path)]) == 4


def test_train_overrides(tmp_path, config_file, mocker):
    train = mocker.patch('mural_restoration.cli.train_denoisers')
    code = cli.main(['train', '--config', config_file,
                     '--crops', str(tmp_path / 'crops'),
                     '--checkpoint-dir', str(tmp_path / 'ckpt'),
                     '--scale', '8', '--steps', '7', '--lambda', '0.5'])
    assert code == 0
    config = train.call_args.args[0]
    assert config.train_steps == 7
    assert config.lambda_reward == 0.5
    assert train.call_args.kwargs['only'] == [8]
    manifest = json.loads((tmp_path / 'ckpt' / 'train.manifest.json'
                           ).read_text())
    assert manifest['status'] == 'ok'
    assert manifest['config']['train_steps'] == 7


def test_reward_weight_changes_config_hash(tmp_path, config_file, mocker):
    mocker.patch('mural_restoration.cli.train_denoisers')
    hashes = []
    for out, extra in (('default', []), ('no_reward', ['--lambda', '0'])):
        assert cli.main(['train', '--config', config_file,
                         '--crops', str(tmp_path / 'crops'),
                         '--checkpoint-dir', str(tmp_path / out)]
                        + extra) == 0
        hashes.append(read_manifest(tmp_path / out / 'train.manifest.json'
                                    ).config_hash)
    assert hashes[0] != hashes[1]


def test_log_settings_from_environment(tmp_path, config_file, monkeypatch,
                                       capsys):
    monkeypatch.setenv('LOG_FORMAT', 'json')
    monkeypatch.setenv('LOG_LEVEL', 'info')
    assert cli.main(['synth', '--config', config_file, '--count', '1',
                     '--out', str(tmp_path / 'data')]) == 0
    lines = [json.loads(line)
             for line in capsys.readouterr().err.splitlines() if line]
    assert lines
    assert all(line['stage'] == 'synth' for line in lines)
    monkeypatch.setenv('LOG_LEVEL', 'warning')
    assert cli.main(['synth', '--config', config_file, '--count', '1',
                     '--out', str(tmp_path / 'again')]) == 0
    assert logging.getLogger().level == logging.WARNING
    assert 'Synthesized' not in capsys.readouterr().err


def test_log_settings_from_dotenv(tmp_path, config_file, monkeypatch,
                                  capsys):
    monkeypatch.chdir(tmp_path)
    # registered so the value loaded from .env is removed afterwards
    monkeypatch.setenv('LOG_FORMAT', 'csv')
    monkeypatch.delenv('LOG_FORMAT')
    (tmp_path / '.env').write_text('LOG_FORMAT=json\n')
    assert cli.main(['synth', '--config', config_file, '--count', '1',
                     '--out', str(tmp_path / 'data')]) == 0
    err = capsys.readouterr().err
    assert json.loads(err.splitlines()[0])['level'] == 'INFO'


def test_log_flags_override_environment(tmp_path, config_file,
                                        monkeypatch, capsys):
    monkeypatch.setenv('LOG_FORMAT', 'json')
    assert cli.main(['synth', '--config', config_file, '--count', '1',
                     '--log-format', 'csv',
                     '--out', str(tmp_path / 'data')]) == 0
    first = capsys.readouterr().err.splitlines()[0]
    assert first.split(',')[1] == '[INFO]'


def test_oracle_check(tmp_path, config_file):
    spec = tmp_path / 'spec.json'
    spec.write_text(json.dumps({'components': [{'mean': 0.2,
                                                'variance': 0.5}]}))
    reports = []
    for name in ('a.json', 'b.json'):
        report = tmp_path / name
        assert cli.main(['oracle-check', '--config', config_file,
                         '--spec', str(spec), '--steps', '10',
                         '--samples', '100', '--report', str(report)]) == 0
        reports.append(report.read_bytes())
    assert reports[0] == reports[1]
    assert json.loads(reports[0])['samples'] == 100


def test_evaluate(tmp_path, config_file):
    rng = np.random.default_rng(0)
    img = Image(rng.uniform(size=(16, 16, 3)))
    write_image(img, tmp_path / 'repaired' / 'a.png')
    write_image(img, tmp_path / 'clean' / 'a.png')
    assert cli.main(['evaluate', '--config', config_file,
                     '--repaired', str(tmp_path / 'repaired'),
                     '--reference', str(tmp_path / 'clean'),
                     '--out', str(tmp_path / 'report.csv')]) == 0
    lines = (tmp_path / 'report.csv').read_text().splitlines()
    assert lines[0] == 'file,ssim,ccon_chi2,ccon_sim,tcon_chi2,tcon_sim,econ'
    assert lines[1].startswith('a.png,1,')
