import json
import logging

import pytest

from mural_restoration import logger

TEST_STR = 'Testing basic logging functionality.'


@pytest.fixture
def root_logger():
    log = logging.getLogger()
    handlers = list(log.handlers)
    level = log.level
    yield log
    for h in list(log.handlers):
        if h not in handlers:
            log.removeHandler(h)
            h.close()
    log.setLevel(level)


def test_stderr_csv(capsys, root_logger):
    log = logger.get_mural_logger()
    log.info(TEST_STR)
    captured = capsys.readouterr()
    assert captured.out == ''
    line = captured.err.strip().splitlines()[-1]
    (datetime, level, thread, stage, module_function_line, message) = \
        line.split(',', 5)
    assert len(datetime) == 24
    assert datetime.endswith('Z')
    assert level == '[INFO]'
    assert thread == '(MainThread)'
    assert stage == '-'
    assert 'test_logger.test_stderr_csv:' in module_function_line
    assert message == TEST_STR


def test_stderr_json(capsys, root_logger):
    log = logger.get_mural_logger(format='json')
    log.info(TEST_STR)
    captured = capsys.readouterr()
    json_dict = json.loads(captured.err.strip().splitlines()[-1])
    assert len(json_dict['datetime']) == 24
    assert json_dict['level'] == 'INFO'
    assert json_dict['thread'] == 'MainThread'
    assert json_dict['stage'] == '-'
    assert json_dict['module'] == 'test_logger'
    assert json_dict['function'] == 'test_stderr_json'
    assert isinstance(json_dict['line'], int)
    assert json_dict['message'] == TEST_STR


def test_log_level_string(root_logger):
    log = logger.get_mural_logger(log_level='warning')
    assert log.level == logging.WARNING


def test_file(tmp_path, root_logger):
    filename = tmp_path / 'run.log'
    log = logger.get_mural_logger(str(filename))
    log.info(TEST_STR)
    for h in log.handlers:
        h.flush()
    assert TEST_STR in filename.read_text()


def test_exception_singleline(tmp_path, root_logger):
    filename = tmp_path / 'run.log'
    log = logger.get_mural_logger(str(filename))
    try:
        log.info('A non-exception')
        _ = 1 / 0
    except Exception as e:
        log.exception(e)
    for h in log.handlers:
        h.flush()
    lines = filename.read_text().splitlines()
    assert len(lines) == 2
    assert 'ZeroDivisionError: ' in lines[1]


def test_handlers_not_duplicated(root_logger):
    logger.get_mural_logger()
    count = len(root_logger.handlers)
    logger.get_mural_logger()
    assert len(root_logger.handlers) == count


def test_invalid_file_path(root_logger):
    bad_path = '/bad/path/test.log'
    with pytest.raises(FileNotFoundError, match=f'Path {bad_path} not found'):
        logger.get_mural_logger(bad_path)


def test_invalid_format():
    with pytest.raises(ValueError):
        logger.get_formatter('xml')


def test_verbose_logging(monkeypatch):
    monkeypatch.delenv('LOG_VERBOSE', raising=False)
    assert not logger.verbose_logging()
    monkeypatch.setenv('LOG_VERBOSE', 'fdp,sampler')
    assert logger.verbose_logging()
    assert logger.verbose_logging('FDP')
    assert not logger.verbose_logging('FDP', case_sensitive=True)
    assert not logger.verbose_logging('kmeans')


def test_stage_tag(capsys, root_logger):
    log = logger.get_mural_logger()
    with logger.log_stage('train'):
        log.info(TEST_STR)
        with logger.log_stage('fdp'):
            log.info(TEST_STR)
    log.info(TEST_STR)
    lines = capsys.readouterr().err.strip().splitlines()[-3:]
    assert [line.split(',')[3] for line in lines] == ['train', 'fdp', '-']


def test_verbose_all(monkeypatch):
    monkeypatch.setenv('LOG_VERBOSE', 'all')
    assert logger.verbose_logging('kmeans')
    monkeypatch.setenv('LOG_VERBOSE', ' , ')
    assert not logger.verbose_logging()
