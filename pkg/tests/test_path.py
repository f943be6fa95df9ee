import os
from pathlib import Path

import pytest

from mural_restoration import path


def test_clean_path_home():
    res = path.clean_path('~/')
    assert res == os.path.realpath(str(Path.home()))
    res = path.clean_path('$HOME/')
    assert res == os.path.realpath(str(Path.home()))


def test_clean_path_bare_name():
    assert path.clean_path('run.log') == 'run.log'


def test_clean_path_missing_parent():
    with pytest.raises(FileNotFoundError):
        path.clean_path('/no/such/dir/file.txt')


def test_atomic_write_text(tmp_path):
    target = tmp_path / 'nested' / 'out.txt'
    path.atomic_write_text(target, 'first')
    path.atomic_write_text(target, 'second')
    assert target.read_text() == 'second'
    assert [p.name for p in target.parent.iterdir()] == ['out.txt']


def test_list_files(tmp_path):
    for name in ('b.png', 'a.PNG', 'c.pgm', 'notes.txt'):
        (tmp_path / name).write_bytes(b'')
    names = [p.name for p in path.list_files(tmp_path)]
    assert names == ['a.PNG', 'b.png', 'c.pgm']
    assert path.list_files(tmp_path / 'b.png') == [tmp_path / 'b.png']
    with pytest.raises(FileNotFoundError):
        path.list_files(tmp_path / 'missing')


def test_output_lock(tmp_path):
    out = tmp_path / 'run'
    with path.OutputLock(out) as lock:
        assert lock.lockfile.read_text() == str(os.getpid())
        with pytest.raises(path.OutputLockedError):
            path.OutputLock(out).acquire()
    assert not (out / path.OutputLock.LOCK_NAME).exists()
    with path.OutputLock(out):
        pass


def test_output_lock_released_on_error(tmp_path):
    with pytest.raises(RuntimeError):
        with path.OutputLock(tmp_path):
            raise RuntimeError('boom')
    assert not (tmp_path / path.OutputLock.LOCK_NAME).exists()
