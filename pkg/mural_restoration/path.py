"""Tools for file paths, atomic writes and output directory ownership."""
import logging
import os
import tempfile
from pathlib import Path

__all__ = ['OutputLockedError', 'OutputLock', 'clean_path', 'ensure_dir',
           'atomic_write_bytes', 'atomic_write_text', 'list_files',
           'IMAGE_SUFFIXES']

IMAGE_SUFFIXES = ('.png', '.pgm', '.ppm')

_log = logging.getLogger(__name__)


class OutputLockedError(Exception):
    """Another process owns the output directory."""


def clean_path(pathname: 'str|Path') -> str:
    """Adjusts relative and shorthand filenames for OS independence.

    Args:
        pathname: The full path/to/file

    Returns:
        A clean file/path name for the current OS and directory structure.

    Raises:
        `FileNotFoundError` if the parent directory does not exist.

    """
    pathname = str(pathname)
    if '/' not in pathname and os.sep not in pathname:
        return pathname
    if pathname.startswith('$HOME/'):
        pathname = pathname.replace('$HOME', str(Path.home()), 1)
    elif pathname.startswith('~/'):
        pathname = pathname.replace('~', str(Path.home()), 1)
    parent = os.path.dirname(pathname) or '.'
    if os.path.isdir(parent):
        return os.path.realpath(pathname)
    raise FileNotFoundError(f'Path {pathname} not found')


def ensure_dir(dirname: 'str|Path') -> Path:
    """Creates a directory (and parents) if missing and returns it."""
    path = Path(dirname)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(filename: 'str|Path', data: bytes) -> None:
    """Writes bytes via a temporary file and `os.replace`.

    Readers never observe a partially written file.

    """
    target = Path(filename)
    ensure_dir(target.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{target.name}.',
                                    dir=str(target.parent))
    try:
        with os.fdopen(fd, 'wb') as file:
            file.write(data)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def atomic_write_text(filename: 'str|Path', text: str) -> None:
    """Writes UTF-8 text atomically."""
    atomic_write_bytes(filename, text.encode('utf-8'))


def list_files(target: 'str|Path',
               suffixes: 'tuple[str, ...]' = IMAGE_SUFFIXES) -> 'list[Path]':
    """Returns a single file, or the sorted matching files of a directory.

    Args:
        target: A file or a directory.
        suffixes: Lowercase suffixes to accept from a directory.

    Raises:
        `FileNotFoundError` if the target does not exist.

    """
    path = Path(target)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f'Path {target} not found')
    return sorted(p for p in path.iterdir()
                  if p.is_file() and p.suffix.lower() in suffixes)


class OutputLock:
    """Exclusive ownership of an output directory via a `.lock` file.

    Used as a context manager; the lock file holds the owner's PID.

    Raises:
        `OutputLockedError` if the lock file already exists.

    """
    LOCK_NAME = '.lock'

    def __init__(self, dirname: 'str|Path') -> None:
        self.dirname = ensure_dir(dirname)
        self.lockfile = self.dirname / self.LOCK_NAME
        self._held = False

    def acquire(self) -> None:
        try:
            fd = os.open(str(self.lockfile),
                         os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise OutputLockedError(f'{self.dirname} is locked by'
                                    f' {self.lockfile}') from exc
        with os.fdopen(fd, 'w') as file:
            file.write(str(os.getpid()))
        self._held = True
        _log.debug('Acquired %s', self.lockfile)

    def release(self) -> None:
        if self._held and self.lockfile.exists():
            self.lockfile.unlink()
            _log.debug('Released %s', self.lockfile)
        self._held = False

    def __enter__(self) -> 'OutputLock':
        self.acquire()
        return self

    def __exit__(self, *exc_info) -> None:
        self.release()
