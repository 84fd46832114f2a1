"""Small I/O helpers shared by the file-facing modules.

Readers accept paths, text, or open streams; gzip-compressed inputs are
detected transparently (by suffix for paths, by magic bytes for binary
streams).  File outputs go through ``atomic_write`` so a crash mid-write
never leaves a truncated file behind.
"""

from __future__ import annotations

import gzip
import io
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

GZIP_MAGIC = b"\x1f\x8b"


def open_text_source(source):
    """Return a text-mode file object for *source*.

    *source* may be a path (``str``/``Path``), an already-open text or
    binary stream, or a literal string containing at least one newline
    (treated as inline content, which keeps small fixtures easy to write
    in tests).
    """
    if isinstance(source, Path):
        return _open_path(source)
    if isinstance(source, str):
        if "\n" in source:
            return io.StringIO(source)
        return _open_path(Path(source))
    if isinstance(source, io.TextIOBase):
        return source
    # binary stream: sniff for gzip
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, str):
            return io.StringIO(data)
        if data[:2] == GZIP_MAGIC:
            data = gzip.decompress(data)
        return io.StringIO(data.decode("utf-8"))
    raise TypeError(f"cannot read from {type(source).__name__}")


def _open_path(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == GZIP_MAGIC or path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temporary file in the target directory, then rename.

    The rename is atomic on POSIX, so readers either see the old file or
    the complete new one, never a partial write.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    tmp_path = Path(tmp_name)
    # mkstemp creates 0600 files; give the result ordinary umask permissions
    umask = os.umask(0)
    os.umask(umask)
    os.fchmod(fd, 0o666 & ~umask)
    try:
        if "b" in mode:
            fh = os.fdopen(fd, mode)
        else:
            fh = os.fdopen(fd, mode, encoding="utf-8", newline="")
        try:
            yield fh
        finally:
            fh.close()
        os.replace(tmp_path, path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise


def resolve_input_path(path, env_var: str = "WEDGELAB_DATA_DIR"):
    """Resolve *path* against the data-directory environment variable.

    A path that exists as given wins; otherwise, if ``$WEDGELAB_DATA_DIR``
    is set and the file exists beneath it, that location is used.
    """
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    base = os.environ.get(env_var)
    if base:
        candidate = Path(base) / p
        if candidate.exists():
            return candidate
    return p
