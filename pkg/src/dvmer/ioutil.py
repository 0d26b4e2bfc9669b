"""Small file-writing helpers; all outputs go through temp-file + rename so
interrupted runs never leave truncated artifacts."""

from __future__ import annotations

import os
import tempfile


def atomic_write_bytes(path, data: bytes):
    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
