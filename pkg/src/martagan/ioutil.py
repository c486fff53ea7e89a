"""Small file-handling helpers shared across the package.

Every artifact writer goes through ``atomic_open`` so an interrupted
process never leaves a partially written file at its final path: data
lands in a sibling temp file and is moved into place with os.replace,
which is atomic on POSIX filesystems.
"""

import contextlib
import hashlib
import os


@contextlib.contextmanager
def atomic_open(path, mode="wb"):
    if "r" in mode or "a" in mode or "+" in mode:
        raise ValueError(f"atomic_open is write-only, got mode {mode!r}")
    tmp = f"{path}.tmp{os.getpid()}"
    fh = open(tmp, mode, newline="" if "b" not in mode else None)
    try:
        yield fh
        fh.close()
        os.replace(tmp, path)
    except BaseException:
        fh.close()
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
