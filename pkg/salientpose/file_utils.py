# salientpose/file_utils.py
import contextlib
import hashlib
import json
import math
import os
import shutil
import tempfile

# Configure logging
import logging

logger = logging.getLogger(__name__)


def allowed_file(filename, allowed_extensions):
    """Checks if the file extension is in the allowed set (case-insensitive)."""
    return "." in str(filename) and str(filename).rsplit(".", 1)[1].lower() in allowed_extensions


@contextlib.contextmanager
def atomic_write(path, mode="w", encoding="utf-8"):
    """
    Writes a file temp-then-rename so readers never see a partial file.

    The temporary file lives in the destination directory (same filesystem) and
    replaces the destination only after the ``with`` block finished without
    raising. On error the temporary file is removed and the destination is left
    untouched.

    Args:
        path: Destination path.
        mode (str): 'w' for text or 'wb' for binary.
        encoding (str): Text encoding, ignored for binary mode.

    Yields:
        The open temporary file object.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    binary = "b" in mode
    tmp = tempfile.NamedTemporaryFile(
        mode=mode,
        dir=directory,
        prefix=f".{os.path.basename(path)}.",
        suffix=".tmp",
        delete=False,
        **({} if binary else {"encoding": encoding, "newline": ""}),
    )
    try:
        with tmp:
            yield tmp
        os.replace(tmp.name, path)
        logger.debug(f"Wrote {path}")
    except BaseException:
        if os.path.exists(tmp.name):
            try:
                os.remove(tmp.name)
            except OSError as e:
                logger.error(f"Could not remove temp file {tmp.name}: {e}")
        raise


@contextlib.contextmanager
def staged_directory(path):
    """
    Builds a directory's contents in a sibling temp dir, published on success.

    The ``with`` block writes into the yielded staging directory. When it
    finishes without raising, every top-level entry is moved into ``path``
    (created if needed), replacing entries of the same name. On error the
    staging directory is removed and ``path`` is neither created nor touched.

    Args:
        path: Destination directory.

    Yields:
        str: The staging directory.
    """
    path = os.path.abspath(os.fspath(path))
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=f".{os.path.basename(path)}.", suffix=".tmp")
    try:
        yield staging
        os.makedirs(path, exist_ok=True)
        for name in sorted(os.listdir(staging)):
            target = os.path.join(path, name)
            if os.path.isdir(target) and not os.path.islink(target):
                shutil.rmtree(target)
            os.replace(os.path.join(staging, name), target)
        logger.debug(f"Published {path}")
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def _json_safe(obj):
    # NaN/inf are not valid JSON; absent values are written as null.
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if hasattr(obj, "tolist"):  # numpy scalars and arrays
        return _json_safe(obj.tolist())
    return obj


def dumps_json(obj, indent=2):
    """Serializes with shortest round-trip floats, non-finite values as null."""
    return json.dumps(_json_safe(obj), indent=indent, allow_nan=False) + "\n"


def write_json(path, obj, indent=2):
    """Atomically writes ``obj`` as JSON to ``path``."""
    with atomic_write(path, "w") as fh:
        fh.write(dumps_json(obj, indent=indent))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def file_digest(path, chunk_size=1 << 20):
    """Returns the SHA-256 hex digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()
