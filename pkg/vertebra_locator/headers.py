"""KEY=value text headers for the binary artifacts (volumes, networks, kernel bundles).

Headers use the same dotenv format as the pipeline config so one parser
reads everything the pipeline writes.
"""
import logging
from pathlib import Path

import numpy as np
from dotenv import dotenv_values

from .errors import MalformedHeaderError, MissingArtifactError, PayloadReadError, SizeMismatchError

logger = logging.getLogger(__name__)


def write_header(path, fields):
    lines = [f"{key}={value}" for key, value in fields.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_header(path, required=()):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"header not found: {path}")
    try:
        fields = dotenv_values(path, interpolate=False)
    except (OSError, UnicodeDecodeError) as e:
        raise MalformedHeaderError(f"cannot parse header {path}: {e}") from e
    missing = [key for key in required if not fields.get(key)]
    if missing:
        raise MalformedHeaderError(f"header {path} is missing {', '.join(missing)}")
    return fields


def parse_numbers(fields, key, count, kind=float, path=""):
    raw = fields.get(key) or ""
    parts = raw.replace(",", " ").split()
    try:
        values = tuple(kind(p) for p in parts)
    except ValueError as e:
        raise MalformedHeaderError(f"{path}: {key}={raw!r} is not a list of numbers") from e
    if count is not None and len(values) != count:
        raise MalformedHeaderError(f"{path}: {key} needs {count} values, got {len(values)}")
    return values


def format_numbers(values):
    return " ".join(str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v)) for v in values)


def read_float32_payload(path, expected_count):
    """Read a little-endian float32 payload and check its length."""
    path = Path(path)
    if not path.is_file():
        raise PayloadReadError(f"payload not found: {path}")
    try:
        payload = np.fromfile(path, dtype="<f4")
    except (OSError, ValueError) as e:
        raise PayloadReadError(f"cannot read payload {path}: {e}") from e
    if path.stat().st_size % 4:
        raise SizeMismatchError(f"{path}: {path.stat().st_size} bytes is not a whole number of float32 values")
    if payload.size != expected_count:
        raise SizeMismatchError(f"{path}: header declares {expected_count} values, payload holds {payload.size}")
    return payload


def write_float32_payload(path, values):
    np.asarray(values, dtype="<f4").tofile(path)
    logger.debug("wrote %d float32 values to %s", np.asarray(values).size, path)
