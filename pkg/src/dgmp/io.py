"""File formats: ``dgmp-csv v1`` descriptor files, JSON run configs, CSV tables.

A descriptor file looks like::

    dgmp-csv v1, D=3, N=2, label=writer7
    0.1,0.2,0.3
    0.4,0.5,0.6

one descriptor per line; the reader returns them as the columns of ``phi``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, FileFormatError
from .pooling import DescriptorSet

HEADER_RE = re.compile(r"^dgmp-csv v1,\s*D=(\d+),\s*N=(\d+)(?:,\s*label=(.*))?$")


def format_float(x):
    return format(float(x), ".17g")


def atomic_write(path, text):
    """Write via a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_descriptor_file(ds):
    label = "" if ds.label is None else str(ds.label)
    lines = [f"dgmp-csv v1, D={ds.dim}, N={ds.size}, label={label}"]
    for col in ds.phi.T:
        lines.append(",".join(format_float(v) for v in col))
    return "\n".join(lines) + "\n"


def write_descriptor_file(path, ds):
    atomic_write(path, format_descriptor_file(ds))


def read_descriptor_file(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FileFormatError(path, 0, f"cannot read file: {exc}") from None
    if not lines:
        raise FileFormatError(path, 1, "empty file")
    m = HEADER_RE.match(lines[0].strip())
    if m is None:
        raise FileFormatError(path, 1, "expected header 'dgmp-csv v1, D=<d>, N=<n>, label=<label>'")
    d, n = int(m.group(1)), int(m.group(2))
    label = (m.group(3) or "").strip() or None
    if d < 1 or n < 1:
        raise FileFormatError(path, 1, "D and N must be at least 1")
    body = [(i, ln) for i, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != n:
        line = body[n][0] if len(body) > n else len(lines) + 1
        raise FileFormatError(path, line, f"header declares N={n} descriptors, found {len(body)}")
    phi = np.empty((d, n))
    for j, (lineno, ln) in enumerate(body):
        parts = ln.split(",")
        if len(parts) != d:
            raise FileFormatError(path, lineno, f"expected {d} values, found {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FileFormatError(path, lineno, "value is not a number") from None
        if not all(np.isfinite(vals)):
            raise FileFormatError(path, lineno, "non-finite value")
        phi[:, j] = vals
    return DescriptorSet(phi, label=label, source_id=path.name)


def read_embeddings_csv(path):
    """Rows ``id,v1,...,vD`` (no header) -> ``(ids, S x D array)``."""
    path = Path(path)
    ids, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise FileFormatError(path, lineno, "value is not a number") from None
            if not vals or not all(np.isfinite(vals)):
                raise FileFormatError(path, lineno, "expected an id followed by finite values")
            if rows and len(vals) != len(rows[0]):
                raise FileFormatError(path, lineno, f"expected {len(rows[0])} values, found {len(vals)}")
            ids.append(row[0])
            rows.append(vals)
    if not rows:
        raise FileFormatError(path, 1, "no embeddings")
    return ids, np.array(rows)


def read_labels_csv(path):
    """Rows ``id,label`` (no header) -> dict."""
    path = Path(path)
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise FileFormatError(path, lineno, "expected 'id,label'")
            out[row[0]] = row[1]
    return out


# --- JSON configs ----------------------------------------------------------

# JSON key -> dataclass field name
ALIASES = {"lambda": "lam"}


def from_dict(cls, data, where=""):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"{where or cls.__name__}: unknown key {key!r}")
        sub = fields[name].default_factory
        if dataclasses.is_dataclass(sub):
            value = from_dict(sub, value, f"{where}.{key}" if where else key)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


def to_dict(obj):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        out[{v: k for k, v in ALIASES.items()}.get(f.name, f.name)] = value
    return out


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None


def check_keys(data, allowed, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")
