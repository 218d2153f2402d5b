"""Flat ``key = value`` run manifests."""
from __future__ import annotations

import json
import platform

import numpy as np


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def flatten(d, prefix=""):
    """Nested mappings to dotted keys; leaves keep their values."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            out.update(flatten(v, key + "."))
        else:
            out[key] = _plain(v)
    return out


def format_value(v):
    if isinstance(v, str):
        return v
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v, default=float)


def write_manifest(path, d):
    """Write sorted dotted keys, one ``key = value`` per line."""
    flat = flatten(d)
    with open(path, "w") as fh:
        for k in sorted(flat):
            fh.write(f"{k} = {format_value(flat[k])}\n")


def read_manifest(path):
    """Inverse of :func:`write_manifest` (values parsed as JSON where possible)."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            k, _, v = line.rstrip("\n").partition(" = ")
            try:
                out[k] = json.loads(v)
            except json.JSONDecodeError:
                out[k] = v
    return out


def versions():
    import scipy
    import shapely

    from . import __version__
    from .dynamics import KERNEL

    return {
        "fibertrap": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "shapely": shapely.__version__,
        "python": platform.python_version(),
        "kernel": KERNEL,
    }
