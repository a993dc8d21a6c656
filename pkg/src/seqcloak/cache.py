"""Optional on-disk cache for backgrounds and garment meshes.

Enabled by pointing ``SEQCLOAK_CACHE`` at a writable directory. Entries are
keyed by a hash of their description plus the package version, so a stale
cache never survives an upgrade.
"""
from __future__ import annotations

import hashlib
import os
import pickle
from pathlib import Path

import numpy as np

from . import __version__

ENV_VAR = "SEQCLOAK_CACHE"


def cache_dir():
    d = os.environ.get(ENV_VAR, "").strip()
    return Path(d) if d else None


def _path(namespace, key, suffix):
    h = hashlib.sha256(f"{__version__}:{key}".encode()).hexdigest()[:24]
    return cache_dir() / namespace / f"{h}{suffix}"


def cached_array(namespace, key, compute):
    if cache_dir() is None:
        return compute()
    p = _path(namespace, key, ".npy")
    if p.exists():
        return np.load(p)
    arr = np.asarray(compute())
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(f".{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
    os.replace(tmp, p)
    return arr


def cached_object(namespace, key, compute):
    if cache_dir() is None:
        return compute()
    p = _path(namespace, key, ".pkl")
    if p.exists():
        with open(p, "rb") as fh:
            return pickle.load(fh)
    obj = compute()
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(f".{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(obj, fh)
    os.replace(tmp, p)
    return obj
