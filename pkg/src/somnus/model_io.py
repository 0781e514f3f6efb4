"""Versioned single-file model persistence with integrity checking.

A model file is a deterministic zip container: a JSON manifest (format
version, forest parameters, training metadata hash), one .npy member per
array, and a sha256 over all content. Loads verify the checksum before
deserializing and reject unknown format versions, so a truncated or stale
file never yields a partial model.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile

import numpy as np

from .errors import ChecksumFailure, VersionMismatch
from .forest import Forest, ForestParams

FORMAT_VERSION = "somnus-forest/1"

_ARRAYS = (
    "node_feature",
    "node_threshold",
    "node_left",
    "node_right",
    "node_value",
    "tree_offsets",
    "inclusion_counts",
)

# fixed zip timestamp => byte-identical files for identical forests
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def model_save(forest: Forest, path) -> str:
    """Write the forest; returns the content checksum."""
    manifest = {
        "format": FORMAT_VERSION,
        "params": forest.params.to_dict(),
        "n_features": forest.n_features,
        "feature_names": list(forest.feature_names),
        "n_train": forest.n_train,
        "single_class": forest.single_class,
        "train_meta_hash": forest.train_meta_hash,
    }
    members: list[tuple[str, bytes]] = [
        ("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
    ]
    for name in _ARRAYS:
        members.append((name + ".npy", _npy_bytes(getattr(forest, name))))

    digest = hashlib.sha256()
    for name, data in members:
        digest.update(name.encode())
        digest.update(data)
    checksum = digest.hexdigest()

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, data in members:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
        info = zipfile.ZipInfo("checksum.txt", date_time=_EPOCH)
        zf.writestr(info, checksum)
    return checksum


def model_load(path) -> Forest:
    """Load a forest, verifying format version and content checksum."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = zf.namelist()
            if "checksum.txt" not in names or "manifest.json" not in names:
                raise ChecksumFailure(f"{path}: not a model file (missing members)")
            stored = zf.read("checksum.txt").decode().strip()
            by_name = {n: zf.read(n) for n in names if n != "checksum.txt"}
    except zipfile.BadZipFile as e:
        raise ChecksumFailure(f"{path}: unreadable container ({e})") from None

    manifest = json.loads(by_name["manifest.json"])
    found = manifest.get("format", "<missing>")
    if found != FORMAT_VERSION:
        raise VersionMismatch(found, FORMAT_VERSION)
    # checksum covers members in write order: manifest first, arrays after
    ordered = ["manifest.json"] + [n + ".npy" for n in _ARRAYS]
    if sorted(by_name) != sorted(ordered):
        raise ChecksumFailure(f"{path}: unexpected member set {sorted(by_name)}")
    digest = hashlib.sha256()
    for name in ordered:
        digest.update(name.encode())
        digest.update(by_name[name])
    if digest.hexdigest() != stored:
        raise ChecksumFailure(f"{path}: checksum mismatch")

    arrays = {}
    for name in _ARRAYS:
        arrays[name] = np.load(io.BytesIO(by_name[name + ".npy"]), allow_pickle=False)
    return Forest(
        params=ForestParams(**manifest["params"]),
        n_features=int(manifest["n_features"]),
        feature_names=tuple(manifest["feature_names"]),
        node_feature=arrays["node_feature"],
        node_threshold=arrays["node_threshold"],
        node_left=arrays["node_left"],
        node_right=arrays["node_right"],
        node_value=arrays["node_value"],
        tree_offsets=arrays["tree_offsets"],
        inclusion_counts=arrays["inclusion_counts"],
        n_train=int(manifest["n_train"]),
        single_class=bool(manifest["single_class"]),
        train_meta_hash=manifest["train_meta_hash"],
    )
