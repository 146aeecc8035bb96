"""
Versioned binary storage for parameter arrays.

A checkpoint is a directory holding a human-readable `manifest.yml` and one or more blobs of
little-endian float64 values. The manifest names each array, its shape and its offset in the
blob, plus free-form metadata (dimensions, activation kinds, the training config, ...).
"""
from __future__ import annotations
import logging
import os
from typing import cast
import numpy as np
import yaml
from lib.mtae_types import ArrayEntryType, CheckpointManifestType, FloatArray, MANIFEST_TYPE

logger = logging.getLogger(__name__)

FORMAT_NAME = "mtae-lab"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.yml"
BLOB_NAME = "params.bin"
LITTLE_ENDIAN_FLOAT64 = "<f8"


class CheckpointError(ValueError):
    """Raised when a checkpoint directory is missing, malformed or of the wrong kind."""


def write_blob(path: str, arrays: dict[str, FloatArray]) -> list[ArrayEntryType]:
    """
    Write arrays back to back as little-endian float64.

    :param path: The blob file to create.
    :param arrays: The arrays to store, in order.
    :return: The manifest entries locating each array in the blob.
    """
    entries: list[ArrayEntryType] = []
    offset = 0
    with open(path, "wb") as blob:
        for name, array in arrays.items():
            values = np.ascontiguousarray(array, dtype=LITTLE_ENDIAN_FLOAT64)
            blob.write(values.tobytes())
            entries.append({"name": name, "shape": [int(d) for d in values.shape], "offset": offset})
            offset += values.size
    return entries


def read_blob(path: str, entries: list[ArrayEntryType]) -> dict[str, FloatArray]:
    """Read the arrays described by `entries` from a blob written by `write_blob`."""
    try:
        raw = np.fromfile(path, dtype=LITTLE_ENDIAN_FLOAT64)
    except FileNotFoundError as error:
        raise CheckpointError(f"missing checkpoint blob {path}") from error

    arrays: dict[str, FloatArray] = {}
    for entry in entries:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > raw.size:
            raise CheckpointError(f"checkpoint blob {path} is truncated at array `{entry['name']}`")
        arrays[entry["name"]] = raw[start:start + size].astype(np.float64).reshape(entry["shape"])
    return arrays


def write_manifest(directory: str, manifest: CheckpointManifestType | MANIFEST_TYPE) -> None:
    """Write `manifest.yml` into `directory`."""
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as stream:
        yaml.safe_dump(dict(manifest), stream, sort_keys=False)


def read_manifest(directory: str) -> MANIFEST_TYPE:
    """Read `manifest.yml` from `directory` and check its format version."""
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as stream:
            manifest = yaml.safe_load(stream)
    except FileNotFoundError as error:
        raise CheckpointError(f"{directory} has no {MANIFEST_NAME}") from error

    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not an {FORMAT_NAME} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {manifest.get('format_version')}, "
                              f"this build reads version {FORMAT_VERSION}")
    return manifest


def save_checkpoint(directory: str, kind: str, arrays: dict[str, FloatArray], metadata: MANIFEST_TYPE) -> None:
    """
    Save arrays and metadata as a checkpoint directory.

    :param directory: Created if needed. Existing files with the same names are replaced.
    :param kind: What the checkpoint holds, e.g. `autoencoder` or `linear-svm`.
    :param arrays: The parameter arrays.
    :param metadata: Anything YAML can represent.
    """
    os.makedirs(directory, exist_ok=True)
    entries = write_blob(os.path.join(directory, BLOB_NAME), arrays)
    manifest: CheckpointManifestType = {"format": FORMAT_NAME,
                                        "format_version": FORMAT_VERSION,
                                        "kind": kind,
                                        "blob": BLOB_NAME,
                                        "dtype": LITTLE_ENDIAN_FLOAT64,
                                        "arrays": entries,
                                        "metadata": metadata}
    write_manifest(directory, manifest)
    logger.debug(f"Saved {kind} checkpoint with {len(entries)} arrays to {directory}")


def load_checkpoint(directory: str, kind: str) -> tuple[MANIFEST_TYPE, dict[str, FloatArray]]:
    """
    Load a checkpoint directory written by `save_checkpoint`.

    :param directory: The checkpoint directory.
    :param kind: The kind the caller expects.
    :return: The metadata and the arrays.
    """
    manifest = read_manifest(directory)
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{directory} holds a `{manifest.get('kind')}` checkpoint, not `{kind}`")
    entries = cast(list[ArrayEntryType], manifest["arrays"])
    arrays = read_blob(os.path.join(directory, manifest["blob"]), entries)
    return manifest.get("metadata") or {}, arrays
