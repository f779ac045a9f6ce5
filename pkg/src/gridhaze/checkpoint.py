"""Portable checkpoint archives.

A checkpoint is a single uncompressed zip holding:

  meta.json     -- arbitrary JSON metadata (configs, fingerprints, run state)
  manifest.json -- one entry per tensor: name, shape, dtype, byte offset, nbytes
  tensors.bin   -- the raw little-endian tensor bytes, concatenated

The format round-trips bit-exactly and depends on nothing beyond numpy,
so archives written here can be read by any language with a zip reader.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

from .errors import CheckpointError

# fixed zip timestamps keep archive bytes reproducible across reruns
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _le_dtype(arr):
    dt = arr.dtype.newbyteorder("<")
    return arr.astype(dt, copy=False)


def save_archive(path, meta, arrays):
    """Write metadata and a name->ndarray mapping to a checkpoint zip."""
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = _le_dtype(np.ascontiguousarray(arr))
        raw = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for member, payload in (
            ("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode()),
            ("manifest.json", json.dumps(manifest, indent=1).encode()),
            ("tensors.bin", b"".join(blobs)),
        ):
            info = zipfile.ZipInfo(member, date_time=_EPOCH)
            zf.writestr(info, payload)


def load_archive(path):
    """Read a checkpoint zip back into (meta, name->ndarray)."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    arrays = {}
    for entry in manifest:
        start = entry["offset"]
        end = start + entry["nbytes"]
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return meta, arrays


def verify_fingerprint(meta, expected, what="checkpoint"):
    found = meta.get("fingerprint")
    if found != expected:
        raise CheckpointError(
            f"{what} fingerprint mismatch: archive has {found!r}, expected {expected!r}; "
            "the stored configuration differs from the one being loaded into"
        )
