"""Checkpoint container: a zip holding one raw little-endian blob per array
plus a manifest with dtypes, shapes and a free-form metadata record.

Values round-trip bit-exactly; the fixed zip timestamp keeps repeated saves
of identical state byte-identical too.
"""

import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, arrays, metadata):
    """arrays: map name -> ndarray. metadata: JSON-serializable dict."""
    manifest = {"metadata": metadata, "arrays": {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (name, arr) in enumerate(arrays.items()):
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            entry = f"arrays/{i}.bin"
            manifest["arrays"][name] = {
                "dtype": arr.dtype.str.lstrip("<>=|"),
                "shape": list(arr.shape),
                "entry": entry,
            }
            zf.writestr(zipfile.ZipInfo(entry, date_time=_EPOCH), le.tobytes())
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=_EPOCH),
                    json.dumps(manifest, sort_keys=True))


def load_checkpoint(path):
    """Returns (arrays, metadata)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for name, spec in manifest["arrays"].items():
            raw = zf.read(spec["entry"])
            dt = np.dtype(spec["dtype"]).newbyteorder("<")
            arrays[name] = np.frombuffer(raw, dtype=dt).reshape(spec["shape"]).astype(
                np.dtype(spec["dtype"]), copy=True)
    return arrays, manifest["metadata"]
