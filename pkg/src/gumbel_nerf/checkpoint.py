"""Single-file checkpoint format.

A checkpoint is one ``.npz`` archive holding a JSON header (UTF-8 bytes
under the reserved key ``__header__``, always carrying ``format_version``)
plus named tensors. Parameter tensors are stored row-major as 32-bit
floats; integer state (step counters) keeps its integer dtype. See the
README for the full key naming scheme.
"""

import json

import numpy as np

FORMAT_VERSION = 1
_HEADER_KEY = "__header__"


def save_arrays(path, header, arrays):
    """Write a versioned header dict plus {name: array} tensors to path."""
    full_header = dict(header)
    full_header["format_version"] = FORMAT_VERSION
    payload = {
        _HEADER_KEY: np.frombuffer(
            json.dumps(full_header, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    }
    for name, arr in arrays.items():
        if name.startswith("__"):
            raise ValueError(f"tensor name {name!r} collides with reserved keys")
        a = np.ascontiguousarray(arr)
        if a.dtype.kind == "f":
            a = a.astype(np.float32, copy=False)
        payload[name] = a
    np.savez(path, **payload)


def load_arrays(path):
    """Read back (header, {name: array}); rejects unknown format versions."""
    with np.load(path) as archive:
        if _HEADER_KEY not in archive.files:
            raise ValueError(f"{path}: not a checkpoint (missing header)")
        header = json.loads(bytes(archive[_HEADER_KEY]).decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {version!r}"
            )
        arrays = {k: archive[k] for k in archive.files if k != _HEADER_KEY}
    return header, arrays
