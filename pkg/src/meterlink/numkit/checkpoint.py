"""Named-array checkpoint files with a JSON header.

The container is an uncompressed ``.npz``: every array keeps its name, shape
and raw float64 bytes, and ``__header__`` stores the JSON-encoded config.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

HEADER_KEY = "__header__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if HEADER_KEY in arrays:
        raise ValueError(f"array name {HEADER_KEY!r} is reserved")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in sorted(arrays.items())}
    payload[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
    # fixed member timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for k, v in payload.items():
            with zf.open(zipfile.ZipInfo(k + ".npy", date_time=_EPOCH), "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, v, allow_pickle=False)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z[HEADER_KEY]))
        arrays = {k: z[k].copy() for k in z.files if k != HEADER_KEY}
    return header, arrays


def content_id(header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Stable hash of header and array bytes (independent of zip metadata)."""
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k], dtype=np.float64)
        h.update(k.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
