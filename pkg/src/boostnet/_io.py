"""Byte-stable artifact writers (no timestamps inside written files)."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_META_KEY = "__meta__.json"


def write_npz(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write an .npz-compatible zip with sorted members and fixed member dates."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(_META_KEY, date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=2))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=_FIXED_DATE), buf.getvalue())


def read_npz(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read(_META_KEY))
        for name in zf.namelist():
            if name == _META_KEY:
                continue
            arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                io.BytesIO(zf.read(name)), allow_pickle=False
            )
    return arrays, meta


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
