"""Byte-deterministic checkpoint archives.

A checkpoint is a zip file with a fixed timestamp holding `meta.json` plus
one raw little-endian array blob per tensor, so identical states always
serialize to identical bytes (unlike pickle-based formats).
"""

import hashlib
import io
import json
import zipfile

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)

_DTYPES = {
    "float32": np.float32, "float64": np.float64,
    "int32": np.int32, "int64": np.int64, "uint8": np.uint8,
}


def save_archive(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = {}
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.name not in _DTYPES:
            raise TypeError(f"unsupported dtype {a.dtype} for '{name}'")
        entries[name] = {"shape": list(a.shape), "dtype": a.dtype.name}
    payload = {"meta": meta, "arrays": entries}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(payload, sort_keys=True, indent=1))
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"data/{name}.bin", date_time=_EPOCH)
            zf.writestr(info, np.ascontiguousarray(arrays[name]).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_archive(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        payload = json.loads(zf.read("meta.json"))
        arrays = {}
        for name, ent in payload["arrays"].items():
            raw = zf.read(f"data/{name}.bin")
            arrays[name] = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]]).reshape(
                ent["shape"]).copy()
    return arrays, payload["meta"]


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_dict_to_arrays(state_dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state_dict.items()}


def arrays_to_state_dict(arrays: dict[str, np.ndarray]):
    import torch
    return {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
