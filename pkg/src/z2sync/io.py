"""Instance files, long-format CSV tables and experiment manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import subprocess
from pathlib import Path

import numpy as np

from .model import LatticeInstance, ModelParams

MAGIC = b"Z2SYNC\x00\x01"
LONG_HEADER = ["quantity", "params", "value", "se"]


def _pack_signs(a: np.ndarray) -> bytes:
    return np.packbits((np.asarray(a) > 0).ravel()).tobytes()


def _unpack_signs(buf: bytes, shape) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count)
    return np.where(bits == 1, 1, -1).astype(np.int8).reshape(shape)


def save_instance(inst: LatticeInstance, path) -> None:
    """Write a self-describing binary file: magic, header length, JSON header, payload.

    Spins and edge observations are stored one bit each, GOE values as
    float32.  The header lists every array with encoding, shape and offset.
    """
    blobs, table, offset = [], [], 0

    def add(name, data, encoding, shape):
        nonlocal offset
        table.append({"name": name, "encoding": encoding, "shape": list(shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    add("theta", _pack_signs(inst.theta), "signbits", inst.theta.shape)
    for i, e in enumerate(inst.edge_obs):
        add(f"edge{i}", _pack_signs(e), "signbits", e.shape)
    if inst.goe_obs is not None:
        add("goe_offsets", inst.goe_offsets.astype("<i8").tobytes(), "int64", inst.goe_offsets.shape)
        add("goe", inst.goe_obs.astype("<f4").tobytes(), "float32", inst.goe_obs.shape)
    header = json.dumps({"format": 1, "params": inst.params.to_dict(), "arrays": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_instance(path) -> LatticeInstance:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not an instance file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start: start + hlen])
    payload = raw[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        shape = tuple(entry["shape"])
        if entry["encoding"] == "signbits":
            arrays[entry["name"]] = _unpack_signs(buf, shape)
        elif entry["encoding"] == "int64":
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<i8").reshape(shape).astype(np.int64)
        elif entry["encoding"] == "float32":
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        else:
            raise ValueError(f"unknown encoding {entry['encoding']!r}")
    params = ModelParams(**header["params"])
    edges = tuple(arrays[f"edge{i}"] for i in range(params.d))
    return LatticeInstance(params, arrays["theta"], edges, arrays.get("goe_offsets"), arrays.get("goe"))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def format_params(params: dict | None) -> str:
    if not params:
        return ""
    return ";".join(f"{k}={params[k]}" for k in sorted(params))


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class LongCSV:
    """Long-format table (quantity, params, value, se) with the config embedded up front.

    Rows are flushed as they are written, so an interrupted run leaves a valid
    partial file.
    """

    def __init__(self, path, config: dict):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh, quoting=csv.QUOTE_MINIMAL)
        self._w.writerow(LONG_HEADER)
        for k in sorted(config):
            self._w.writerow([f"config.{k}", "", _fmt(config[k]), ""])
        self._w.writerow(["config.hash", "", config_hash(config), ""])
        self._fh.flush()

    def row(self, quantity: str, value, se="", params: dict | None = None) -> None:
        self._w.writerow([quantity, format_params(params), _fmt(value), _fmt(se) if se != "" else ""])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_long_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path, config: dict, outputs: list[str], extra: dict | None = None) -> None:
    from . import _accel, __version__

    doc = {
        "schema": "z2sync-manifest/1",
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "git_describe": git_describe(),
        "version": __version__,
        "backend": _accel.backend(),
        "outputs": sorted(outputs),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
