"""Single-file binary checkpoints of a MaskedNetwork.

Layout::

    b"RELMAPCK"  uint32 version  uint64 header_len  header (UTF-8 JSON)  array data

The header describes the architecture and lists every array by name with
dtype, shape, byte offset into the data section and whether it is a bit-packed
boolean.  Binary masks and frozen indicators are stored with ``np.packbits``;
float arrays are stored raw, little-endian, so a load reproduces them bit for bit.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import MaskedBatchNorm, MaskedNetwork
from .relevance import FrozenIndicator, RelevanceMap

MAGIC = b"RELMAPCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _net_arrays(net: MaskedNetwork) -> tuple[dict, dict]:
    arrays = {}
    meta = {"maps": {}}
    for k, v in net.params.items():
        arrays[f"param/{k}"] = v
    for k, f in net.frozen.items():
        arrays[f"frozen/{k}"] = f.mask
    for t, masks in net.masks.items():
        for k, m in masks.items():
            arrays[f"mask/{t}/{k}"] = m
    for t, maps in net.maps.items():
        meta["maps"][str(t)] = {k: {"beta": m.beta, "pruned": m.pruned} for k, m in maps.items()}
        for k, m in maps.items():
            arrays[f"map/{t}/{k}"] = m.raw
    for t, stats in net.bn_stats.items():
        for name, (mean, var) in stats.items():
            arrays[f"bn/{t}/{name}/mean"] = mean
            arrays[f"bn/{t}/{name}/var"] = var
    return arrays, meta


def save(path, net: MaskedNetwork, *, meta: dict | None = None, arrays: dict | None = None) -> Path:
    """Write ``net`` plus optional JSON ``meta`` and extra named ``arrays`` to ``path``.

    The file is written to a temporary name and renamed, so an interrupted save
    never leaves a half-written checkpoint behind.
    """
    path = Path(path)
    net_arrays, net_meta = _net_arrays(net)
    bn = next((l for l in net.layers if isinstance(l, MaskedBatchNorm)), None)
    header = {
        "arch": {"sizes": list(net.sizes), "seed": net.seed, "beta": net.beta, "map_mean": net.map_mean,
                 "map_sd": net.map_sd, "bn_eps": bn.eps if bn else 1e-5,
                 "bn_momentum": bn.momentum if bn else 0.1},
        "task_order": net.task_order,
        "completed": net.completed,
        "maps": net_meta["maps"],
        "meta": meta or {},
        "arrays": [],
    }
    blobs = []
    offset = 0
    items = [("net", k, v) for k, v in net_arrays.items()] + [("extra", k, v) for k, v in (arrays or {}).items()]
    for group, name, a in items:
        a = np.asarray(a)
        entry = {"group": group, "name": name, "shape": list(a.shape), "offset": offset}
        if a.dtype == np.bool_:
            buf = np.packbits(a.ravel()).tobytes()
            entry["dtype"] = "bool"
            entry["packed"] = True
        else:
            le = a.dtype.newbyteorder("<")
            buf = np.ascontiguousarray(a, dtype=le).tobytes()
            entry["dtype"] = le.str
            entry["packed"] = False
        entry["nbytes"] = len(buf)
        header["arrays"].append(entry)
        blobs.append(buf)
        offset += len(buf)
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hjson)))
        f.write(hjson)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return path


def _read_arrays(blob: bytes, base: int, entries) -> tuple[dict, dict]:
    net, extra = {}, {}
    for e in entries:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(blob):
            raise FormatError(f"array {e['name']!r} needs {n} bytes but the file ends early",
                              offset=base + len(blob))
        raw = blob[start:start + n]
        shape = tuple(e["shape"])
        if e["packed"]:
            count = int(np.prod(shape, dtype=np.int64))
            a = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count).astype(bool).reshape(shape)
        else:
            a = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(shape).copy()
        (net if e["group"] == "net" else extra)[e["name"]] = a
    return net, extra


def load(path) -> tuple[MaskedNetwork, dict, dict]:
    """Read a checkpoint; returns ``(net, meta, extra_arrays)``."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: too short for a checkpoint header", offset=len(data))
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a relmap checkpoint (magic {magic!r})", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}", offset=8)
    hstart = _PREFIX.size
    if hstart + hlen > len(data):
        raise FormatError(f"{path}: header of {hlen} bytes is truncated", offset=len(data))
    try:
        header = json.loads(data[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})", offset=hstart) from None
    base = hstart + hlen
    arrays, extra = _read_arrays(data[base:], base, header["arrays"])
    total = sum(e["nbytes"] for e in header["arrays"])
    if base + total != len(data):
        raise FormatError(f"{path}: {len(data) - base - total} unexpected trailing bytes", offset=base + total)

    arch = header["arch"]
    net = MaskedNetwork(arch["sizes"], seed=arch["seed"], beta=arch["beta"], map_mean=arch["map_mean"],
                        map_sd=arch["map_sd"], bn_eps=arch["bn_eps"], bn_momentum=arch["bn_momentum"])
    try:
        for k in net.params:
            net.params[k][...] = arrays[f"param/{k}"]
            net.frozen[k] = FrozenIndicator(arrays[f"frozen/{k}"])
        bn_names = [l.name for l in net.layers if isinstance(l, MaskedBatchNorm)]
        for t in header["task_order"]:
            net.task_order.append(t)
            net.bn_stats[t] = {n: (arrays[f"bn/{t}/{n}/mean"], arrays[f"bn/{t}/{n}/var"]) for n in bn_names}
            if t in header["completed"]:
                net.masks[t] = {k: arrays[f"mask/{t}/{k}"] for k in net.params}
            else:
                info = header["maps"][str(t)]
                net.maps[t] = {k: RelevanceMap(arrays[f"map/{t}/{k}"], beta=info[k]["beta"],
                                               pruned=info[k]["pruned"]) for k in net.params}
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint is missing array {exc.args[0]!r}", offset=base) from None
    return net, header["meta"], extra


def optimizer_arrays(prefix: str, state: dict) -> tuple[dict, dict]:
    """Split an Adam ``state_dict`` into JSON scalars and named moment arrays."""
    scalars = {"lr": state["lr"], "t": state["t"]}
    arrays = {f"{prefix}/m/{k}": v for k, v in state["m"].items()}
    arrays.update({f"{prefix}/v/{k}": v for k, v in state["v"].items()})
    return scalars, arrays


def optimizer_state(prefix: str, scalars: dict, arrays: dict) -> dict:
    """Inverse of :func:`optimizer_arrays`."""
    m = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(f"{prefix}/m/")}
    v = {k[len(prefix) + 3:]: a for k, a in arrays.items() if k.startswith(f"{prefix}/v/")}
    return {"lr": scalars["lr"], "t": scalars["t"], "m": m, "v": v}
