"""Parameter checkpoints: one JSON header line, then little-endian fp32 data.

The header lists ``[name, shape]`` pairs in declaration order; values follow
in that order, row-major. Loading yields float32 arrays, so a float32 store
round-trips bit-exactly.
"""
import hashlib
import json

import numpy as np

from .optim import ParamStore

VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(store, module, seed=None, meta=None):
    shapes = [[k, list(v.shape)] for k, v in store.params.items()]
    header = {"version": VERSION, "module": module, "shapes": shapes,
              "seed": seed, "meta": meta or {}, "frozen": sorted(store.frozen)}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in store.params.values())
    return head + body


def save(path, store, module, seed=None, meta=None):
    blob = encode(store, module, seed, meta)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def decode(blob, module=None):
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header line")
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if module is not None and header.get("module") != module:
        raise CheckpointError(f"expected module {module!r}, found {header.get('module')!r}")
    body = memoryview(blob)[nl + 1:]
    total = sum(int(np.prod(s)) for _, s in header["shapes"])
    if len(body) != 4 * total:
        raise CheckpointError(f"payload has {len(body)} bytes, header implies {4 * total}")
    store, off = ParamStore(frozen=header.get("frozen", ())), 0
    for name, shape in header["shapes"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(body[off:off + 4 * n], dtype="<f4").astype(np.float32).reshape(shape)
        store.add(name, arr)
        off += 4 * n
    return store, header


def load(path, module=None):
    with open(path, "rb") as fh:
        return decode(fh.read(), module)


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
