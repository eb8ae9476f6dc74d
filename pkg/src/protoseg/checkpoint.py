"""Binary container for named arrays (checkpoints and tensor files).

Layout: 8-byte magic "PEMCKPT1", an 8-byte little-endian length for the
UTF-8 JSON header, the header itself (a list of {name, dtype, shape,
offset} records), then the raw little-endian value payloads. Offsets are
relative to the start of the payload section.
"""

import json
import struct

import numpy as np

MAGIC = b"PEMCKPT1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays):
    """Write an ordered {name: ndarray} mapping."""
    header = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        header.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
        })
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_arrays(path):
    """Read back a {name: ndarray} mapping (insertion order preserved)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    out = {}
    for rec in header:
        dtype = np.dtype(rec["dtype"]).newbyteorder("<")
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=rec["offset"])
        out[rec["name"]] = arr.reshape(shape).astype(np.dtype(rec["dtype"]))
    return out


def save_model(path, model):
    save_arrays(path, {k: p.data for k, p in model.named_parameters().items()})


def load_model(path, model):
    """Load weights into a built model; shapes must match the model config."""
    arrays = load_arrays(path)
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)[:5]}, "
                              f"extra={sorted(extra)[:5]}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"checkpoint {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.data.dtype)
