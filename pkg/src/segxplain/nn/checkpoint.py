"""Model checkpoint file format.

Layout: the magic string ``SGXP1``, an 8-byte little-endian length followed by
the JSON architecture description, then one block per parameter/buffer in
declaration order, each an 8-byte little-endian byte count followed by raw
little-endian real32 values.
"""

import dataclasses
import json
import struct

import numpy as np

from segxplain.nn import layers as L

MAGIC = b"SGXP1"

_SPEC_CLASSES = {cls.__name__: cls for cls in L.LAYER_TYPES}


class CheckpointError(ValueError):
    pass


def _describe(network) -> dict:
    specs = []
    for spec in network.specs:
        entry = {"type": type(spec).__name__}
        entry.update(dataclasses.asdict(spec))
        specs.append(entry)
    groups = {}
    for i in range(len(network.specs)):
        for p in network.parameters():
            if p.name.startswith(f"layer{i}.") and p.group:
                groups[str(i)] = p.group
                break
    return {
        "input_shape": list(network.input_shape),
        "precision": "real64" if network.dtype == np.float64 else "real32",
        "seed": network.seed,
        "layers": specs,
        "groups": groups,
    }


def save_model(path, network) -> None:
    desc = json.dumps(_describe(network), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(desc)))
        fh.write(desc)
        for p in network.parameters():
            raw = np.ascontiguousarray(p.array, dtype="<f4").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_model(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (desc_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        desc = json.loads(_read_exact(fh, desc_len, "architecture").decode("utf-8"))
        specs = []
        for entry in desc["layers"]:
            entry = dict(entry)
            cls = _SPEC_CLASSES.get(entry.pop("type", None))
            if cls is None:
                raise CheckpointError(f"{path}: unknown layer type in checkpoint")
            specs.append(cls(**entry))
        precision = np.float64 if desc["precision"] == "real64" else np.float32
        groups = {int(k): v for k, v in desc.get("groups", {}).items()}
        net = L.Network(specs, desc["input_shape"], precision=precision,
                        seed=desc.get("seed", 0), groups=groups)
        arrays = []
        for p in net.parameters():
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, f"{p.name} length"))
            raw = _read_exact(fh, nbytes, p.name)
            values = np.frombuffer(raw, dtype="<f4").reshape(p.array.shape)
            arrays.append(values)
        net.load_state(arrays)
        return net
