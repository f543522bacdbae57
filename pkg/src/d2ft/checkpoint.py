"""Model serialization.

Binary layout: 8-byte magic, little-endian uint32 header length, a UTF-8 JSON
header (model config, per-subnet manifest) and then every array as
little-endian float64 in canonical subnet order (Embed, Block(1,1) ...
Block(L,H), Head).  Within a subnet the order is params, norms, adapters,
each by sorted name.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import InputError, SchemaError
from .model import LORA_TARGETS, LoraAdapter, ModelConfig, Subnet, SubnetId, SubnetModel

MAGIC = b"D2FTCKPT"
FORMAT_VERSION = 1


def subnet_manifest(model: SubnetModel) -> list[dict]:
    """One row per subnet: canonical index, label and partitioned parameter count."""
    return [{"index": i, "subnet_id": s.id.label, "param_count": s.param_count}
            for i, s in enumerate(model.subnets)]


def _arrays(s: Subnet) -> list[tuple[str, np.ndarray]]:
    out = [(f"params/{k}", s.params[k]) for k in sorted(s.params)]
    out += [(f"norms/{k}", s.norms[k]) for k in sorted(s.norms)]
    if s.lora is not None:
        for t in LORA_TARGETS:
            out.append((f"lora_down/{t}", s.lora.down[t]))
            out.append((f"lora_up/{t}", s.lora.up[t]))
    return out


def _header(model: SubnetModel) -> dict:
    entries = []
    for s in model.subnets:
        e = {"kind": s.id.kind, "block": s.id.block, "head": s.id.head, "frozen": s.frozen,
             "arrays": [[name, list(a.shape)] for name, a in _arrays(s)]}
        if s.lora is not None:
            e["lora"] = {"rank": s.lora.rank, "scaling": s.lora.scaling}
        entries.append(e)
    return {"version": FORMAT_VERSION, "config": asdict(model.config), "subnets": entries}


def _rebuild(header: dict, fetch) -> SubnetModel:
    try:
        config = ModelConfig(**header["config"])
        subnets = []
        for i, e in enumerate(header["subnets"]):
            groups: dict[str, dict] = {"params": {}, "norms": {}, "lora_down": {}, "lora_up": {}}
            for name, shape in e["arrays"]:
                group, key = name.split("/", 1)
                groups[group][key] = fetch(name, tuple(shape), i)
            lora = None
            if "lora" in e:
                lora = LoraAdapter(int(e["lora"]["rank"]), float(e["lora"]["scaling"]),
                                   groups["lora_down"], groups["lora_up"])
            subnets.append(Subnet(SubnetId(e["kind"], int(e["block"]), int(e["head"])),
                                  groups["params"], groups["norms"], lora, bool(e["frozen"])))
    except KeyError as exc:
        raise SchemaError(str(exc.args[0]), "missing field") from None
    if len(subnets) != config.num_subnets:
        raise SchemaError("subnets", f"expected {config.num_subnets} entries, found {len(subnets)}")
    return SubnetModel(config, subnets)


def to_bytes(model: SubnetModel) -> bytes:
    header = json.dumps(_header(model), sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for s in model.subnets for _, a in _arrays(s))
    return MAGIC + struct.pack("<I", len(header)) + header + body


def from_bytes(data: bytes) -> SubnetModel:
    if data[:len(MAGIC)] != MAGIC:
        raise InputError("not a checkpoint: bad magic bytes")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError("version", f"unsupported checkpoint version {header.get('version')!r}")
    offset = pos + hlen

    def fetch(name, shape, _):
        nonlocal offset
        n = int(np.prod(shape)) * 8
        if offset + n > len(data):
            raise InputError(f"checkpoint truncated while reading {name}")
        arr = np.frombuffer(data, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        offset += n
        return arr.astype(np.float64)

    model = _rebuild(header, fetch)
    if offset != len(data):
        raise InputError(f"{len(data) - offset} trailing bytes after checkpoint body")
    return model


def to_json(model: SubnetModel) -> str:
    """Text alternative to :func:`to_bytes`; floats are written with full precision."""
    d = _header(model)
    for e, s in zip(d["subnets"], model.subnets):
        e["values"] = {name: a.ravel().tolist() for name, a in _arrays(s)}
    return json.dumps(d, sort_keys=True)


def from_json(text: str) -> SubnetModel:
    d = json.loads(text)

    def fetch(name, shape, i):
        try:
            values = d["subnets"][i]["values"][name]
        except KeyError:
            raise SchemaError(f"subnets[{i}].values.{name}", "missing array") from None
        return np.array(values, dtype=np.float64).reshape(shape)

    return _rebuild(d, fetch)


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temp file and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: SubnetModel, path) -> None:
    path = Path(path)
    atomic_write(path, to_json(model) if path.suffix == ".json" else to_bytes(model))


def load_checkpoint(path) -> SubnetModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    if path.suffix == ".json":
        return from_json(path.read_text())
    return from_bytes(path.read_bytes())
