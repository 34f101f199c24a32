"""Versioned checkpoint container.

Layout (all integers little-endian)::

    b"TRAJLAB-CKPT v1\\n"        16-byte magic
    uint64 header_len
    header                     UTF-8 JSON, sorted keys, no whitespace
    tensor data                raw little-endian arrays, back to back

The header holds ``net_config``, ``train_config``, ``step``, ``config_hash``,
``best_validation``, ``extra`` and a ``tensors`` list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` entries whose offsets are
relative to the start of the data section. Parameter tensors are named
``model/<state-dict key>``; Adam moments ``optim/<param index>/exp_avg`` and
``optim/<param index>/exp_avg_sq`` with their step counts in ``extra``.
Writing a loaded checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TRAJLAB-CKPT v1\n"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


@dataclass
class Checkpoint:
    net_config: dict
    model_state: "OrderedDict[str, torch.Tensor]"
    optimizer_state: dict = field(default_factory=dict)
    step: int = 0
    config_hash: str = ""
    best_validation: bool = False
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise ValueError(f"unsupported tensor dtype {t.dtype}")
    return name


def _tensors(ckpt: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    out = [(f"model/{k}", v) for k, v in ckpt.model_state.items()]
    for idx in sorted(ckpt.optimizer_state.get("state", {})):
        st = ckpt.optimizer_state["state"][idx]
        for key in ("exp_avg", "exp_avg_sq"):
            out.append((f"optim/{idx}/{key}", st[key]))
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in _tensors(ckpt):
        dname = _dtype_name(t)
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype(_DTYPES[dname]))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dname, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    opt = ckpt.optimizer_state
    extra = dict(ckpt.extra)
    if opt:
        extra["optim_steps"] = {str(i): float(s["step"]) for i, s in sorted(opt.get("state", {}).items())}
        extra["optim_param_groups"] = opt.get("param_groups", [])
    header = {
        "net_config": ckpt.net_config,
        "train_config": ckpt.train_config,
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "best_validation": bool(ckpt.best_validation),
        "extra": extra,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise ValueError("not a trajlab checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    model_state = OrderedDict()
    optim_state: dict = {}
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=base + e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.copy())
        kind, rest = e["name"].split("/", 1)
        if kind == "model":
            model_state[rest] = t
        else:
            idx, key = rest.split("/")
            optim_state.setdefault(int(idx), {})[key] = t
    extra = dict(header.get("extra", {}))
    optimizer_state = {}
    if optim_state:
        steps = extra.pop("optim_steps", {})
        groups = extra.pop("optim_param_groups", [])
        for idx, st in optim_state.items():
            st["step"] = torch.tensor(steps[str(idx)])
        optimizer_state = {"state": optim_state, "param_groups": groups}
    return Checkpoint(
        net_config=header["net_config"],
        model_state=model_state,
        optimizer_state=optimizer_state,
        step=header["step"],
        config_hash=header["config_hash"],
        best_validation=header["best_validation"],
        train_config=header["train_config"],
        extra=extra,
    )


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
