"""Binary tensor container and checkpoint files.

Tensor container: magic ``TNSR``, version byte, rank byte, dims as
little-endian u64, then the payload as little-endian IEEE-754 float32
in row-major order.

Checkpoint: magic ``TCKP``, version byte, a length-prefixed UTF-8
config text, then two sections (parameters, optimizer state), each a
u32 record count followed by length-prefixed (name, tensor) records.
Records are written sorted by name so identical states produce
identical bytes.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .optim import ParamStore

__all__ = [
    "write_tensor",
    "read_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "restore_store",
]

_TNSR_MAGIC = b"TNSR"
_CKPT_MAGIC = b"TCKP"
_VERSION = 1


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = _TNSR_MAGIC + struct.pack("<BB", _VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + arr.tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != _TNSR_MAGIC:
        raise FormatError(f"bad tensor magic {blob[:4]!r}")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack_from(f"<{rank}Q", blob, 6) if rank else ()
    offset = 6 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(dims).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    blob = tensor_to_bytes(arr)
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (blob_len,) = struct.unpack("<Q", fh.read(8))
    return name, tensor_from_bytes(fh.read(blob_len))


def save_checkpoint(path, store: ParamStore, config_text: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<B", _VERSION))
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        names = sorted(store.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_record(fh, name, store.params[name].data)
        fh.write(struct.pack("<I", 3 * len(names)))
        for name in names:
            st = store.state[name]
            _write_record(fh, name + ".m", st["m"])
            _write_record(fh, name + ".v", st["v"])
            _write_record(fh, name + ".step", np.array([st["step"]], dtype=np.float32))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, dict], str]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config_text = fh.read(cfg_len).decode("utf-8")
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = dict(_read_record(fh) for _ in range(n_params))
        (n_state,) = struct.unpack("<I", fh.read(4))
        state: dict[str, dict] = {}
        for _ in range(n_state):
            name, arr = _read_record(fh)
            base, _, kind = name.rpartition(".")
            entry = state.setdefault(base, {})
            entry[kind] = int(arr[0]) if kind == "step" else arr
    return params, state, config_text


def restore_store(store: ParamStore, path, strict: bool = True) -> str:
    """Load parameters and optimizer state into an existing store."""
    params, state, config_text = load_checkpoint(path)
    if strict:
        missing = set(store.params) - set(params)
        extra = set(params) - set(store.params)
        if missing or extra:
            raise FormatError(
                f"checkpoint/model mismatch: missing={sorted(missing)[:4]} "
                f"extra={sorted(extra)[:4]}"
            )
    for name, arr in params.items():
        if name not in store.params:
            continue
        p = store.params[name]
        if p.data.shape != arr.shape:
            raise FormatError(
                f"shape mismatch for {name!r}: {p.data.shape} vs {arr.shape}"
            )
        p.data = arr.astype(p.data.dtype)
        if name in state:
            st = store.state[name]
            st["m"] = state[name]["m"].astype(p.data.dtype)
            st["v"] = state[name]["v"].astype(p.data.dtype)
            st["step"] = state[name]["step"]
    return config_text
