"""Binary checkpoint container.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"FGINCKPT"
    version      u32       1
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys)
    n_tensors    u32
    n_tensors times:
        name_len u16, name (UTF-8)
        dtype    u8        0 = float32, 1 = float64
        ndim     u8
        dims     ndim x u32
        payload  prod(dims) little-endian values

Header keys: ``model_config``, ``group_spec``, ``dtype``, ``adam_t`` and
``extra`` (free-form, used for resumable training state).  Tensor names are
prefixed ``param/``, ``buffer/``, ``adam_m/``, ``adam_v/``; extra stores
(e.g. the best-so-far weights) add their own prefix in front of those.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import ModelConfig, check_layout
from .params import ParamStore

MAGIC = b"FGINCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_SECTIONS = (("param/", "params"), ("buffer/", "buffers"), ("adam_m/", "m"), ("adam_v/", "v"))


def _store_tensors(store: ParamStore, prefix: str = ""):
    for tag, attr in _SECTIONS:
        for name, arr in getattr(store, attr).items():
            yield prefix + tag + name, arr


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    code = _CODES.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def dumps(store: ParamStore, cfg: ModelConfig, extra: dict | None = None,
          extra_stores: dict | None = None) -> bytes:
    header = {
        "model_config": cfg.to_dict(),
        "group_spec": cfg.group_spec().to_dict(),
        "dtype": store.dtype.str,
        "adam_t": store.t,
        "extra": extra or {},
        "extra_stores": {k: s.t for k, s in (extra_stores or {}).items()},
    }
    tensors = list(_store_tensors(store))
    for prefix, s in (extra_stores or {}).items():
        tensors += list(_store_tensors(s, prefix + "/"))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(store: ParamStore, cfg: ModelConfig, path, extra: dict | None = None,
                    extra_stores: dict | None = None) -> None:
    data = dumps(store, cfg, extra, extra_stores)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, expect: ModelConfig | None = None):
    """Returns ``(store, cfg, extra, extra_stores)``."""
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"checkpoint version {version} unsupported (expected {VERSION})")
    header = json.loads(r.take(hlen).decode("utf-8"))
    for key in ("model_config", "dtype", "adam_t"):
        if key not in header:
            raise DataError(f"checkpoint header missing field {key!r}")
    cfg = ModelConfig.from_dict(header["model_config"])
    if expect is not None:
        check_compatible(cfg, expect)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise DataError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise DataError("trailing bytes after last tensor")

    def build(prefix: str, t: int) -> ParamStore:
        st = ParamStore(np.dtype(header["dtype"]))
        for tag, attr in _SECTIONS:
            target = getattr(st, attr)
            for name, arr in tensors.items():
                if name.startswith(prefix + tag):
                    target[name[len(prefix + tag):]] = arr
        st.grads = {k: np.zeros_like(v) for k, v in st.params.items()}
        st.t = t
        return st

    store = build("", int(header["adam_t"]))
    check_layout(store, cfg)
    extra_stores = {k: build(k + "/", t) for k, t in header.get("extra_stores", {}).items()}
    return store, cfg, header.get("extra", {}), extra_stores


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Read a checkpoint; with ``expect``, refuse one whose G, F or s differ."""
    return loads(Path(path).read_bytes(), expect)


COMPAT_FIELDS = ("n_bands", "group_size", "overlap", "features", "inception_blocks", "scale",
                 "use_band_grouping", "use_spectral_fusion", "upsampling", "use_global_residual", "projection_scale")


def check_compatible(found: ModelConfig, expect: ModelConfig) -> None:
    for f in COMPAT_FIELDS:
        a, b = getattr(found, f), getattr(expect, f)
        if a != b:
            raise ConfigError(f"checkpoint/config mismatch on {f}: checkpoint has {a!r}, expected {b!r}")
