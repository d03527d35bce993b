"""Single-file checkpoint: run config plus named tensors.

Layout (little-endian)::

    magic        b"OCNC"
    version      uint16 (=1)
    config_len   uint32, then config text (UTF-8, ``key = value`` lines)
    num_classes  uint32
    num_tensors  uint32
    per tensor:
        name_len uint16, name (UTF-8)
        dtype    uint8   0=float32 1=float64 2=int64
        ndim     uint8, shape uint32[ndim]
        data     row-major, IEEE-754 for floats
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .errors import ValidationError

MAGIC = b"OCNC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


def save_checkpoint(path, model) -> None:
    text = config_mod.dumps(model.cfg).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", MAGIC, VERSION, len(text)))
        fh.write(text)
        fh.write(struct.pack("<II", model.num_classes, len(state)))
        for name, t in state.items():
            code = _CODES.get(t.dtype)
            if code is None:
                raise ValidationError(f"unsupported tensor dtype {t.dtype} for {name}")
            raw = name.encode("utf-8")
            arr = t.detach().cpu().numpy().astype(_DTYPES[code], copy=False)
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Returns (RunConfig, num_classes, {name: tensor})."""
    data = Path(path).read_bytes()
    magic, version, clen = struct.unpack_from("<4sHI", data, 0)
    if magic != MAGIC or version != VERSION:
        raise ValidationError(f"{path}: not a version-{VERSION} checkpoint")
    off = struct.calcsize("<4sHI")
    cfg = config_mod.loads(data[off:off + clen].decode("utf-8"))
    off += clen
    num_classes, count = struct.unpack_from("<II", data, off)
    off += 8
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return cfg, num_classes, tensors


def load_model(path):
    from .model import OCNet

    cfg, num_classes, tensors = read_checkpoint(path)
    model = OCNet(cfg, num_classes)
    model.load_state_dict(tensors)
    model.eval()
    return model
