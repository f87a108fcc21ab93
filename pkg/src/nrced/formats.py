"""On-disk formats.

Beat-tensor file (``.nrcd``, also used for ``.nrcd-beta``)::

    b"NRCD" | u32 version=1 | u32 count | u32 channels | u32 K | u32 T
    float32[count, channels, K, T]                (row-major)
    count x (u64 r_peak_index, u8 label)          (packed)

Model checkpoint (``.ckpt``)::

    b"NRCK" | u32 version=1 | u64 header_bytes | JSON header (utf-8)
    float32 payload: every entry of header["arrays"] then header["state"],
    in the order listed, each row-major

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

BEAT_MAGIC = b"NRCD"
CKPT_MAGIC = b"NRCK"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_META = np.dtype([("r_peak_index", "<u8"), ("label", "u1")])


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_beat_tensors(tensors, r_peaks, labels):
    tensors = np.asarray(tensors)
    if tensors.ndim != 4:
        raise FormatError(f"expected (count, channels, K, T) tensors, got {tensors.shape}")
    count = tensors.shape[0]
    r_peaks = np.asarray(r_peaks)
    labels = np.asarray(labels)
    if r_peaks.shape != (count,) or labels.shape != (count,):
        raise FormatError("r_peaks and labels need one entry per tensor")
    meta = np.empty(count, dtype=_META)
    meta["r_peak_index"] = r_peaks
    meta["label"] = labels
    header = _HEADER.pack(BEAT_MAGIC, VERSION, count, *tensors.shape[1:])
    payload = np.ascontiguousarray(tensors, dtype="<f4").tobytes()
    return header + payload + meta.tobytes()


def decode_beat_tensors(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated beat-tensor header")
    magic, version, count, c, k, t = _HEADER.unpack_from(data)
    if magic != BEAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    n_payload = count * c * k * t * 4
    expected = _HEADER.size + n_payload + count * _META.itemsize
    if len(data) != expected:
        raise FormatError(f"size mismatch: {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    tensors = np.frombuffer(data, dtype="<f4", count=count * c * k * t, offset=off)
    meta = np.frombuffer(data, dtype=_META, count=count, offset=off + n_payload)
    return (tensors.reshape(count, c, k, t).astype(np.float32),
            meta["r_peak_index"].astype(np.int64), meta["label"].astype(np.uint8))


def write_beat_tensors(path, tensors, r_peaks, labels):
    atomic_write_bytes(path, encode_beat_tensors(tensors, r_peaks, labels))


def read_beat_tensors(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing beat-tensor file: {path}")
    return decode_beat_tensors(path.read_bytes())


# ------------------------------------------------------------------ checkpoints


def encode_checkpoint(params, extra=None):
    header = {
        "config": params.cfg.to_dict(),
        "seed": params.cfg.seed,
        "step": params.step,
        "arrays": [[k, list(v.shape)] for k, v in params.arrays.items()],
        "state": [[k, list(v.shape)] for k, v in params.state.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    for group in (params.arrays, params.state):
        for v in group.values():
            chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data):
    from .model import ModelConfig, build_layers, ModelParams

    if data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 4 + 12
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    layers, n_enc = build_layers(cfg)
    groups = []
    for key in ("arrays", "state"):
        out = {}
        for name, shape in header[key]:
            n = int(np.prod(shape))
            if off + 4 * n > len(data):
                raise FormatError("truncated checkpoint payload")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(
                np.float64).reshape(shape)
            off += 4 * n
        groups.append(out)
    if off != len(data):
        raise FormatError("trailing bytes in checkpoint")
    expected = [n for l in layers for n in l.param_names]
    if list(groups[0]) != expected:
        raise FormatError("checkpoint parameters do not match the configured architecture")
    params = ModelParams(cfg, layers, n_enc, groups[0], groups[1], int(header["step"]))
    return params, header.get("extra", {})


def write_checkpoint(path, params, extra=None):
    atomic_write_bytes(path, encode_checkpoint(params, extra))


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing checkpoint: {path}")
    return decode_checkpoint(path.read_bytes())
