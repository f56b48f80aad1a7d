"""Binary model files (DGM1): config, normalization stats, named parameters.

The format round-trips bit-exactly: magic, version, config fields, optional
normalization stats, then one named section per parameter array (u16 name
length, name bytes, u32 rank, u32 dims, little-endian float64 data).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .clstm import ModelState, NetworkConfig, init_model, named_parameters
from .errors import ModelFileError
from .tf_features import NormalizationStats

MODEL_MAGIC = b"DGM1"
MODEL_VERSION = 1


def _sections(state: ModelState) -> dict[str, np.ndarray]:
    out = dict(named_parameters(state))
    out["bn1/running_mean"] = state.bn1.running_mean
    out["bn1/running_var"] = state.bn1.running_var
    out["bn2/running_mean"] = state.bn2.running_mean
    out["bn2/running_var"] = state.bn2.running_var
    return out


def save_model(path: str | Path, state: ModelState) -> None:
    cfg = state.config
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<I", MODEL_VERSION)
    buf += struct.pack(
        "<7I",
        cfg.timesteps,
        cfg.width,
        cfg.in_channels,
        cfg.hidden_channels[0],
        cfg.hidden_channels[1],
        cfg.kernel_widths[0],
        cfg.kernel_widths[1],
    )
    buf += struct.pack("<ddQ", cfg.dropout_rate, cfg.l2_lambda, cfg.seed)
    if state.norm_stats is not None:
        buf += struct.pack("<B", 1)
        buf += np.ascontiguousarray(state.norm_stats.mean, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(state.norm_stats.std, dtype="<f8").tobytes()
    else:
        buf += struct.pack("<B", 0)

    sections = _sections(state)
    buf += struct.pack("<I", len(sections))
    for name, arr in sections.items():
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_model(path: str | Path) -> ModelState:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_VERSION:
        raise ModelFileError(f"{path}: unsupported version {version}")
    pos = 8
    t, w, ci, c1, c2, k1, k2 = struct.unpack_from("<7I", data, pos)
    pos += 28
    dropout_rate, l2_lambda, seed = struct.unpack_from("<ddQ", data, pos)
    pos += 24
    (has_stats,) = struct.unpack_from("<B", data, pos)
    pos += 1
    norm_stats = None
    if has_stats:
        mean = np.frombuffer(data, dtype="<f8", count=4, offset=pos).copy()
        pos += 32
        std = np.frombuffer(data, dtype="<f8", count=4, offset=pos).copy()
        pos += 32
        norm_stats = NormalizationStats(mean=mean, std=std)

    cfg = NetworkConfig(
        timesteps=t,
        width=w,
        in_channels=ci,
        hidden_channels=(c1, c2),
        kernel_widths=(k1, k2),
        dropout_rate=dropout_rate,
        l2_lambda=l2_lambda,
        seed=int(seed),
    )
    state = init_model(cfg, norm_stats=norm_stats)

    (n_sections,) = struct.unpack_from("<I", data, pos)
    pos += 4
    sections = _sections(state)
    seen = set()
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        if name not in sections:
            raise ModelFileError(f"{path}: unknown section {name!r}")
        target = sections[name]
        if target.shape != tuple(shape):
            raise ModelFileError(
                f"{path}: section {name!r} shape {shape} != expected {target.shape}"
            )
        target[...] = values.reshape(shape)
        seen.add(name)
    missing = set(sections) - seen
    if missing:
        raise ModelFileError(f"{path}: missing sections {sorted(missing)}")
    return state
