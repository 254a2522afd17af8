"""Binary checkpoint format with a self-describing header.

Layout (all integers little-endian):

    magic            12 bytes  b"EEPIPE-CKPT\\0"
    version          uint32
    n_config         uint32, then n_config length-prefixed key/value pairs
                     (uint32 byte length + utf-8 payload for each string)
    n_tensors        uint32, then per tensor: name (length-prefixed),
                     ndim uint32, dims uint64 each, offset uint64 into payload
    payload          float64 little-endian, row-major, in table order

Round trips are bit-exact: arrays are written with their raw bytes and the
config is serialized with ``repr`` for floats.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .model import EarlyExitModel, ExitSpec, HeadDesc, ModelConfig, _head_param_names

MAGIC = b"EEPIPE-CKPT\x00"
VERSION = 1


def _encode_exits(exits):
    return ",".join(f"{e.layer_index}:{e.head_kind}:{e.loss_weight!r}" for e in exits)


def _decode_exits(text):
    exits = []
    for part in filter(None, text.split(",")):
        idx, kind, weight = part.split(":")
        exits.append(ExitSpec(int(idx), kind, float(weight)))
    return tuple(exits)


def config_to_pairs(config: ModelConfig):
    return [
        ("num_layers", str(config.num_layers)),
        ("hidden_dim", str(config.hidden_dim)),
        ("num_heads", str(config.num_heads)),
        ("vocab_size", str(config.vocab_size)),
        ("max_seq_len", str(config.max_seq_len)),
        ("exits", _encode_exits(config.exits)),
        ("tie_embeddings", str(int(config.tie_embeddings))),
    ]


def config_from_pairs(pairs):
    d = dict(pairs)
    return ModelConfig(
        num_layers=int(d["num_layers"]),
        hidden_dim=int(d["hidden_dim"]),
        num_heads=int(d["num_heads"]),
        vocab_size=int(d["vocab_size"]),
        max_seq_len=int(d["max_seq_len"]),
        exits=_decode_exits(d["exits"]),
        tie_embeddings=bool(int(d["tie_embeddings"])),
    )


def _write_str(fh, s):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_model(path, model: EarlyExitModel):
    names = sorted(model.params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        pairs = config_to_pairs(model.config)
        fh.write(struct.pack("<I", len(pairs)))
        for k, v in pairs:
            _write_str(fh, k)
            _write_str(fh, v)
        fh.write(struct.pack("<I", len(names)))
        offset = 0
        for name in names:
            arr = model.params[name].data
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(struct.pack("<Q", offset))
            offset += arr.nbytes
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())


def load_model(path) -> EarlyExitModel:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (n_pairs,) = struct.unpack("<I", fh.read(4))
        pairs = [(_read_str(fh), _read_str(fh)) for _ in range(n_pairs)]
        config = config_from_pairs(pairs)
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        table = []
        for _ in range(n_tensors):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            dims = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            (offset,) = struct.unpack("<Q", fh.read(8))
            table.append((name, dims, offset))
        payload = fh.read()

    params = {}
    for name, dims, offset in table:
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        params[name] = Tensor(arr.reshape(dims).copy(), requires_grad=True)
    return EarlyExitModel(config, params, _rebuild_heads(config))


def _rebuild_heads(config: ModelConfig):
    heads = []
    for e in sorted(config.exits, key=lambda e: e.layer_index):
        key = f"exit_l{e.layer_index}"
        out_name = "tok_emb" if config.tie_embeddings else f"{key}.out"
        names = _head_param_names(key, e.head_kind, out_name)
        heads.append(HeadDesc(key, e.head_kind, e.layer_index, e.loss_weight, False, names))
    heads.append(
        HeadDesc("final", "norm+embed", config.num_layers, 1.0, True,
                 {"norm": "final.norm", "out": "final.out"})
    )
    heads.sort(key=lambda hd: (hd.layer_index, hd.is_final))
    return heads
