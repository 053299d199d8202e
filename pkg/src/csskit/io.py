"""WAV and checkpoint persistence.

Checkpoint layout (all integers little-endian)::

    magic          8 bytes   b"CSSKCKPT"
    version        uint32
    header_len     uint64
    header         header_len bytes of UTF-8 JSON
    payload        raw tensor bytes, concatenated in header order

The header holds ``net_config``, a ``tensors`` list of
``{name, shape, dtype, offset, nbytes}`` (offsets relative to the payload
start), ``payload_bytes``, and ``optimizer`` (``{"t": step}`` or null).
Optimizer moments are stored as extra tensors named ``optimizer.m.<param>``
and ``optimizer.v.<param>``.
"""
import hashlib
import json
import struct

import numpy as np
from scipy.io import wavfile

from .autograd import Adam, Tensor
from .vararray import NetConfig, VarArray, _shapes

MAGIC = b"CSSKCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


# -- wav -------------------------------------------------------------------------

def wav_read(path):
    """Read a PCM16 or float32 WAV as ``((C, T) float array, sample_rate)``.

    PCM16 is scaled by 1/32768, so -32768 maps to -1.0.
    """
    try:
        fs, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error) as exc:
        raise ValueError(f"{path}: malformed WAV file ({exc})") from None
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype != np.float32:
        raise ValueError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    data = data.reshape(len(data), -1).T
    return np.ascontiguousarray(data), fs


def wav_write(path, wave, fs=16000, pcm16=False):
    wave = np.atleast_2d(np.asarray(wave))
    if pcm16:
        data = np.clip(np.round(wave * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.astype(np.float32)
    wavfile.write(path, fs, np.ascontiguousarray(data.T))


# -- checkpoints -------------------------------------------------------------------

def _tensor_items(model, opt):
    items = [(k, p.data) for k, p in model.params.items()]
    if opt is not None:
        items += [(f"optimizer.m.{k}", v) for k, v in opt.m.items()]
        items += [(f"optimizer.v.{k}", v) for k, v in opt.v.items()]
    return items


def save_checkpoint(path, model, opt=None):
    items = _tensor_items(model, opt)
    entries = []
    offset = 0
    for name, arr in items:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        nbytes = arr.size * dt.itemsize
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str,
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "net_config": model.cfg.to_dict(),
        "tensors": entries,
        "payload_bytes": offset,
        "optimizer": None if opt is None else {"t": opt.t},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for (_, arr), e in zip(items, entries):
            fh.write(np.ascontiguousarray(arr, dtype=np.dtype(e["dtype"])).tobytes())


def read_checkpoint(path):
    """Raw ``(header, {name: array})`` after integrity checks."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a csskit checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[20 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says "
                              f"{header['payload_bytes']}")
    if sum(e["nbytes"] for e in header["tensors"]) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: tensor sizes do not add up to the payload length")
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, tensors


def _shape_diff(cfg, tensors):
    want = _shapes(cfg)
    have = {k: tuple(v.shape) for k, v in tensors.items() if not k.startswith("optimizer.")}
    lines = []
    for k in sorted(set(want) | set(have)):
        a, b = want.get(k), have.get(k)
        if a != b:
            lines.append(f"  {k}: expected {a}, checkpoint has {b}")
    return lines


def load_checkpoint(path, expect=None, trainable=True):
    """Load ``(model, optimizer_state)``.

    With ``expect`` (a NetConfig) the stored tensors must match its shapes;
    otherwise a :class:`CheckpointError` lists every differing tensor.
    """
    header, tensors = read_checkpoint(path)
    stored = NetConfig(**header["net_config"])
    cfg = expect or stored
    diff = _shape_diff(cfg, tensors)
    if diff:
        raise CheckpointError(f"{path}: checkpoint does not match the network config:\n"
                              + "\n".join(diff))
    params = {k: Tensor(tensors[k].copy(), requires_grad=trainable, name=k) for k in _shapes(cfg)}
    model = VarArray(cfg, params=params)
    opt_state = None
    if header["optimizer"] is not None:
        opt_state = {"t": header["optimizer"]["t"]}
        for k in params:
            opt_state[f"m.{k}"] = tensors[f"optimizer.m.{k}"]
            opt_state[f"v.{k}"] = tensors[f"optimizer.v.{k}"]
    return model, opt_state


def restore_optimizer(model, opt_state, **kw):
    opt = Adam(model.params, **kw)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    return opt


def param_hash(params):
    h = hashlib.sha256()
    for k in sorted(params):
        v = params[k]
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        h.update(k.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
