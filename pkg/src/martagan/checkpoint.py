"""Binary checkpoints: named tensors plus a config echo, bit-exact.

Layout (all little-endian):

    magic  b"MRTA"
    u32    format version (1)
    u32    tensor count
    per tensor:
        u16  name length, then UTF-8 name
        u8   dtype code (0 = float32, 1 = float64, 2 = uint8)
        u8   rank
        u32  x rank   dims
        raw  C-order payload
    u32    iteration counter

Training state is one bundle: model parameters, batch-norm running
statistics, Adam moments (``<param>/adam_m`` / ``/adam_v``), optimizer
step counters, and the architecture + training configuration serialized
as JSON under ``meta/config_json``. Files are written to a temp path
and renamed, so a crash never leaves a half-written checkpoint behind.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from .ioutil import atomic_open
from .model import ArchConfig, Discriminator, Generator
from .train import Adam, TrainConfig

MAGIC = b"MRTA"
VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def save_tensors(path, tensors, iteration=0):
    """Write a name -> ndarray mapping; dtypes limited to f32/f64/u8."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # not ascontiguousarray: that would promote rank-0 to 1-D
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"checkpoint tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"checkpoint tensor name too long: {name[:40]!r}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    chunks.append(struct.pack("<I", int(iteration)))
    with atomic_open(path) as fh:
        fh.write(b"".join(chunks))


def load_tensors(path):
    """Read a checkpoint back as (OrderedDict[name, ndarray], iteration)."""
    with open(path, "rb") as fh:
        data = fh.read()

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise ValueError(f"{path}: truncated while reading {what} (wanted {n} bytes, had {len(data) - off})")
        piece = data[off : off + n]
        off += n
        return piece

    off = 0
    if take(4, "magic") != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"tensor {name!r} dtype/rank"))
        if code not in _CODE_DTYPES:
            raise ValueError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"tensor {name!r} dims"))
        dt = _CODE_DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64)) if rank else dt.itemsize
        payload = take(nbytes, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    (iteration,) = struct.unpack("<I", take(4, "iteration counter"))
    return out, iteration


def _config_blob(arch_cfg, train_cfg):
    doc = {"arch": arch_cfg.to_dict(), "train": train_cfg.to_dict()}
    return np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def save_training_checkpoint(path, gen, disc, opt_g, opt_d, arch_cfg, train_cfg, iteration):
    tensors = OrderedDict()
    tensors["meta/config_json"] = _config_blob(arch_cfg, train_cfg)
    for model in (gen, disc):
        for name, p in model.named_params().items():
            tensors[name] = p.data
        for name, buf in model.named_buffers().items():
            tensors[name] = buf
    for prefix, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        for name, arr in opt.state_arrays().items():
            tensors[f"{prefix}/{name}"] = arr
        tensors[f"meta/{prefix}_t"] = np.asarray(float(opt.t))
    save_tensors(path, tensors, iteration)


def load_training_checkpoint(path, lr=None):
    """Rebuild models and optimizers from a checkpoint.

    Returns (gen, disc, opt_g, opt_d, arch_cfg, train_cfg, iteration).
    The architecture comes from the embedded config echo; ``lr`` can
    override the stored learning rate for continued training.
    """
    tensors, iteration = load_tensors(path)
    if "meta/config_json" not in tensors:
        raise ValueError(f"{path}: checkpoint has no embedded config")
    doc = json.loads(bytes(tensors["meta/config_json"]).decode("utf-8"))
    arch_cfg = ArchConfig.from_dict(doc["arch"])
    train_cfg = TrainConfig.from_dict(doc["train"])
    if lr is not None:
        train_cfg.lr = lr

    gen = Generator(arch_cfg, seed=0)
    disc = Discriminator(arch_cfg, seed=0)
    for model in (gen, disc):
        for name, p in model.named_params().items():
            arr = tensors.get(name)
            if arr is None:
                raise ValueError(f"{path}: checkpoint missing parameter {name!r}")
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data[...] = arr
        for name, buf in model.named_buffers().items():
            arr = tensors.get(name)
            if arr is None:
                raise ValueError(f"{path}: checkpoint missing buffer {name!r}")
            buf[...] = arr

    opt_g = Adam(gen.named_params(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    opt_d = Adam(disc.named_params(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    for prefix, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        arrays = {}
        for name in opt.names:
            for kind in ("adam_m", "adam_v"):
                key = f"{prefix}/{name}/{kind}"
                if key not in tensors:
                    raise ValueError(f"{path}: checkpoint missing optimizer state {key!r}")
                arrays[f"{name}/{kind}"] = tensors[key]
        opt.load_state_arrays(arrays, int(tensors[f"meta/{prefix}_t"]))
    return gen, disc, opt_g, opt_d, arch_cfg, train_cfg, iteration
