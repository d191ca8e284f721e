"""Dataset ingestion and the binary model file format.

Model file layout (all integers little-endian)::

    b"BRNM" | u32 version | u32 header_len | header JSON (utf-8)
    body: u32 record count, then per record (sorted by name)
        u16 name_len | name | u8 kind (0 = float32, 1 = bits) | u8 ndim
        | ndim x u32 dims | payload
    u32 CRC-32 of body

Real payloads are float32; bit payloads are the BitTensor word stream
(u64 words, LSB-first, bit 1 = +1, trailing bits zero). The header
records the network spec, padding and bit-order conventions, and the
training state flags.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import NetParams, NetworkSpec
from .ops import BatchNormParams
from .tensor import BitTensor, n_words, sign_pack, unpack

MAGIC = b"BRNM"
FORMAT_VERSION = 1
KIND_REAL = 0
KIND_BITS = 1

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


# --- datasets --------------------------------------------------------------


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    source: str = ""

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])

    def validate(self):
        for x, y, split in ((self.train_x, self.train_y, "train"), (self.test_x, self.test_y, "test")):
            if len(x) != len(y):
                raise FormatError(f"{split}: {len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise FormatError(f"{split}: labels outside [0, {self.num_classes})")
        return self


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (images: 0x803, labels: 0x801)."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(data) < hdr:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:hdr])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - hdr != count:
        raise FormatError(f"{path}: expected {count} bytes of data, found {len(data) - hdr}")
    return np.frombuffer(data, dtype=np.uint8, offset=hdr).reshape(dims)


def write_idx(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim not in (1, 3):
        raise ValueError("IDX writer handles label vectors and (N, H, W) image stacks")
    magic = IDX_LABELS if arr.ndim == 1 else IDX_IMAGES
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


IDX_NAMES = {
    "train_x": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_y": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_x": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_y": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find(directory: Path, names):
    for n in names:
        for cand in (directory / n, directory / (n + ".gz")):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"none of {names} in {directory}")


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W) -> float32 (N, 1, H, W), zero mean / unit std per dataset."""
    x = images.astype(np.float32) / 255.0
    x = (x - 0.1307) / 0.3081
    return x[:, None, :, :]


def load_idx_dir(directory, num_classes=None) -> Dataset:
    d = Path(directory)
    parts = {k: read_idx(_find(d, v)) for k, v in IDX_NAMES.items()}
    for k in ("train_x", "test_x"):
        if parts[k].ndim != 3:
            raise FormatError(f"{k}: expected a 3-D image file")
    ys = [parts["train_y"].astype(np.int64), parts["test_y"].astype(np.int64)]
    k = num_classes or int(max(y.max() for y in ys if y.size)) + 1
    return Dataset(
        normalize_images(parts["train_x"]),
        ys[0],
        normalize_images(parts["test_x"]),
        ys[1],
        k,
        source=f"idx:{d}",
    ).validate()


def synthetic_blobs(classes=4, size=8, n_train=512, n_test=256, spread=1.0, seed=0, channels=1) -> Dataset:
    """Gaussian blobs in image space: one random centroid image per class."""
    rng = np.random.default_rng(seed)
    shape = (channels, size, size)
    centroids = rng.standard_normal((classes,) + shape).astype(np.float32)

    def draw(n):
        y = np.arange(n) % classes
        rng.shuffle(y)
        x = centroids[y] + spread * rng.standard_normal((n,) + shape).astype(np.float32)
        return x.astype(np.float32), y.astype(np.int64)

    trx, try_ = draw(n_train)
    tex, tey = draw(n_test)
    desc = f"synthetic:classes={classes},size={size},n={n_train},test={n_test},spread={spread},seed={seed}"
    return Dataset(trx, try_, tex, tey, classes, source=desc).validate()


def parse_data_source(text: str) -> Dataset:
    """``synthetic[:k=v,...]`` or a directory of IDX files (optionally ``idx:DIR``)."""
    if text.startswith("synthetic"):
        kw = {}
        _, _, rest = text.partition(":")
        keys = {"classes": int, "size": int, "n": int, "test": int, "spread": float, "seed": int}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in keys:
                raise ValueError(f"unknown synthetic option {key!r}")
            kw[key] = keys[key](val)
        if "n" in kw:
            kw["n_train"] = kw.pop("n")
        if "test" in kw:
            kw["n_test"] = kw.pop("test")
        return synthetic_blobs(**kw)
    path = text[4:] if text.startswith("idx:") else text
    if not os.path.isdir(path):
        raise FileNotFoundError(f"data directory {path!r} not found")
    return load_idx_dir(path)


# --- model files -----------------------------------------------------------


def _header(params: NetParams) -> dict:
    return {
        "spec": params.spec.to_dict(),
        "padding": {"binary_conv": -1.0, "real_conv": 0.0},
        "bit_order": "lsb-first; bit 1 = +1, bit 0 = -1; u64 little-endian words",
        "absorbed": params.absorbed,
        "frozen": sorted(params.frozen),
        "bn": {name: {"eps": bn.eps, "momentum": bn.momentum} for name, bn in sorted(params.bn.items())},
    }


def _records(params: NetParams):
    binary = set(f"{n}.weight" for n in params.binary_layers) if params.absorbed else set()
    for name, arr in sorted(params.state().items()):
        if name in binary:
            yield name, KIND_BITS, arr.shape, sign_pack(arr).to_bytes()
        else:
            yield name, KIND_REAL, arr.shape, np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dumps_model(params: NetParams) -> bytes:
    header = json.dumps(_header(params), sort_keys=True, separators=(",", ":")).encode()
    body = bytearray()
    recs = list(_records(params))
    body += struct.pack("<I", len(recs))
    for name, kind, shape, payload in recs:
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<BB", kind, len(shape))
        body += struct.pack(f"<{len(shape)}I", *shape)
        body += payload
    out = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + bytes(body)
    return out + struct.pack("<I", zlib.crc32(body))


def save_model(params: NetParams, path):
    Path(path).write_bytes(dumps_model(params))


def loads_model(data: bytes) -> NetParams:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if len(data) < 12 + hlen + 4:
        raise ChecksumError("truncated model file")
    body = data[12 + hlen : -4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checksum mismatch")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    try:
        spec = NetworkSpec.from_dict(header["spec"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed spec in header: {exc}") from None

    tensors = {}
    pos = 0
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode()
        pos += nlen
        kind, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        numel = int(np.prod(shape, dtype=np.int64))
        if kind == KIND_REAL:
            nbytes = 4 * numel
        elif kind == KIND_BITS:
            nbytes = 8 * n_words(numel)
        else:
            raise FormatError(f"{name}: unknown record kind {kind}")
        if pos + nbytes > len(body):
            raise FormatError(f"{name}: declared shape {shape} overflows the file")
        chunk = body[pos : pos + nbytes]
        pos += nbytes
        if kind == KIND_REAL:
            tensors[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
        else:
            tensors[name] = unpack(BitTensor.from_bytes(shape, chunk), np.float32)
    if pos != len(body):
        raise FormatError("trailing bytes in model body")

    bns = {}
    try:
        for name, cfg in header["bn"].items():
            bns[name] = BatchNormParams(
                tensors.pop(f"{name}.gamma"),
                tensors.pop(f"{name}.beta"),
                tensors.pop(f"{name}.running_mean"),
                tensors.pop(f"{name}.running_var"),
                eps=cfg["eps"],
                momentum=cfg["momentum"],
            )
        params = NetParams(spec, tensors, bns, set(header["frozen"]), header["absorbed"])
    except KeyError as exc:
        raise FormatError(f"missing entry {exc} in model file") from None
    _check_shapes(params)
    return params


def _check_shapes(params: NetParams):
    from .model import build

    ref = build(params.spec).state()
    got = params.state()
    if set(ref) != set(got):
        raise FormatError(f"tensor set mismatch: missing {sorted(set(ref) - set(got))}")
    for k, v in ref.items():
        if v.shape != got[k].shape:
            raise FormatError(f"{k}: shape {got[k].shape} != {v.shape}")


def load_model(path) -> NetParams:
    return loads_model(Path(path).read_bytes())


def write_report(path, records):
    """Line-delimited JSON."""
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
