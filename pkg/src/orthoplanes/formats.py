"""Binary and image formats: OPLN checkpoints, OPIM raw images, 8-bit PNG.

Everything binary is little-endian.

OPLN checkpoint::

    b"OPLN" u32 version=1 u8 tag(0 voxel, 1 triplane, 2 orthoplanes) u32 K u32 N u32 C
    f64[3][K] anchors                    (orthoplanes only)
    f32 features                         (layout of the in-memory feature array)
    u32 layer count, then per layer: u32 rows u32 cols f32[rows*cols] weights f32[cols] bias
    u8 mode (0 density, 1 delta-SDF) f64 log_alpha

OPIM raw image::

    b"OPIM" u32 version=1 u32 H u32 W f32[H][W][3]
"""
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from . import codebook
from .decoder import DELTA_SDF, DENSITY, MlpDecoder

CKPT_MAGIC = b"OPLN"
RAW_MAGIC = b"OPIM"
VERSION = 1


class FormatError(ValueError):
    pass


def _kind_header(rep):
    if rep.kind == codebook.VOXEL:
        return 0, rep.N, rep.C
    if rep.kind == codebook.TRIPLANE:
        return 1, rep.N, rep.C
    return rep.K, rep.N, rep.C


def encode_representation(rep):
    K, N, C = _kind_header(rep)
    parts = [CKPT_MAGIC, struct.pack("<IBIII", VERSION, rep.kind, K, N, C)]
    if rep.kind == codebook.ORTHOPLANES:
        parts.append(np.ascontiguousarray(rep.anchors, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(rep.features, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_decoder(decoder):
    parts = [struct.pack("<I", len(decoder.weights))]
    for W, b in zip(decoder.weights, decoder.biases):
        parts.append(struct.pack("<II", *W.shape))
        parts.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    parts.append(struct.pack("<Bd", 1 if decoder.mode == DELTA_SDF else 0, float(decoder.log_alpha[0])))
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def decode_checkpoint(data):
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not an OPLN checkpoint")
    version, tag, K, N, C = r.unpack("<IBIII")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if tag == codebook.VOXEL:
        rep = codebook.VoxelGrid(r.array("<f4", N ** 3 * C).reshape(N, N, N, C))
    elif tag == codebook.TRIPLANE:
        rep = codebook.TriPlane(r.array("<f4", 3 * N * N * C).reshape(3, N, N, C))
    elif tag == codebook.ORTHOPLANES:
        anchors = r.array("<f8", 3 * K).reshape(3, K)
        rep = codebook.PlaneGroupSet(r.array("<f4", 3 * K * N * N * C).reshape(3, K, N, N, C), anchors)
    else:
        raise FormatError(f"unknown representation tag {tag}")
    decoder = None
    if r.pos < len(data):
        (n_layers,) = r.unpack("<I")
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = r.unpack("<II")
            weights.append(r.array("<f4", rows * cols).reshape(rows, cols))
            biases.append(r.array("<f4", cols))
        mode, log_alpha = r.unpack("<Bd")
        decoder = MlpDecoder(weights, biases, DELTA_SDF if mode else DENSITY, log_alpha)
    return rep, decoder


def save_checkpoint(path, rep, decoder=None):
    data = encode_representation(rep)
    if decoder is not None:
        data += encode_decoder(decoder)
    Path(path).write_bytes(data)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def write_raw(path, img):
    img = np.asarray(img)
    H, W, _ = img.shape
    data = RAW_MAGIC + struct.pack("<III", VERSION, H, W) + np.ascontiguousarray(img, dtype="<f4").tobytes()
    Path(path).write_bytes(data)


def read_raw(path):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != RAW_MAGIC:
        raise FormatError(f"{path}: not an OPIM raw image")
    version, H, W = r.unpack("<III")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported raw version {version}")
    return r.array("<f4", H * W * 3).reshape(H, W, 3)


def to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def read_png(path, background=(1.0, 1.0, 1.0)):
    """Float RGB in [0, 1]; an alpha channel is composited over ``background``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    arr = arr.astype(np.float64) / 255.0
    if arr.shape[-1] == 4:
        a = arr[..., 3:]
        arr = arr[..., :3] * a + np.asarray(background) * (1.0 - a)
    return arr
