"""File formats: trajectories, camera rigs, weights, images and code dumps.

Trajectory files (``.3gst``) are little-endian::

    magic "3GST" | version u16 | T u16 | d_inv u16 | d_dyn u16
    per frame: N u32, then N records of
        position 3 x f32 | f_inv d_inv x f32 | f_dyn d_dyn x f32 | frozen u8

Weights files (``.3gsw``) hold named tensors::

    magic "3GSW" | version u16 | count u32
    per tensor: name_len u16 | name utf-8 | dtype u8 (0 f32, 1 f64, 2 i64)
                | ndim u8 | ndim x u32 dims | data
"""

import json
import math
import struct

import numpy as np
from PIL import Image

from .errors import BadMagic, BadVersion, ShapeMismatch, Truncated
from .features import ParticleFrame
from .geometry import Camera

TRAJ_MAGIC = b"3GST"
TRAJ_VERSION = 1
WEIGHTS_MAGIC = b"3GSW"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sHHHH")


def _record_dtype(d_inv, d_dyn):
    return np.dtype([("p", "<f4", (3,)), ("f_inv", "<f4", (d_inv,)),
                     ("f_dyn", "<f4", (d_dyn,)), ("frozen", "u1")])


def save_trajectory(frames, path):
    frames = list(frames)
    if not frames:
        raise ValueError("cannot save an empty trajectory")
    d_inv, d_dyn = frames[0].d_inv, frames[0].d_dyn
    dt = _record_dtype(d_inv, d_dyn)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, len(frames), d_inv, d_dyn))
        for f in frames:
            if f.d_inv != d_inv or f.d_dyn != d_dyn:
                raise ShapeMismatch("all frames must share feature dims")
            rec = np.zeros(len(f), dtype=dt)
            rec["p"], rec["f_inv"], rec["f_dyn"] = f.p, f.f_inv, f.f_dyn
            rec["frozen"] = f.frozen
            fh.write(struct.pack("<I", len(f)))
            fh.write(rec.tobytes())


def load_trajectory(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise Truncated("header incomplete", len(data))
    magic, version, T, d_inv, d_dyn = _HEADER.unpack_from(data)
    if magic != TRAJ_MAGIC:
        raise BadMagic(f"not a trajectory file (magic {magic!r})")
    if version != TRAJ_VERSION:
        raise BadVersion(f"unsupported trajectory version {version}")
    dt = _record_dtype(d_inv, d_dyn)
    off = _HEADER.size
    frames = []
    for k in range(T):
        if off + 4 > len(data):
            raise Truncated(f"frame {k} count missing", off)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        end = off + n * dt.itemsize
        if end > len(data):
            raise Truncated(f"frame {k} expects {n} records", off)
        rec = np.frombuffer(data, dtype=dt, count=n, offset=off)
        frames.append(ParticleFrame(rec["p"].astype(np.float64), rec["f_inv"].astype(np.float64),
                                    rec["f_dyn"].astype(np.float64), rec["frozen"] != 0))
        off = end
    return frames


def load_rig(path):
    with open(path) as fh:
        items = json.load(fh)
    return [rig_camera(c) for c in items]


def rig_camera(c):
    return Camera(np.reshape(c["K"], (3, 3)), np.reshape(c["R"], (3, 3)), np.asarray(c["t"]),
                  int(c["width"]), int(c["height"]))


def save_rig(cams, path):
    items = [dict(K=c.K.ravel().tolist(), R=c.R.ravel().tolist(), t=c.t.tolist(),
                  width=c.width, height=c.height) for c in cams]
    with open(path, "w") as fh:
        json.dump(items, fh, indent=1)


_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def save_weights(weights, path):
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<HI", WEIGHTS_VERSION, len(weights)))
        for name in sorted(weights):
            arr = np.asarray(weights[name])
            dt = np.dtype("<i8") if arr.dtype.kind in "iub" else np.dtype("<f8")
            if arr.dtype == np.float32:
                dt = np.dtype("<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_weights(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise BadMagic(f"not a weights file (magic {data[:4]!r})")
    if len(data) < 10:
        raise Truncated("header incomplete", len(data))
    version, count = struct.unpack_from("<HI", data, 4)
    if version != WEIGHTS_VERSION:
        raise BadVersion(f"unsupported weights version {version}")
    off = 10
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + nlen].decode()
            off += 2 + nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = math.prod(shape) * dt.itemsize
            if off + size > len(data):
                raise Truncated(f"tensor {name!r} data incomplete", off)
            out[name] = np.frombuffer(data, dtype=dt, count=math.prod(shape), offset=off).reshape(shape).copy()
            off += size
    except struct.error:
        raise Truncated("tensor header incomplete", off) from None
    return out


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(image, path):
    """Save an ``H x W x 3`` image with values in ``[0, 1]``."""
    pixels = getattr(image, "pixels", image)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path)


def read_mask(path):
    """Read an 8-bit grayscale PNG as a boolean foreground mask."""
    return np.asarray(Image.open(path).convert("L")) > 127


def psnr(I_a, I_b):
    """Peak signal-to-noise ratio in dB for images in ``[0, 1]``; ``inf`` if identical."""
    a = np.asarray(getattr(I_a, "pixels", I_a), dtype=np.float64)
    b = np.asarray(getattr(I_b, "pixels", I_b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def write_codes_csv(cloud, path):
    from .tspc import unpack_code
    b, t, s = unpack_code(cloud.codes, cloud.layout)
    with open(path, "w") as fh:
        fh.write("rank,code,batch,time,space,frame,index,x,y,z\n")
        for i in range(len(cloud)):
            x, y, z = cloud.positions[i]
            fh.write(f"{i},{int(cloud.codes[i])},{int(b[i])},{int(t[i])},{int(s[i])},"
                     f"{int(cloud.frame_of[i])},{int(cloud.perm[i])},{float(x)!r},{float(y)!r},{float(z)!r}\n")
