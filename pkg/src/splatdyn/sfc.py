"""Grid quantization and 3D space-filling curve codes.

Coordinates are quantized to a uniform grid with 16 bits per axis and mapped
to 48-bit keys along either a Z-order (Morton) curve or a Hilbert curve. All
functions are vectorized over leading axes: pass an ``(..., 3)`` array of
coordinates, get an ``(...)`` array of ``uint64`` codes back.
"""

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange

BITS = 16
GRID_MAX = 1 << BITS

_U64 = np.uint64


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of cubic cells ``grid_size`` meters wide anchored at ``origin``."""

    grid_size: float = 0.004
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.grid_size > 0:
            raise ValueError(f"grid_size must be positive, got {self.grid_size}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 3:
            raise ValueError("origin must be a 3D point")

    @classmethod
    def from_points(cls, points, grid_size=0.004):
        """Anchor the grid one cell below the bounding-box minimum of ``points``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls(grid_size)
        lo = pts.min(axis=0) - grid_size
        return cls(grid_size, tuple(lo))

    @property
    def extent(self):
        """Edge length in meters of the addressable cube."""
        return GRID_MAX * self.grid_size


@dataclass(frozen=True)
class SfcPattern:
    curve: str
    axes: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.curve not in ("zorder", "hilbert"):
            raise ValueError(f"unknown curve {self.curve!r}")
        if sorted(self.axes) != [0, 1, 2]:
            raise ValueError(f"axes must permute (0, 1, 2), got {self.axes}")

    @property
    def name(self):
        short = "z" if self.curve == "zorder" else "h"
        return short if self.axes == (0, 1, 2) else short + "t"


ZORDER = SfcPattern("zorder")
ZORDER_T = SfcPattern("zorder", (2, 1, 0))
HILBERT = SfcPattern("hilbert")
HILBERT_T = SfcPattern("hilbert", (2, 1, 0))

PATTERNS = {p.name: p for p in (ZORDER, ZORDER_T, HILBERT, HILBERT_T)}


def get_pattern(name):
    if isinstance(name, SfcPattern):
        return name
    try:
        return PATTERNS[name]
    except KeyError:
        raise ValueError(f"unknown pattern {name!r}; expected one of {sorted(PATTERNS)}") from None


def quantize(p, spec):
    """Return ``floor((p - origin) / grid_size)`` as int64 grid coordinates.

    Raises OutOfRange when any axis lands outside ``[0, 2**16)``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1:] != (3,):
        raise ValueError(f"expected (..., 3) positions, got shape {p.shape}")
    scaled = (p - np.asarray(spec.origin)) / spec.grid_size
    if not np.all(np.isfinite(scaled)):
        raise OutOfRange("non-finite position")
    g = np.floor(scaled)
    bad = (g < 0) | (g >= GRID_MAX)
    if bad.any():
        first = np.argwhere(bad.any(axis=-1))[0]
        raise OutOfRange(
            f"position {p[tuple(first)].tolist()} falls outside the "
            f"{spec.extent:.3f} m grid anchored at {spec.origin}"
        )
    return g.astype(np.int64)


def _as_coords(g):
    g = np.asarray(g)
    if g.shape[-1:] != (3,):
        raise ValueError(f"expected (..., 3) grid coordinates, got shape {g.shape}")
    if np.any(g < 0) or np.any(g >= GRID_MAX):
        raise OutOfRange("grid coordinate outside [0, 2**16)")
    return g.astype(_U64)


def _spread(v):
    # place bit k of a 16-bit value at bit 3k
    v = v & _U64(0xFFFF)
    v = (v | (v << _U64(16))) & _U64(0x0000FF0000FF)
    v = (v | (v << _U64(8))) & _U64(0x00F00F00F00F)
    v = (v | (v << _U64(4))) & _U64(0x0C30C30C30C3)
    v = (v | (v << _U64(2))) & _U64(0x249249249249)
    return v


def _compact(v):
    v = v & _U64(0x249249249249)
    v = (v | (v >> _U64(2))) & _U64(0x0C30C30C30C3)
    v = (v | (v >> _U64(4))) & _U64(0x00F00F00F00F)
    v = (v | (v >> _U64(8))) & _U64(0x0000FF0000FF)
    v = (v | (v >> _U64(16))) & _U64(0xFFFF)
    return v


def morton_encode(g):
    """Interleave bits as ``(z_k, y_k, x_k)`` per level with x least significant."""
    g = _as_coords(g)
    return _spread(g[..., 0]) | (_spread(g[..., 1]) << _U64(1)) | (_spread(g[..., 2]) << _U64(2))


def morton_decode(code):
    code = np.asarray(code, dtype=_U64)
    x = _compact(code)
    y = _compact(code >> _U64(1))
    z = _compact(code >> _U64(2))
    return np.stack([x, y, z], axis=-1).astype(np.int64)


# Hilbert codes use Skilling's transpose construction ("Programming the
# Hilbert curve", 2004). Axis 0 occupies the most significant bit of each
# 3-bit group, which is the convention of the reference algorithm.


_ALL = _U64(0xFFFFFFFFFFFFFFFF)


def _axes_to_transpose(x, bits):
    x = [a.copy() for a in x]
    n = len(x)
    q = _U64(1 << (bits - 1))
    shift = _U64(bits - 1)
    while q > 1:
        p = q - _U64(1)
        for i in range(n):
            # all-ones where bit q of x[i] is set
            hit = ((x[i] & q) >> shift) * _ALL
            t = (x[0] ^ x[i]) & p & ~hit
            x[0] ^= (p & hit) | t
            if i:
                x[i] ^= t
        q >>= _U64(1)
        shift -= _U64(1)
    for i in range(1, n):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    q = _U64(1 << (bits - 1))
    shift = _U64(bits - 1)
    while q > 1:
        t ^= (q - _U64(1)) & (((x[n - 1] & q) >> shift) * _ALL)
        q >>= _U64(1)
        shift -= _U64(1)
    return [a ^ t for a in x]


def _transpose_to_axes(x, bits):
    x = [a.copy() for a in x]
    n = len(x)
    top = _U64(2 << (bits - 1))
    t = x[n - 1] >> _U64(1)
    for i in range(n - 1, 0, -1):
        x[i] ^= x[i - 1]
    x[0] ^= t
    q = _U64(2)
    shift = _U64(1)
    while q != top:
        p = q - _U64(1)
        for i in range(n - 1, -1, -1):
            # all-ones where bit q of x[i] is set
            hit = ((x[i] & q) >> shift) * _ALL
            t = (x[0] ^ x[i]) & p & ~hit
            x[0] ^= (p & hit) | t
            if i:
                x[i] ^= t
        q <<= _U64(1)
        shift += _U64(1)
    return x


def hilbert_encode(g, bits=BITS):
    """Hilbert index of grid coordinates on a curve of order ``bits``.

    ``bits`` below 16 restricts the curve to a ``2**bits`` cube; coordinates
    must then be smaller than ``2**bits``.
    """
    g = _as_coords(g)
    if np.any(g >= _U64(1 << bits)):
        raise OutOfRange(f"grid coordinate outside [0, 2**{bits})")
    tx = _axes_to_transpose([g[..., 0], g[..., 1], g[..., 2]], bits)
    return (_spread(tx[0]) << _U64(2)) | (_spread(tx[1]) << _U64(1)) | _spread(tx[2])


def hilbert_decode(code, bits=BITS):
    code = np.asarray(code, dtype=_U64)
    tx = [_compact(code >> _U64(2)), _compact(code >> _U64(1)), _compact(code)]
    x = _transpose_to_axes(tx, bits)
    return np.stack(x, axis=-1).astype(np.int64)


def curve_encode(g, pattern):
    """Encode grid coordinates along ``pattern`` (axis permutation, then curve)."""
    pattern = get_pattern(pattern)
    g = np.asarray(g)[..., list(pattern.axes)]
    if pattern.curve == "zorder":
        return morton_encode(g)
    return hilbert_encode(g)


def curve_decode(code, pattern):
    pattern = get_pattern(pattern)
    g = morton_decode(code) if pattern.curve == "zorder" else hilbert_decode(code)
    out = np.empty_like(g)
    out[..., list(pattern.axes)] = g
    return out


def sfc_encode(p, spec, pattern):
    """Quantize world positions and encode them along ``pattern``."""
    return curve_encode(quantize(p, spec), pattern)
