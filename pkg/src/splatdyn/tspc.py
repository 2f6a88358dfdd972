"""Temporally serialized point clouds.

Every particle gets a 64-bit key laid out ``[batch | time | space]`` with the
batch field most significant. Sorting by the key orders particles by batch,
then timestep, then position along a space-filling curve. Temporal merging
shifts the time field right so adjacent timesteps collapse into one group;
patch grouping cuts the sorted sequence into fixed-size attention windows;
grid pooling coarsens the cloud for the next U-Net stage.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import FieldOverflow, ShapeMismatch
from .sfc import GridSpec, curve_encode, get_pattern, quantize

_U64 = np.uint64


@dataclass(frozen=True)
class CodeLayout:
    tau_bits: int = 0
    kappa_bits: int = 48

    def __post_init__(self):
        if self.tau_bits < 0 or self.kappa_bits < 0:
            raise ValueError("field widths must be non-negative")
        if self.tau_bits + self.kappa_bits > 64:
            raise ValueError(
                f"tau_bits + kappa_bits = {self.tau_bits + self.kappa_bits} exceeds 64"
            )

    @property
    def batch_bits(self):
        return 64 - self.tau_bits - self.kappa_bits

    @classmethod
    def for_frames(cls, n_frames, kappa_bits=48):
        """Smallest layout whose time field holds ``n_frames`` distinct values."""
        if n_frames < 1:
            raise ValueError("need at least one frame")
        return cls(math.ceil(math.log2(n_frames)) if n_frames > 1 else 0, kappa_bits)


def _check_field(name, value, bits):
    value = np.asarray(value)
    if value.size:
        lo, hi = int(value.min()), int(value.max())
        if lo < 0 or hi >= (1 << bits):
            raise FieldOverflow(name, hi if hi >= (1 << bits) else lo, bits)
    return value.astype(_U64)


def pack_code(b, t, s, layout):
    """Pack batch, time and space fields into 64-bit codes (broadcasting)."""
    b = _check_field("batch", b, layout.batch_bits)
    t = _check_field("time", t, layout.tau_bits)
    s = _check_field("space", s, layout.kappa_bits)
    hi = _U64(layout.tau_bits + layout.kappa_bits)
    return (b << hi) | (t << _U64(layout.kappa_bits)) | s


def unpack_code(code, layout):
    code = np.asarray(code, dtype=_U64)
    kappa = _U64(layout.kappa_bits)
    b = code >> _U64(layout.tau_bits + layout.kappa_bits) if layout.batch_bits else np.zeros_like(code)
    t = (code >> kappa) & _U64((1 << layout.tau_bits) - 1)
    s = code & _U64((1 << layout.kappa_bits) - 1)
    return b, t, s


def temporal_merge(codes, layout, shifts=1):
    """Shift the time field of every code right by ``shifts`` bits.

    Batch and space bits are untouched. Element order is preserved; use
    :func:`merge_cloud` to also restore sorted order.
    """
    b, t, s = unpack_code(codes, layout)
    return pack_code(b, t >> _U64(shifts), s, layout)


def canonical_order(codes, positions, index):
    """Sort order by code, then position (x, y, z), then ``index``."""
    codes = np.asarray(codes, dtype=_U64)
    order = np.argsort(codes)  # ties are fully resolved below
    if len(order) < 2:
        return order
    sc = codes[order]
    dup = sc[1:] == sc[:-1]
    if not dup.any():
        return order
    # equal-code runs are usually rare; resolve only their members
    in_run = np.zeros(len(order), dtype=bool)
    in_run[1:] |= dup
    in_run[:-1] |= dup
    slots = np.flatnonzero(in_run)
    members = order[slots]
    p = np.asarray(positions)[members]
    run = np.cumsum(np.r_[True, ~dup[slots[1:] - 1]])
    # x alone nearly always settles a tie; fall back to all keys otherwise
    sub = np.lexsort((p[:, 0], run))
    same = (run[sub][1:] == run[sub][:-1]) & (p[sub, 0][1:] == p[sub, 0][:-1])
    if same.any():
        sub = np.lexsort((np.asarray(index)[members], p[:, 2], p[:, 1], p[:, 0], run))
    order[slots] = members[sub]
    return order


@dataclass
class SerializedCloud:
    """A point cloud stored in ascending code order.

    ``grid`` holds integer cell coordinates at the cloud's current resolution,
    ``cell`` cells of the base grid wide. ``perm`` maps sorted position to the
    source index (the frame-major particle index for a freshly serialized
    cloud, the pooled index for coarser ones); ``frame_of`` is the original
    timestep of each entry (the earliest one for pooled entries).
    """

    codes: np.ndarray
    positions: np.ndarray
    grid: np.ndarray
    perm: np.ndarray
    frame_of: np.ndarray
    spec: GridSpec
    pattern: object
    layout: CodeLayout
    cell: int = 1

    def __len__(self):
        return len(self.codes)

    @property
    def batch(self):
        return unpack_code(self.codes, self.layout)[0]

    @property
    def time(self):
        return unpack_code(self.codes, self.layout)[1]

    @property
    def group(self):
        """Combined batch|time prefix of every code."""
        return self.codes >> _U64(self.layout.kappa_bits)

    def take(self, order):
        return replace(
            self,
            codes=self.codes.take(order),
            positions=self.positions.take(order, axis=0),
            grid=self.grid.take(order, axis=0),
            perm=self.perm.take(order),
            frame_of=self.frame_of.take(order),
        )


def _resort(cloud, codes):
    order = canonical_order(codes, cloud.positions, np.arange(len(codes)))
    return replace(cloud, codes=codes).take(order), order


def serialize_cloud(frames, b, spec, pattern, layout):
    """Serialize a list of per-frame ``(N_k, 3)`` position arrays.

    Particle ``i`` of frame ``k`` is keyed ``pack(b, k, sfc(p_i))``. Returns the
    sorted cloud; ``perm`` indexes the frame-major concatenation of ``frames``.
    """
    pattern = get_pattern(pattern)
    frames = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in frames]
    if len(frames) > (1 << layout.tau_bits):
        raise FieldOverflow("time", len(frames) - 1, layout.tau_bits)
    positions = np.concatenate(frames) if frames else np.zeros((0, 3))
    frame_of = np.concatenate([np.full(len(f), k, dtype=np.int64) for k, f in enumerate(frames)]) \
        if frames else np.zeros(0, dtype=np.int64)
    grid = quantize(positions, spec)
    codes = pack_code(b, frame_of, curve_encode(grid, pattern), layout)
    index = np.arange(len(positions))
    order = canonical_order(codes, positions, index)
    return SerializedCloud(
        codes=codes.take(order),
        positions=positions.take(order, axis=0),
        grid=grid.take(order, axis=0),
        perm=order,
        frame_of=frame_of.take(order),
        spec=spec,
        pattern=pattern,
        layout=layout,
    )


def merge_cloud(cloud, shifts=1):
    """Temporally merge a cloud and re-sort it.

    Returns ``(merged, order)`` with ``merged[i] == cloud[order[i]]`` so that
    per-point arrays can follow along.
    """
    return _resort(cloud, temporal_merge(cloud.codes, cloud.layout, shifts))


def reserialize(cloud, pattern=None, time=None):
    """Recompute codes with another curve pattern and/or time field, re-sorting.

    Returns ``(cloud, order)`` like :func:`merge_cloud`.
    """
    pattern = cloud.pattern if pattern is None else get_pattern(pattern)
    b, t, _ = unpack_code(cloud.codes, cloud.layout)
    if time is not None:
        t = time
    codes = pack_code(b, t, curve_encode(cloud.grid, pattern), cloud.layout)
    return _resort(replace(cloud, pattern=pattern), codes)


@dataclass
class PatchPlan:
    patch_size: int
    patches: np.ndarray
    pad_mask: np.ndarray

    def __len__(self):
        return len(self.patches)

    @property
    def real(self):
        """Sorted-cloud indices of the non-padded slots, patch by patch."""
        return self.patches[~self.pad_mask]


def patch_group(cloud, patch_size=1024):
    """Cut a sorted cloud into windows of exactly ``patch_size`` entries.

    Windows never straddle a change of the batch|time prefix. A trailing
    short window borrows the tail of the preceding window of the same group;
    a group shorter than one window repeats its own last entry.
    """
    if isinstance(cloud, SerializedCloud):
        groups = cloud.group
    else:
        groups = np.zeros(int(cloud), dtype=_U64)
    n = len(groups)
    if n == 0:
        raise ValueError("cannot patch an empty cloud")
    if patch_size < 1:
        raise ValueError("patch_size must be positive")
    bounds = np.flatnonzero(groups[1:] != groups[:-1]) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [n]))
    slot = np.arange(patch_size)
    patches, pads = [], []
    for a, e in zip(starts, ends):
        size = e - a
        full, rem = divmod(size, patch_size)
        if full:
            patches.append(a + np.arange(full * patch_size).reshape(full, patch_size))
            pads.append(np.zeros((full, patch_size), dtype=bool))
        if rem and full:
            patches.append((e - patch_size + slot)[None])
            pads.append((slot < patch_size - rem)[None])
        elif rem:
            patches.append(np.minimum(a + slot, e - 1)[None])
            pads.append((slot >= rem)[None])
    return PatchPlan(patch_size, np.concatenate(patches), np.concatenate(pads))


def _log2_stride(stride, name):
    k = int(stride).bit_length() - 1
    if stride < 1 or (1 << k) != stride:
        raise ValueError(f"{name} stride must be a power of two >= 1, got {stride}")
    return k


def grid_pool(cloud, features, spatial_stride=2, temporal_stride=1, pattern=None):
    """Pool points sharing a coarse cell and a coarse time bucket.

    Entries with equal ``(batch, time >> log2(temporal_stride),
    grid // spatial_stride)`` collapse into one parent whose position is the mean
    and whose feature is the componentwise max of its children. Parent codes
    are recomputed at the coarse resolution with ``pattern`` (default: the
    cloud's own). Returns ``(pooled, pooled_features, parent_map)`` where
    ``parent_map[i]`` is the pooled index of child ``i``.

    With both strides 1 the cloud is returned as is, so ``parent_map`` is the
    identity even when several points share a cell.
    """
    features = np.asarray(features)
    if len(features) != len(cloud):
        raise ShapeMismatch(f"{len(features)} feature rows for {len(cloud)} points")
    ks = _log2_stride(spatial_stride, "spatial")
    kt = _log2_stride(temporal_stride, "temporal")
    pattern = cloud.pattern if pattern is None else get_pattern(pattern)
    if ks == 0 and kt == 0 and pattern == cloud.pattern:
        return cloud, features, np.arange(len(cloud))

    b, t, _ = unpack_code(cloud.codes, cloud.layout)
    coarse = cloud.grid >> ks
    coarse_codes = pack_code(b, t >> _U64(kt), curve_encode(coarse, pattern), cloud.layout)
    if ks == 0 and kt == 0:
        # pattern change only: no collapsing, keep one parent per child
        pooled, order = _resort(replace(cloud, pattern=pattern), coarse_codes)
        parent_map = np.empty(len(order), dtype=np.int64)
        parent_map[order] = np.arange(len(order))
        return replace(pooled, perm=np.arange(len(order))), features[order], parent_map

    parent_codes, parent_map = np.unique(coarse_codes, return_inverse=True)
    m = len(parent_codes)
    counts = np.bincount(parent_map, minlength=m)
    positions = np.stack(
        [np.bincount(parent_map, weights=cloud.positions[:, a], minlength=m) for a in range(3)],
        axis=-1,
    ) / counts[:, None]
    by_parent = np.argsort(parent_map, kind="stable")
    heads = np.concatenate(([0], np.cumsum(counts)[:-1]))
    pooled_features = np.maximum.reduceat(features[by_parent], heads, axis=0)
    grid = np.empty((m, 3), dtype=np.int64)
    grid[parent_map] = coarse
    frame_of = np.full(m, np.iinfo(np.int64).max)
    np.minimum.at(frame_of, parent_map, cloud.frame_of)
    pooled = SerializedCloud(
        codes=parent_codes,
        positions=positions,
        grid=grid,
        perm=np.arange(m),
        frame_of=frame_of,
        spec=cloud.spec,
        pattern=pattern,
        layout=cloud.layout,
        cell=cloud.cell << ks,
    )
    return pooled, pooled_features, parent_map


def grid_unpool(pooled_features, parent_map, skip_features):
    """Broadcast parent rows to children and concatenate the children's skip rows."""
    pooled_features = np.asarray(pooled_features)
    skip_features = np.asarray(skip_features)
    parent_map = np.asarray(parent_map)
    if len(parent_map) != len(skip_features):
        raise ShapeMismatch(
            f"parent_map covers {len(parent_map)} children but skip has {len(skip_features)} rows"
        )
    if parent_map.size and (parent_map.min() < 0 or parent_map.max() >= len(pooled_features)):
        raise ShapeMismatch("parent_map refers to a missing pooled row")
    return np.concatenate([pooled_features[parent_map], skip_features], axis=-1)
