"""Spatio-temporal U-Net point transformer over serialized particle clouds.

One forward pass serializes the ``T`` input frames into a single t-SPC,
embeds the features, and runs encoder stages of

    grid pooling -> temporal embedding + merge -> blocks of (xCPE, patch attention)

followed by decoder stages that unpool back to the input resolution. A
particle-wise MLP finally reads the embeddings of the last frame's particles
and predicts position and dynamic-feature deltas. Weights live in a flat
``{name: array}`` dict so they round-trip through the weights file.
"""

import itertools
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeMismatch
from .features import ParticleFrame, gelu, temporal_embed, TimestepEmbeddingTable
from .sfc import GridSpec, get_pattern
from .tspc import CodeLayout, grid_pool, grid_unpool, merge_cloud, patch_group, serialize_cloud

LN_EPS = 1e-5


@dataclass
class DynamicsConfig:
    encoder_depths: tuple = (2, 2, 2, 6, 2)
    decoder_depths: tuple = (2, 2, 2, 2)
    pool_strides: tuple = (1, 4, 2, 2, 2)
    temporal_strides: tuple = (1, 2, 2, 2, 2)
    patch_size: int = 1024
    enc_dims: tuple = (32, 64, 128, 256, 512)
    dec_dims: tuple = (64, 128, 256)
    enc_heads: tuple = (2, 4, 8, 16, 32)
    dec_heads: tuple = (4, 4, 8, 16)
    grid_size: float = 0.004
    sfc_patterns: tuple = ("z", "zt", "h", "ht")
    mlp_ratio: int = 4
    head_hidden: tuple = (128, 128)
    max_timesteps: int = 16

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        n = self.n_stages
        for name in ("encoder_depths", "pool_strides", "temporal_strides", "enc_heads"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries (one per encoder stage)")
        for name in ("decoder_depths", "dec_heads"):
            if len(getattr(self, name)) != n - 1:
                raise ValueError(f"{name} must have {n - 1} entries (one per decoder stage)")
        if len(self.dec_dims) not in (n - 1, n - 2) or not self.dec_dims and n > 1:
            raise ValueError(f"dec_dims must have {n - 1} (or {n - 2}) entries")
        for s in self.pool_strides + self.temporal_strides:
            if s < 1 or s & (s - 1):
                raise ValueError(f"strides must be powers of two, got {s}")
        if self.pool_strides[0] != 1:
            raise ValueError("the first encoder stage must not pool (pool_strides[0] == 1)")
        for d, h in zip(self.enc_dims + self.decoder_dims, self.enc_heads + self.dec_heads):
            if d % h:
                raise ValueError(f"feature dim {d} is not divisible by {h} heads")
        for p in self.sfc_patterns:
            get_pattern(p)

    @property
    def n_stages(self):
        return len(self.enc_dims)

    @property
    def decoder_dims(self):
        """Per-stage decoder widths; a list one short gets its first entry repeated."""
        dims = tuple(self.dec_dims)
        if len(dims) == self.n_stages - 2:
            dims = dims[:1] + dims
        return dims

    def pattern(self, stage):
        return get_pattern(self.sfc_patterns[stage % len(self.sfc_patterns)])


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def _voxel_keys(group, grid):
    gid = np.unique(group, return_inverse=True)[1].astype(np.int64)
    if gid.size and gid.max() >= 1 << 12:
        raise ValueError("too many batch/time groups for voxel hashing")
    g = grid.astype(np.int64) + 1
    return (gid << 51) | (g[:, 0] << 34) | (g[:, 1] << 17) | g[:, 2]


def xcpe(cloud, x, kernel, bias):
    """Submanifold 3x3x3 sparse convolution over occupied voxels, plus skip.

    Voxels are the cloud's current grid cells, kept separate per batch|time
    group; points sharing a voxel are averaged before convolving. ``kernel``
    has shape ``(27, C, C)`` indexed by the ``(dx, dy, dz)`` offset in
    lexicographic order over ``{-1, 0, 1}^3``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel)
    if x.ndim != 2 or len(x) != len(cloud):
        raise ShapeMismatch(f"features {x.shape} for {len(cloud)} points")
    if kernel.shape != (27, x.shape[1], x.shape[1]):
        raise ShapeMismatch(f"kernel has shape {kernel.shape}, expected {(27, x.shape[1], x.shape[1])}")
    keys = _voxel_keys(cloud.group, cloud.grid)
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq))
    by_voxel = np.argsort(inv, kind="stable")
    heads = np.concatenate(([0], np.cumsum(counts)[:-1]))
    vox = np.add.reduceat(x[by_voxel], heads, axis=0) / counts[:, None]
    out = np.zeros_like(vox)
    steps = (_OFFSETS[:, 0] << 34) + (_OFFSETS[:, 1] << 17) + _OFFSETS[:, 2]
    for o, step in enumerate(steps):
        w = kernel[o]
        if not w.any():
            continue
        pos = np.searchsorted(uniq, uniq + step)
        pos = np.minimum(pos, len(uniq) - 1)
        found = uniq[pos] == uniq + step
        if found.any():
            out[found] += vox[pos[found]] @ w
    return x + out[inv] + bias


BLOCK_KEYS = ("cpe.w", "cpe.b", "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b",
              "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")


def attention_patch(tokens, w, heads):
    """Pre-norm multi-head self-attention and feed-forward, both residual.

    ``tokens`` is ``(S, C)`` or a batch of patches ``(P, S, C)``; ``w`` maps
    the attention/FFN keys of :data:`BLOCK_KEYS` (without prefix) to arrays.
    """
    x = np.asarray(tokens, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    P, S, C = x.shape
    if w["qkv.w"].shape != (C, 3 * C) or C % heads:
        raise ShapeMismatch(f"attention weights do not fit {C} channels / {heads} heads")
    dh = C // heads
    h = layer_norm(x, w["ln1.g"], w["ln1.b"])
    qkv = (h @ w["qkv.w"] + w["qkv.b"]).reshape(P, S, 3, heads, dh)
    q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
    att = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
    o = (att @ v).transpose(0, 2, 1, 3).reshape(P, S, C)
    x = x + o @ w["proj.w"] + w["proj.b"]
    h = layer_norm(x, w["ln2.g"], w["ln2.b"])
    x = x + gelu(h @ w["fc1.w"] + w["fc1.b"]) @ w["fc2.w"] + w["fc2.b"]
    return x[0] if single else x


ATTN_BUDGET = 1 << 24  # attention-matrix entries held at once


def patch_attention(x, plan, w, heads):
    """Run :func:`attention_patch` over every patch of ``plan`` and scatter back.

    Padded slots act as keys and values only; each real point receives the
    output of the single patch holding it unpadded.
    """
    out = np.empty_like(x)
    chunk = max(1, ATTN_BUDGET // (heads * plan.patch_size ** 2))
    for a in range(0, len(plan), chunk):
        idx = plan.patches[a:a + chunk]
        pad = plan.pad_mask[a:a + chunk]
        y = attention_patch(x[idx], w, heads)
        out[idx[~pad]] = y[~pad]
    return out


def _block(cloud, x, plan, weights, prefix, heads):
    w = {k: weights[prefix + k] for k in BLOCK_KEYS}
    x = xcpe(cloud, x, w["cpe.w"], w["cpe.b"])
    return patch_attention(x, plan, w, heads)


def tem_block(cloud, x, table, shifts=1):
    """Temporal embedding then merging.

    Adds ``table`` rows indexed by each point's current time code, merges the
    time field by ``shifts`` bits and re-sorts. Returns ``(cloud, x, order)``
    with ``order`` mapping new rows to old ones; re-patch the result with
    :func:`~splatdyn.tspc.patch_group`.
    """
    x = temporal_embed(x, cloud.time, table)
    if not shifts:
        return cloud, x, np.arange(len(cloud))
    merged, order = merge_cloud(cloud, shifts)
    return merged, x[order], order


@dataclass
class StepOutput:
    delta_p: np.ndarray
    delta_f_dyn: np.ndarray


@dataclass
class _Level:
    cloud: object
    x: np.ndarray
    parent_map: np.ndarray
    shifts: int


def _dense(fan_in, shape, rng, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(fan_in), shape)


def _block_weights(prefix, C, ratio, rng):
    w = {
        prefix + "cpe.w": _dense(27 * C, (27, C, C), rng),
        prefix + "cpe.b": np.zeros(C),
        prefix + "ln1.g": np.ones(C), prefix + "ln1.b": np.zeros(C),
        prefix + "qkv.w": _dense(C, (C, 3 * C), rng), prefix + "qkv.b": np.zeros(3 * C),
        prefix + "proj.w": _dense(C, (C, C), rng), prefix + "proj.b": np.zeros(C),
        prefix + "ln2.g": np.ones(C), prefix + "ln2.b": np.zeros(C),
        prefix + "fc1.w": _dense(C, (C, ratio * C), rng), prefix + "fc1.b": np.zeros(ratio * C),
        prefix + "fc2.w": _dense(ratio * C, (ratio * C, C), rng), prefix + "fc2.b": np.zeros(C),
    }
    return w


def head_keys(n_layers):
    return [f"dyn_head.{kind}{i}" for i in range(n_layers) for kind in ("w", "b")]


def init_dynamics_weights(cfg, d_inv, d_dyn, seed=0, head_scale=1e-3):
    """Seeded random weights for ``cfg``; the last head layer is scaled by ``head_scale``."""
    rng = np.random.default_rng(seed)
    d = d_inv + d_dyn
    E, D = cfg.enc_dims, cfg.decoder_dims
    w = {}
    w["embed.w"] = _dense(d, (d, E[0]), rng)
    w["embed.b"] = np.zeros(E[0])
    w["embed.ln.g"], w["embed.ln.b"] = np.ones(E[0]), np.zeros(E[0])
    for j in range(cfg.n_stages):
        p = f"enc{j}."
        w[p + "time"] = rng.normal(0.0, 0.02, (cfg.max_timesteps, E[j]))
        if j > 0:
            w[p + "pool.w"] = _dense(E[j - 1], (E[j - 1], E[j]), rng)
            w[p + "pool.b"] = np.zeros(E[j])
            w[p + "pool.ln.g"], w[p + "pool.ln.b"] = np.ones(E[j]), np.zeros(E[j])
        for k in range(cfg.encoder_depths[j]):
            w.update(_block_weights(f"{p}blk{k}.", E[j], cfg.mlp_ratio, rng))
    for i in range(cfg.n_stages - 2, -1, -1):
        p = f"dec{i}."
        parent = E[-1] if i == cfg.n_stages - 2 else D[i + 1]
        w[p + "unpool.w"] = _dense(parent + E[i], (parent + E[i], D[i]), rng)
        w[p + "unpool.b"] = np.zeros(D[i])
        w[p + "unpool.ln.g"], w[p + "unpool.ln.b"] = np.ones(D[i]), np.zeros(D[i])
        for k in range(cfg.decoder_depths[i]):
            w.update(_block_weights(f"{p}blk{k}.", D[i], cfg.mlp_ratio, rng))
    widths = [D[0] if cfg.n_stages > 1 else E[0], *cfg.head_hidden, 3 + d_dyn]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        scale = head_scale if i == len(widths) - 2 else 1.0
        w[f"dyn_head.w{i}"] = _dense(a, (a, b), rng, scale)
        w[f"dyn_head.b{i}"] = np.zeros(b)
    return w


def constant_velocity_weights(weights, v):
    """Copy of ``weights`` whose head ignores its input and predicts ``delta_p = v``."""
    w = dict(weights)
    n = sum(1 for k in w if k.startswith("dyn_head.w"))
    for i in range(n):
        w[f"dyn_head.w{i}"] = np.zeros_like(w[f"dyn_head.w{i}"])
        w[f"dyn_head.b{i}"] = np.zeros_like(w[f"dyn_head.b{i}"])
    w[f"dyn_head.b{n - 1}"][:3] = v
    return w


def _head(y, weights):
    n = sum(1 for k in weights if k.startswith("dyn_head.w"))
    for i in range(n):
        y = y @ weights[f"dyn_head.w{i}"] + weights[f"dyn_head.b{i}"]
        if i < n - 1:
            y = gelu(y)
    return y


def _inverse(order):
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return inv


def default_grid(frames, grid_size):
    """Grid anchored one cell below the bounding box of all input frames."""
    return GridSpec.from_points(np.concatenate([f.p for f in frames]), grid_size)


def forward(frames, cfg, weights, spec=None, batch=0, trace=None):
    """Predict ``(delta_p, delta_f_dyn)`` for the particles of the last frame.

    ``frames`` is a list of :class:`ParticleFrame`, oldest first. Pass a list
    as ``trace`` to collect per-stage ``(cloud, features)`` snapshots.
    """
    frames = list(frames)
    T = len(frames)
    if T < 1:
        raise ValueError("need at least one input frame")
    if T > cfg.max_timesteps:
        raise ValueError(f"{T} frames exceed max_timesteps={cfg.max_timesteps}")
    d_inv, d_dyn = frames[0].d_inv, frames[0].d_dyn
    for f in frames:
        if f.d_inv != d_inv or f.d_dyn != d_dyn:
            raise ShapeMismatch("feature dims differ between frames")
    if weights["embed.w"].shape[0] != d_inv + d_dyn:
        raise ShapeMismatch(f"weights expect {weights['embed.w'].shape[0]} feature dims, got {d_inv + d_dyn}")
    layout = CodeLayout.for_frames(T)
    spec = spec or default_grid(frames, cfg.grid_size)

    cloud = serialize_cloud([f.p for f in frames], batch, spec, cfg.pattern(0), layout)
    x = np.concatenate([f.features for f in frames])[cloud.perm]
    x = gelu(layer_norm(x @ weights["embed.w"] + weights["embed.b"],
                        weights["embed.ln.g"], weights["embed.ln.b"]))

    levels = []
    shifts = 0
    for j in range(cfg.n_stages):
        p = f"enc{j}."
        parent_map = None
        if j > 0:
            x = x @ weights[p + "pool.w"] + weights[p + "pool.b"]
            cloud, x, parent_map = grid_pool(cloud, x, cfg.pool_strides[j], 1, pattern=cfg.pattern(j))
            x = gelu(layer_norm(x, weights[p + "pool.ln.g"], weights[p + "pool.ln.b"]))
        k = int(math.log2(cfg.temporal_strides[j]))
        cloud, x, order = tem_block(cloud, x, TimestepEmbeddingTable(weights[p + "time"]), k)
        if parent_map is not None:
            parent_map = _inverse(order)[parent_map]
        shifts += k
        plan = patch_group(cloud, cfg.patch_size)
        for b in range(cfg.encoder_depths[j]):
            x = _block(cloud, x, plan, weights, f"{p}blk{b}.", cfg.enc_heads[j])
        levels.append(_Level(cloud, x, parent_map, shifts))
        if trace is not None:
            trace.append(("enc", j, cloud, x))

    y = levels[-1].x
    for i in range(cfg.n_stages - 2, -1, -1):
        p = f"dec{i}."
        lvl = levels[i]
        y = grid_unpool(y, levels[i + 1].parent_map, lvl.x)
        y = gelu(layer_norm(y @ weights[p + "unpool.w"] + weights[p + "unpool.b"],
                            weights[p + "unpool.ln.g"], weights[p + "unpool.ln.b"]))
        # merged time granularity is kept on the way back up
        extra = shifts - lvl.shifts
        dcloud, order = (merge_cloud(lvl.cloud, extra) if extra else (lvl.cloud, None))
        if order is not None:
            y = y[order]
        plan = patch_group(dcloud, cfg.patch_size)
        for b in range(cfg.decoder_depths[i]):
            y = _block(dcloud, y, plan, weights, f"{p}blk{b}.", cfg.dec_heads[i])
        if order is not None:
            back = np.empty_like(y)
            back[order] = y
            y = back
        if trace is not None:
            trace.append(("dec", i, dcloud, y))

    base = levels[0].cloud
    last = base.frame_of == T - 1
    offset = sum(len(f) for f in frames[:-1])
    out = _head(y[last], weights)
    n = len(frames[-1])
    if out.shape[1] != 3 + d_dyn:
        raise ShapeMismatch(f"head emits {out.shape[1]} values, expected {3 + d_dyn}")
    delta = np.empty((n, out.shape[1]))
    delta[base.perm[last] - offset] = out
    dp = delta[:, :3]
    dp[frames[-1].frozen] = 0.0
    return StepOutput(dp, delta[:, 3:])


def step(frame, out):
    """Apply a :class:`StepOutput` to ``frame`` (``f_inv`` is carried over as is)."""
    return ParticleFrame(frame.p + out.delta_p, frame.f_inv, frame.f_dyn + out.delta_f_dyn,
                         frame.frozen.copy())


def rollout(frames, steps, cfg, weights, spec=None, batch=0):
    """Autoregressively predict ``steps`` future frames from a window of past frames."""
    window = list(frames)
    preds = []
    for _ in range(steps):
        nxt = step(window[-1], forward(window, cfg, weights, spec=spec, batch=batch))
        preds.append(nxt)
        window = window[1:] + [nxt]
    return preds


def config_to_text(cfg):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(a) for a in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a config."""
    kinds = {f.name: f.default for f in fields(DynamicsConfig)}
    kw = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"line {n}: unknown key {key!r}")
        default = kinds[key]
        if isinstance(default, tuple):
            items = [s.strip() for s in val.split(",") if s.strip()]
            cast = type(default[0]) if default else str
            kw[key] = tuple(cast(s) for s in items)
        else:
            kw[key] = type(default)(val)
    return DynamicsConfig(**kw)
