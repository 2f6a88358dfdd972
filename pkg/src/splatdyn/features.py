"""Particle states, view-independent feature encoding and the splat head."""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import IndexOutOfRange, ShapeMismatch
from .geometry import project
from .render import GaussianScene


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _rows(a, n):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(n, a.shape[-1] if a.ndim == 2 else -1)


@dataclass
class ParticleFrame:
    """All particles of one timestep, stored as parallel arrays.

    ``f_inv`` is carried through dynamics untouched; only ``p`` and ``f_dyn``
    evolve. Frozen particles feed the dynamics model but never move.
    """

    p: np.ndarray
    f_inv: np.ndarray
    f_dyn: np.ndarray
    frozen: np.ndarray = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        n = len(self.p)
        self.f_inv = _rows(self.f_inv, n)
        self.f_dyn = _rows(self.f_dyn, n)
        if self.frozen is None:
            self.frozen = np.zeros(n, dtype=bool)
        self.frozen = np.asarray(self.frozen, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.p)

    @property
    def d_inv(self):
        return self.f_inv.shape[1]

    @property
    def d_dyn(self):
        return self.f_dyn.shape[1]

    @property
    def features(self):
        return np.concatenate([self.f_inv, self.f_dyn], axis=1)

    def subset(self, idx):
        return ParticleFrame(self.p[idx], self.f_inv[idx], self.f_dyn[idx], self.frozen[idx])

    def copy(self):
        return ParticleFrame(self.p.copy(), self.f_inv.copy(), self.f_dyn.copy(), self.frozen.copy())


def film_apply(h, scale, bias):
    h, scale, bias = (np.asarray(a, dtype=np.float64) for a in (h, scale, bias))
    if h.shape[-1] != scale.shape[-1] or h.shape[-1] != bias.shape[-1]:
        raise ShapeMismatch(
            f"FiLM dims differ: h {h.shape}, scale {scale.shape}, bias {bias.shape}"
        )
    return scale * h + bias


def context_vector(depth, density, shift, valid=True):
    """Per-pixel geometric context ``(depth, density, shift_u, shift_v, valid)``."""
    depth = np.asarray(depth, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    density = np.broadcast_to(np.asarray(density, dtype=np.float64), depth.shape)
    valid = np.broadcast_to(np.asarray(valid, dtype=np.float64), depth.shape)
    return np.concatenate([depth[..., None], density[..., None], shift, valid[..., None]], axis=-1)


CONTEXT_DIM = 5
RAY_DIM = 6


@dataclass
class FilmNetwork:
    """Two-layer conditioning map producing FiLM parameters for a one-hidden-layer MLP.

    The conditioner sees ``context (5) + Plücker ray (6)`` and emits
    ``(scale, bias)`` for the ``hidden`` activations of the main MLP, which
    maps a pixel-aligned feature to the particle latent feature.
    """

    cond_w1: np.ndarray
    cond_b1: np.ndarray
    cond_w2: np.ndarray
    cond_b2: np.ndarray
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def hidden(self):
        return self.w_in.shape[1]

    @classmethod
    def init(cls, d_pixel, d_out, hidden=10, cond_hidden=10, seed=0):
        rng = np.random.default_rng(seed)
        cin = CONTEXT_DIM + RAY_DIM

        def lin(a, b):
            return rng.normal(0.0, 1.0 / np.sqrt(a), (a, b)), np.zeros(b)

        w1, b1 = lin(cin, cond_hidden)
        w2, b2 = lin(cond_hidden, 2 * hidden)
        wi, bi = lin(d_pixel, hidden)
        wo, bo = lin(hidden, d_out)
        return cls(w1, b1, w2, b2, wi, bi, wo, bo)

    def conditioning(self, x, ray):
        """``(scale, bias)`` for context ``x`` and ray 6-vector(s) ``ray``."""
        cond = np.concatenate([np.asarray(x, dtype=np.float64), np.asarray(ray, dtype=np.float64)], axis=-1)
        if cond.shape[-1] != self.cond_w1.shape[0]:
            raise ShapeMismatch(f"conditioning input has {cond.shape[-1]} dims, expected {self.cond_w1.shape[0]}")
        h = gelu(cond @ self.cond_w1 + self.cond_b1)
        out = h @ self.cond_w2 + self.cond_b2
        return out[..., : self.hidden], out[..., self.hidden:]

    def to_dict(self, prefix="film."):
        return {prefix + k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, weights, prefix="film."):
        return cls(**{k: np.asarray(weights[prefix + k]) for k in cls.__dataclass_fields__})


def encode_view_independent(f_pixel, x, ray, net):
    """Lift pixel-aligned features to view-independent particle features.

    ``ray`` is a :class:`~splatdyn.geometry.PluckerRay` or its 6-vector form.
    """
    if hasattr(ray, "as_vector"):
        ray = ray.as_vector()
    f_pixel = np.asarray(f_pixel, dtype=np.float64)
    if f_pixel.shape[-1] != net.w_in.shape[0]:
        raise ShapeMismatch(f"pixel feature has {f_pixel.shape[-1]} dims, expected {net.w_in.shape[0]}")
    scale, bias = net.conditioning(x, ray)
    h = film_apply(f_pixel @ net.w_in + net.b_in, scale, bias)
    return gelu(h) @ net.w_out + net.b_out


@dataclass
class TimestepEmbeddingTable:
    E: np.ndarray

    @property
    def rows(self):
        return self.E.shape[0]

    @classmethod
    def seeded(cls, rows, dim, seed=0, std=0.02):
        return cls(np.random.default_rng(seed).normal(0.0, std, (rows, dim)))


def temporal_embed(f, k, table):
    """Add the row of ``table`` for timestep ``k`` (scalar or per-row array)."""
    k = np.asarray(k)
    if k.size and (k.min() < 0 or k.max() >= table.rows):
        raise IndexOutOfRange(f"timestep {int(k.max())} outside table with {table.rows} rows")
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != table.E.shape[1]:
        raise ShapeMismatch(f"feature dim {f.shape[-1]} != embedding dim {table.E.shape[1]}")
    return f + table.E[k.astype(np.int64)]


def mask_filter(frame, masks, cams):
    """Keep particles that project onto a foreground pixel in at least one view.

    Returns ``(filtered_frame, kept_indices)``. Pixels are looked up at the
    nearest integer pixel center; particles behind a camera are background
    for that view.
    """
    if len(masks) != len(cams):
        raise ShapeMismatch(f"{len(masks)} masks for {len(cams)} cameras")
    keep = np.zeros(len(frame), dtype=bool)
    for mask, cam in zip(masks, cams):
        mask = np.asarray(mask)
        if mask.shape != (cam.height, cam.width):
            raise ShapeMismatch(f"mask shape {mask.shape} != image size {(cam.height, cam.width)}")
        q = cam.to_camera(frame.p)
        front = q[:, 2] > 0
        if not front.any():
            continue
        pix, _ = project(cam, frame.p[front])
        u = np.rint(pix[:, 0]).astype(np.int64)
        v = np.rint(pix[:, 1]).astype(np.int64)
        inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        hit = np.zeros(len(u), dtype=bool)
        hit[inside] = mask[v[inside], u[inside]] > 0
        keep[np.flatnonzero(front)[hit]] = True
    idx = np.flatnonzero(keep)
    return frame.subset(idx), idx


HEAD_OUT = 11  # color 3, quaternion 4, scale 3, opacity 1


@dataclass
class GaussianHead:
    """Per-particle linear map from latent features to splat parameters.

    Colors and opacity go through a sigmoid, scales through a softplus times
    ``scale_unit`` (meters), and the quaternion is ``raw + rest`` normalized.
    """

    w: np.ndarray
    b: np.ndarray
    scale_unit: float = 0.01
    rest_quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def zeros(cls, d, **kw):
        return cls(np.zeros((d, HEAD_OUT)), np.zeros(HEAD_OUT), **kw)

    @classmethod
    def init(cls, d, seed=0, std=0.1, **kw):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std / np.sqrt(d), (d, HEAD_OUT)), np.zeros(HEAD_OUT), **kw)

    def to_dict(self, prefix="head."):
        return {prefix + "w": self.w, prefix + "b": self.b,
                prefix + "scale_unit": np.array([self.scale_unit]),
                prefix + "rest_quat": np.asarray(self.rest_quat)}

    @classmethod
    def from_dict(cls, weights, prefix="head."):
        kw = {}
        if prefix + "scale_unit" in weights:
            kw["scale_unit"] = float(np.asarray(weights[prefix + "scale_unit"]).ravel()[0])
        if prefix + "rest_quat" in weights:
            kw["rest_quat"] = np.asarray(weights[prefix + "rest_quat"], dtype=np.float64)
        return cls(np.asarray(weights[prefix + "w"]), np.asarray(weights[prefix + "b"]), **kw)


def to_gaussians(frame, head):
    """Materialize one splat per particle, centered on the particle."""
    f = frame.features
    if f.shape[1] != head.w.shape[0]:
        raise ShapeMismatch(f"head expects {head.w.shape[0]} feature dims, particles have {f.shape[1]}")
    raw = f @ head.w + head.b
    colors = sigmoid(raw[:, 0:3])
    quats = raw[:, 3:7] + head.rest_quat
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    quats = np.where(norm > 1e-12, quats / np.where(norm > 1e-12, norm, 1.0), head.rest_quat)
    scales = softplus(raw[:, 7:10]) * head.scale_unit
    opacities = sigmoid(raw[:, 10])
    return GaussianScene(frame.p.copy(), colors, quats, scales, opacities)


def seeded_frame(n, d_inv=16, d_dyn=32, seed=0, low=0.0, high=1.0):
    """Random particle frame with positions uniform in ``[low, high)^3``."""
    rng = np.random.default_rng(seed)
    return ParticleFrame(
        rng.uniform(low, high, (n, 3)),
        rng.normal(size=(n, d_inv)),
        rng.normal(size=(n, d_dyn)),
    )
