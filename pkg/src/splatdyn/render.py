"""CPU rasterizer for 3D Gaussian splats.

Each primitive is projected to a 2D Gaussian with the local affine (EWA)
approximation of the perspective map, sorted by camera depth and
alpha-composited front to back:

    I(x) = sum_i c_i a_i prod_{j<i} (1 - a_j),   a_i = o_i exp(-d^T Q_i d / 2)

with ``Q_i`` the inverse 2D covariance and ``d`` the offset from the
projected mean. :func:`rasterize` works tile by tile with the usual opacity
cutoff and early termination; :func:`rasterize_reference` is the brute-force
oracle; :func:`rasterize_backward` returns exact parameter gradients of the
tiled composite.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, ShapeMismatch
from .geometry import project

ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
DILATION = 0.3
EIGEN_FLOOR = 1e-8
NEAR = 0.01


@dataclass
class GaussianPrimitive:
    p: np.ndarray
    c: np.ndarray
    r: np.ndarray
    s: np.ndarray
    sigma: float

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(3)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(4)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(3)
        self.sigma = float(self.sigma)


@dataclass
class GaussianScene:
    """Struct-of-arrays batch of primitives (quaternions are ``(w, x, y, z)``)."""

    means: np.ndarray
    colors: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        return GaussianPrimitive(
            self.means[i], self.colors[i], self.quats[i], self.scales[i], self.opacities[i]
        )

    @classmethod
    def from_primitives(cls, prims):
        prims = list(prims)
        if not prims:
            z = np.zeros((0, 3))
            return cls(z, z, np.zeros((0, 4)), z, np.zeros(0))
        return cls(
            np.stack([g.p for g in prims]),
            np.stack([g.c for g in prims]),
            np.stack([g.r for g in prims]),
            np.stack([g.s for g in prims]),
            np.array([g.sigma for g in prims]),
        )

    def validate(self):
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1) > 1e-6):
            raise ValueError("quaternions must have unit norm")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacity must lie in [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise ValueError("colors must lie in [0, 1]")
        return self


def as_scene(scene):
    if isinstance(scene, GaussianScene):
        return scene
    return GaussianScene.from_primitives(scene)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderedImage:
    pixels: np.ndarray
    background: np.ndarray
    transmittance: np.ndarray
    weight_sum: np.ndarray


@dataclass
class SceneGradients:
    dp: np.ndarray
    dc: np.ndarray
    dr: np.ndarray
    ds: np.ndarray
    dsigma: np.ndarray


def quat_to_rotmat(q):
    """Rotation matrices of (possibly unnormalized) ``(w, x, y, z)`` quaternions."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def covariance3d(r, s):
    """``R(r) diag(s)^2 R(r)^T``."""
    R = quat_to_rotmat(r)
    s = np.asarray(s, dtype=np.float64)
    return (R * (s * s)[..., None, :]) @ np.swapaxes(R, -1, -2)


def _floor_eigenvalues(cov):
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    low = half_tr - disc
    if np.all(low >= EIGEN_FLOOR):
        return cov
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, EIGEN_FLOOR)
    fixed = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return np.where((low < EIGEN_FLOOR)[..., None, None], fixed, cov)


def project_gaussian(cam, g):
    """Project one primitive to its screen-space splat."""
    pixel, depth = project(cam, g.p)
    x, y, z = cam.to_camera(g.p)
    B = cam.K[:2, :2]
    J = np.zeros((2, 3))
    J[:, :2] = B / z
    J[:, 2] = -(B @ np.array([x, y])) / (z * z)
    M = J @ cam.R
    cov = M @ covariance3d(g.r, g.s) @ M.T + DILATION * np.eye(2)
    return Splat2D(pixel, _floor_eigenvalues(cov), float(depth), g.c.copy(), g.sigma)


def _project_scene(cam, scene, near):
    """Batched projection keeping the intermediates the backward pass needs."""
    q = cam.to_camera(scene.means)
    z = q[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    B = cam.K[:2, :2]
    qxy = q[:, :2]
    mean2d = (qxy @ B.T) / zs[:, None] + cam.K[:2, 2]
    n = len(scene)
    J = np.zeros((n, 2, 3))
    J[:, :, :2] = B[None] / zs[:, None, None]
    J[:, :, 2] = -(qxy @ B.T) / (zs * zs)[:, None]
    M = J @ cam.R
    R = quat_to_rotmat(scene.quats)
    D = scene.scales ** 2
    sigma3 = (R * D[:, None, :]) @ np.swapaxes(R, 1, 2)
    cov = M @ sigma3 @ np.swapaxes(M, 1, 2) + DILATION * np.eye(2)
    cov = _floor_eigenvalues(cov)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det
    return dict(q=q, z=zs, valid=valid, mean2d=mean2d, J=J, M=M, R=R, D=D, sigma3=sigma3,
                cov=cov, conic=conic)


def depth_order(depth, valid):
    """Front-to-back order of the valid splats; ties keep input order."""
    idx = np.arange(len(depth))
    order = np.lexsort((idx, depth))
    return order[valid[order]]


def _tile_lists(proj, scene, order, cam, tile_size, alpha_cutoff):
    """Per-tile depth-sorted splat lists with conservative culling."""
    nx = -(-cam.width // tile_size)
    ny = -(-cam.height // tile_size)
    if alpha_cutoff <= 0:
        return nx, ny, [[order] * nx for _ in range(ny)]
    sig = scene.opacities[order]
    keep = sig >= alpha_cutoff
    order = order[keep]
    # alpha >= cutoff only inside d^T Q d <= 2 ln(sigma / cutoff)
    d2 = 2.0 * np.log(sig[keep] / alpha_cutoff)
    cov = proj["cov"][order]
    half_tr = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam = half_tr + np.sqrt(0.25 * (cov[:, 0, 0] - cov[:, 1, 1]) ** 2 + cov[:, 0, 1] ** 2)
    rad = np.sqrt(d2 * lam)
    m = proj["mean2d"][order]
    x0 = np.floor((m[:, 0] - rad) / tile_size)
    x1 = np.floor((m[:, 0] + rad) / tile_size)
    y0 = np.floor((m[:, 1] - rad) / tile_size)
    y1 = np.floor((m[:, 1] + rad) / tile_size)
    lists = []
    for ty in range(ny):
        row_hit = (y0 <= ty) & (y1 >= ty)
        row = []
        for tx in range(nx):
            row.append(order[row_hit & (x0 <= tx) & (x1 >= tx)])
        lists.append(row)
    return nx, ny, lists


def _tile_pixels(tx, ty, tile_size, cam):
    xs = np.arange(tx * tile_size, min((tx + 1) * tile_size, cam.width))
    ys = np.arange(ty * tile_size, min((ty + 1) * tile_size, cam.height))
    px, py = np.meshgrid(xs, ys)
    return xs, ys, px.ravel().astype(np.float64), py.ravel().astype(np.float64)


def _gauss(px, py, mean, conic):
    dx = px - mean[0]
    dy = py - mean[1]
    power = -0.5 * (conic[0, 0] * dx * dx + conic[1, 1] * dy * dy) - conic[0, 1] * dx * dy
    return dx, dy, np.exp(power)


def _composite(px, py, ids, proj, scene, alpha_cutoff, t_min, background, record=False):
    n = len(px)
    color = np.zeros((n, 3))
    wsum = np.zeros(n)
    T = np.ones(n)
    active = np.ones(n, dtype=bool)
    trace = []
    mean2d, conic = proj["mean2d"], proj["conic"]
    for i in ids:
        dx, dy, G = _gauss(px, py, mean2d[i], conic[i])
        alpha = scene.opacities[i] * G
        use = active & (alpha >= alpha_cutoff) if alpha_cutoff > 0 else active.copy()
        w = np.where(use, alpha * T, 0.0)
        if record:
            trace.append((i, dx, dy, G, alpha, use, T.copy()))
        color += w[:, None] * scene.colors[i]
        wsum += w
        T = np.where(use, T * (1.0 - alpha), T)
        if t_min > 0:
            active &= ~(use & (T < t_min))
            if not active.any():
                break
    color += T[:, None] * background
    return color, T, wsum, trace


def _prepare(scene, cam, background, near):
    scene = as_scene(scene)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    proj = _project_scene(cam, scene, near)
    order = depth_order(proj["z"], proj["valid"])
    return scene, bg, proj, order


def rasterize(scene, cam, tile_size=16, alpha_cutoff=ALPHA_CUTOFF, background=(0.0, 0.0, 0.0),
              transmittance_min=TRANSMITTANCE_MIN, near=NEAR, workers=1):
    """Tile-based forward render.

    Per pixel, contributions with alpha below ``alpha_cutoff`` are skipped and
    compositing stops once transmittance drops below ``transmittance_min``
    (the splat that crosses the threshold still counts). Passing 0 for both
    disables them. Splats closer than ``near`` are culled. With ``workers > 1``
    tiles render on a thread pool; results do not depend on the worker count.
    """
    scene, bg, proj, order = _prepare(scene, cam, background, near)
    nx, ny, lists = _tile_lists(proj, scene, order, cam, tile_size, alpha_cutoff)
    H, W = cam.height, cam.width
    pixels = np.empty((H, W, 3))
    trans = np.empty((H, W))
    wsum = np.empty((H, W))

    def job(tile):
        ty, tx = tile
        xs, ys, px, py = _tile_pixels(tx, ty, tile_size, cam)
        c, T, ws, _ = _composite(px, py, lists[ty][tx], proj, scene, alpha_cutoff,
                                 transmittance_min, bg)
        sl = (slice(ys[0], ys[-1] + 1), slice(xs[0], xs[-1] + 1))
        pixels[sl] = c.reshape(len(ys), len(xs), 3)
        trans[sl] = T.reshape(len(ys), len(xs))
        wsum[sl] = ws.reshape(len(ys), len(xs))

    tiles = [(ty, tx) for ty in range(ny) for tx in range(nx)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(job, tiles))
    else:
        for t in tiles:
            job(t)
    return RenderedImage(pixels, bg, trans, wsum)


def rasterize_reference(scene, cam, background=(0.0, 0.0, 0.0), near=NEAR):
    """Brute-force render: every splat at every pixel, one global depth sort."""
    scene = as_scene(scene)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    splats = []
    for i in range(len(scene)):
        g = scene[i]
        if cam.to_camera(g.p)[2] <= near:
            continue
        try:
            splats.append((i, project_gaussian(cam, g)))
        except BehindCamera:
            continue
    splats.sort(key=lambda item: (item[1].depth, item[0]))
    py, px = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    color = np.zeros((cam.height, cam.width, 3))
    T = np.ones((cam.height, cam.width))
    wsum = np.zeros_like(T)
    for _, sp in splats:
        conic = np.linalg.inv(sp.cov2d)
        d = np.stack([px - sp.mean2d[0], py - sp.mean2d[1]], axis=-1)
        m = np.einsum("...i,ij,...j->...", d, conic, d)
        alpha = sp.opacity * np.exp(-0.5 * m)
        w = alpha * T
        color += w[..., None] * sp.color
        wsum += w
        T = T * (1.0 - alpha)
    color += T[..., None] * bg
    return RenderedImage(color, bg, T, wsum)


def rasterize_backward(scene, cam, dL_dI, tile_size=16, alpha_cutoff=ALPHA_CUTOFF,
                       background=(0.0, 0.0, 0.0), transmittance_min=TRANSMITTANCE_MIN, near=NEAR):
    """Gradients of ``sum(dL_dI * rasterize(...).pixels)`` w.r.t. every primitive parameter.

    Uses the same culling, cutoff and early-termination masks as the forward
    pass (the eigenvalue floor on the 2D covariance is treated as inactive).
    Quaternion gradients are taken w.r.t. the raw, unnormalized components.
    Per-tile partial sums are reduced in fixed tile order.
    """
    scene, bg, proj, order = _prepare(scene, cam, background, near)
    dL_dI = np.asarray(dL_dI, dtype=np.float64)
    if dL_dI.shape != (cam.height, cam.width, 3):
        raise ShapeMismatch(f"dL_dI has shape {dL_dI.shape}, expected {(cam.height, cam.width, 3)}")
    n = len(scene)
    g_color = np.zeros((n, 3))
    g_sigma = np.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    nx, ny, lists = _tile_lists(proj, scene, order, cam, tile_size, alpha_cutoff)
    for ty in range(ny):
        for tx in range(nx):
            xs, ys, px, py = _tile_pixels(tx, ty, tile_size, cam)
            _, _, _, trace = _composite(px, py, lists[ty][tx], proj, scene, alpha_cutoff,
                                        transmittance_min, bg, record=True)
            gI = dL_dI[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1].reshape(-1, 3)
            # S: normalized colour of everything behind the current splat
            S = np.broadcast_to(bg, gI.shape).copy()
            for i, dx, dy, G, alpha, use, Tb in reversed(trace):
                if not use.any():
                    continue
                c = scene.colors[i]
                w = np.where(use, alpha * Tb, 0.0)
                g_color[i] += w @ gI
                g_alpha = np.where(use, Tb * ((c - S) * gI).sum(axis=1), 0.0)
                S = np.where(use[:, None], alpha[:, None] * c + (1 - alpha[:, None]) * S, S)
                g_sigma[i] += g_alpha @ G
                g_power = g_alpha * alpha
                Q = proj["conic"][i]
                # power = -d^T Q d / 2 with d = pixel - mean
                g_mean2d[i, 0] += g_power @ (Q[0, 0] * dx + Q[0, 1] * dy)
                g_mean2d[i, 1] += g_power @ (Q[1, 0] * dx + Q[1, 1] * dy)
                g_conic[i, 0, 0] += -0.5 * (g_power @ (dx * dx))
                g_conic[i, 1, 1] += -0.5 * (g_power @ (dy * dy))
                g_conic[i, 0, 1] += -0.5 * (g_power @ (dx * dy))
                g_conic[i, 1, 0] += -0.5 * (g_power @ (dx * dy))

    Q = proj["conic"]
    G2 = -Q @ g_conic @ Q
    M, sigma3, J = proj["M"], proj["sigma3"], proj["J"]
    Mt = np.swapaxes(M, 1, 2)
    g_sigma3 = Mt @ G2 @ M
    g_M = (G2 + np.swapaxes(G2, 1, 2)) @ M @ sigma3
    g_J = g_M @ cam.R.T
    z = proj["z"]
    q = proj["q"]
    B = cam.K[:2, :2]
    g_q = np.einsum("nij,ni->nj", J, g_mean2d)
    g_q[:, :2] += -(g_J[:, :, 2] @ B) / (z * z)[:, None]
    g_q[:, 2] += -np.einsum("nij,ij->n", g_J[:, :, :2], B) / (z * z)
    g_q[:, 2] += 2 * np.einsum("ni,ni->n", g_J[:, :, 2], q[:, :2] @ B.T) / z ** 3
    g_p = g_q @ cam.R

    R, D = proj["R"], proj["D"]
    gsym = g_sigma3 + np.swapaxes(g_sigma3, 1, 2)
    g_R = gsym @ R * D[:, None, :]
    g_s = 2 * scene.scales * np.einsum("nij,nik,nkj->nj", R, g_sigma3, R)
    g_r = _quat_backward(scene.quats, g_R)

    dead = ~proj["valid"]
    for arr in (g_p, g_color, g_r, g_s, g_sigma):
        arr[dead] = 0.0
    return SceneGradients(g_p, g_color, g_r, g_s, g_sigma)


def _quat_backward(quats, g_R):
    """Chain a gradient on R(q / |q|) back to the raw quaternion."""
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    u = quats / norm
    w, x, y, z = u.T
    g = g_R.reshape(-1, 9).T
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = g
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gu = np.stack([gw, gx, gy, gz], axis=1)
    return (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / norm


def random_scene(n, rng, xy=1.0, depth=(2.5, 4.5), scale=(0.01, 0.12), opacity=(0.05, 1.0)):
    """Random splats in front of a camera at the origin looking down +z."""
    means = np.c_[rng.uniform(-xy, xy, (n, 2)), rng.uniform(*depth, n)]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(means, rng.uniform(0.0, 1.0, (n, 3)), q,
                         rng.uniform(*scale, (n, 3)), rng.uniform(*opacity, n))


_PARAMS = (("means", "dp"), ("colors", "dc"), ("quats", "dr"), ("scales", "ds"), ("opacities", "dsigma"))


def gradient_check(scene, cam, dL_dI, h=1e-4, small=1e-4, **kw):
    """Compare :func:`rasterize_backward` with central differences on every parameter.

    Returns ``(max_rel, max_abs_small)``: the worst relative error over
    entries whose gradient magnitude is at least ``small``, and the worst
    absolute error over the remaining entries. ``kw`` goes to both passes.
    """
    grads = rasterize_backward(scene, cam, dL_dI, **kw)

    def loss(s):
        return float(np.sum(dL_dI * rasterize(s, cam, **kw).pixels))

    max_rel = max_abs = 0.0
    for name, gname in _PARAMS:
        base = getattr(scene, name)
        analytic = getattr(grads, gname)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                arr = base.copy()
                arr[idx] += sign * h
                vals.append(loss(GaussianScene(**{**vars(scene), name: arr})))
            fd = (vals[0] - vals[1]) / (2 * h)
            an = analytic[idx]
            mag = max(abs(fd), abs(an))
            if mag < small:
                max_abs = max(max_abs, abs(fd - an))
            else:
                max_rel = max(max_rel, abs(fd - an) / mag)
    return max_rel, max_abs
