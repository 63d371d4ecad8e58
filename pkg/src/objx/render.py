"""Software forward rasterizer for 3D Gaussians with analytic gradients.

Splats are perspective-projected, their world covariance R diag(s^2) R^T is
pushed through the first-order projection Jacobian, and pixels composite the
depth-sorted splats front to back. Two implementations share one kernel
definition: a 16x16-tile rasterizer (numba, the fast path) and a naive
per-pixel reference used to cross-check it. The backward pass is exact for
the compositing actually computed, including the gradient of the 2D
covariance through the projection Jacobian's dependence on the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _raster
from .decoder import GaussianSet
from .errors import InvalidInputError

TILE_SIZE = 16
Z_NEAR = 1e-2
_COV_EPS = 1e-10  # added to the 2D covariance diagonal for invertibility


@dataclass
class Camera:
    intrinsics: np.ndarray  # (3, 3)
    pose: np.ndarray        # (4, 4) camera-to-world
    width: int
    height: int

    @staticmethod
    def from_frame(frame) -> "Camera":
        h, w = frame.depth.shape
        return Camera(frame.intrinsics, frame.pose, w, h)


@dataclass
class RenderTarget:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W) alpha-weighted expected depth, metres


# ---------------------------------------------------------------------------
# projection of world-space Gaussians to screen space


def _quat_rotmats(q: np.ndarray) -> np.ndarray:
    """Batch of rotation matrices from (w, x, y, z); unit-norm assumed."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _project(positions, scales, rotations, camera: Camera):
    """Screen-space means, inverse 2D covariances, and caches for backward."""
    k = camera.intrinsics
    fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
    w2c = camera.pose[:3, :3].T
    t_cam = (positions - camera.pose[:3, 3]) @ w2c.T
    valid = t_cam[:, 2] > Z_NEAR
    tz = np.where(valid, t_cam[:, 2], 1.0)
    u = fx * t_cam[:, 0] / tz + cx
    v = fy * t_cam[:, 1] / tz + cy
    mu = np.stack([u, v], axis=1)

    rot = _quat_rotmats(rotations)
    rs = rot * scales[:, None, :]
    cov_w = rs @ np.transpose(rs, (0, 2, 1))
    cov_c = w2c[None] @ cov_w @ w2c.T[None]

    jac = np.zeros((positions.shape[0], 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * t_cam[:, 0] / tz ** 2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * t_cam[:, 1] / tz ** 2
    cov2 = jac @ cov_c @ np.transpose(jac, (0, 2, 1))
    sa = cov2[:, 0, 0] + _COV_EPS
    sb = cov2[:, 0, 1]
    sc = cov2[:, 1, 1] + _COV_EPS
    det = sa * sc - sb * sb
    det = np.where(det > 1e-300, det, 1e-300)
    inv2 = np.stack([sc / det, -sb / det, sa / det], axis=1)
    radii = 3.0 * np.sqrt(np.stack([sa, sc], axis=1))
    cache = dict(t_cam=t_cam, tz=tz, jac=jac, cov_c=cov_c, cov_w=cov_w,
                 rot=rot, w2c=w2c, sa=sa, sb=sb, sc=sc, det=det,
                 fx=fx, fy=fy, valid=valid)
    return mu, inv2, t_cam[:, 2], radii, valid, cache


def _build_tiles(mu, radii, depth, valid, camera: Camera):
    """Depth-sorted per-tile splat lists; returns (order, start, count, nx)."""
    nx = (camera.width + TILE_SIZE - 1) // TILE_SIZE
    ny = (camera.height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = nx * ny
    x0 = np.floor((mu[:, 0] - radii[:, 0]) / TILE_SIZE).astype(np.int64)
    x1 = np.floor((mu[:, 0] + radii[:, 0]) / TILE_SIZE).astype(np.int64)
    y0 = np.floor((mu[:, 1] - radii[:, 1]) / TILE_SIZE).astype(np.int64)
    y1 = np.floor((mu[:, 1] + radii[:, 1]) / TILE_SIZE).astype(np.int64)
    x0 = np.clip(x0, 0, nx - 1)
    x1 = np.clip(x1, 0, nx - 1)
    y0 = np.clip(y0, 0, ny - 1)
    y1 = np.clip(y1, 0, ny - 1)
    onscreen = valid & (mu[:, 0] + radii[:, 0] >= 0) & \
        (mu[:, 0] - radii[:, 0] < camera.width) & \
        (mu[:, 1] + radii[:, 1] >= 0) & (mu[:, 1] - radii[:, 1] < camera.height)

    idx = np.nonzero(onscreen)[0]
    if idx.size == 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(n_tiles, dtype=np.int64),
                np.zeros(n_tiles, dtype=np.int64), nx)
    spans_x = x1[idx] - x0[idx] + 1
    spans_y = y1[idx] - y0[idx] + 1
    counts = spans_x * spans_y
    gauss = np.repeat(idx, counts)
    # enumerate (tile, gaussian) pairs
    reps = np.repeat(np.arange(idx.size), counts)
    local = np.arange(gauss.size) - np.repeat(
        np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    lx = local % spans_x[reps]
    ly = local // spans_x[reps]
    tiles = (y0[idx][reps] + ly) * nx + (x0[idx][reps] + lx)
    order_key = np.lexsort((depth[gauss], tiles))
    order = gauss[order_key].astype(np.int64)
    tiles_sorted = tiles[order_key]
    count = np.bincount(tiles_sorted, minlength=n_tiles).astype(np.int64)
    start = np.concatenate([[0], np.cumsum(count)[:-1]]).astype(np.int64)
    return order, start, count, nx


def _check_finite(gaussians: GaussianSet) -> None:
    for arr in (gaussians.positions, gaussians.scales, gaussians.rotations,
                gaussians.opacities, gaussians.colors):
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("non-finite Gaussian parameters")


def render(gaussians: GaussianSet, camera: Camera,
           method: str = "tile") -> RenderTarget:
    """Rasterize onto a black, alpha-0 background."""
    _check_finite(gaussians)
    if method == "naive":
        return _render_naive(gaussians, camera)
    if method != "tile":
        raise InvalidInputError(f"unknown rasterization method {method!r}")
    target, _ = _render_tile_cached(gaussians, camera)
    return target


def _render_tile_cached(gaussians: GaussianSet, camera: Camera):
    h, w = camera.height, camera.width
    out_color = np.zeros((h, w, 3))
    out_alpha = np.zeros((h, w))
    out_depth = np.zeros((h, w))
    if len(gaussians) == 0:
        return RenderTarget(out_color, out_alpha, out_depth), None
    pos, scl, rot, opa, col = gaussians.world_arrays()
    mu, inv2, depth, radii, valid, proj_cache = _project(pos, scl, rot, camera)
    order, start, count, nx = _build_tiles(mu, radii, depth, valid, camera)
    _raster.forward_tiles(order, start, count, nx, TILE_SIZE, h, w,
                          mu, inv2, np.ascontiguousarray(opa),
                          np.ascontiguousarray(col), depth,
                          out_color, out_alpha, out_depth)
    cache = (pos, scl, rot, opa, col, mu, inv2, depth, order, start, count,
             nx, proj_cache)
    return RenderTarget(out_color, out_alpha, out_depth), cache


def render_forward(gaussians: GaussianSet, camera: Camera):
    """Tile render returning ``(RenderTarget, cache)`` for a later backward."""
    _check_finite(gaussians)
    return _render_tile_cached(gaussians, camera)


def render_backward(gaussians: GaussianSet, camera: Camera,
                    grad_color: np.ndarray,
                    grad_alpha: np.ndarray | None = None,
                    cache=None) -> dict:
    """Exact gradients of the tile forward w.r.t. all Gaussian parameters.

    Returns world-space gradients for positions/scales; callers composing
    with a canonical placement chain through its uniform scale themselves.
    The expected-depth channel is not differentiated. Pass the cache from
    :func:`render_forward` to skip re-projecting.
    """
    _check_finite(gaussians)
    n = len(gaussians)
    zeros = dict(positions=np.zeros((n, 3)), scales=np.zeros((n, 3)),
                 rotations=np.zeros((n, 4)), opacities=np.zeros(n),
                 colors=np.zeros((n, 3)))
    if n == 0:
        return zeros
    if cache is None:
        _, cache = _render_tile_cached(gaussians, camera)
    (pos, scl, rot, opa, col, mu, inv2, depth, order, start, count, nx,
     pc) = cache
    h, w = camera.height, camera.width
    if grad_alpha is None:
        grad_alpha = np.zeros((h, w))
    g_mu = np.zeros((n, 2))
    g_inv2 = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    g_color = np.zeros((n, 3))
    _raster.backward_tiles(order, start, count, nx, TILE_SIZE, h, w,
                           mu, inv2, np.ascontiguousarray(opa),
                           np.ascontiguousarray(col), depth,
                           np.ascontiguousarray(grad_color),
                           np.ascontiguousarray(grad_alpha),
                           g_mu, g_inv2, g_alpha, g_color)
    grads = _chain_to_params(g_mu, g_inv2, pc, scl, rot)
    grads["opacities"] = g_alpha
    grads["colors"] = g_color
    return grads


def _chain_to_params(g_mu, g_inv2, pc, scales, rotations) -> dict:
    """2D-space gradients back to world position, scale, and quaternion."""
    valid = pc["valid"]
    sa, sb, sc, det = pc["sa"], pc["sb"], pc["sc"], pc["det"]
    jac, cov_c, w2c = pc["jac"], pc["cov_c"], pc["w2c"]
    t_cam, tz, fx, fy = pc["t_cam"], pc["tz"], pc["fx"], pc["fy"]
    rot = pc["rot"]
    n = g_mu.shape[0]

    # inverse covariance -> covariance: dSigma = -inv G inv
    ginv = np.zeros((n, 2, 2))
    ginv[:, 0, 0] = g_inv2[:, 0]
    ginv[:, 0, 1] = ginv[:, 1, 0] = 0.5 * g_inv2[:, 1]
    ginv[:, 1, 1] = g_inv2[:, 2]
    inv_m = np.zeros((n, 2, 2))
    inv_m[:, 0, 0] = sc / det
    inv_m[:, 0, 1] = inv_m[:, 1, 0] = -sb / det
    inv_m[:, 1, 1] = sa / det
    g_cov2 = -(inv_m @ ginv @ inv_m)

    # cov2 = J Sigma_cam J^T
    jac_t = np.transpose(jac, (0, 2, 1))
    g_cov_c = jac_t @ g_cov2 @ jac
    g_jac = 2.0 * (g_cov2 @ jac @ cov_c)

    # screen mean -> camera point, plus J's own dependence on the camera point
    g_t = (g_mu[:, None, :] @ jac)[:, 0, :]
    tx, ty = t_cam[:, 0], t_cam[:, 1]
    inv_z2 = 1.0 / tz ** 2
    inv_z3 = inv_z2 / tz
    g_t[:, 0] += g_jac[:, 0, 2] * (-fx * inv_z2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-fy * inv_z2)
    g_t[:, 2] += (g_jac[:, 0, 0] * (-fx * inv_z2)
                  + g_jac[:, 0, 2] * (2.0 * fx * tx * inv_z3)
                  + g_jac[:, 1, 1] * (-fy * inv_z2)
                  + g_jac[:, 1, 2] * (2.0 * fy * ty * inv_z3))

    g_pos = g_t @ w2c
    g_cov_w = w2c.T[None] @ g_cov_c @ w2c[None]

    # Sigma_w = (R S)(R S)^T with S = diag(scales)
    rs = rot * scales[:, None, :]
    g_rs = 2.0 * (g_cov_w @ rs)
    g_scales = np.einsum("nab,nab->nb", g_rs, rot)
    g_rot = g_rs * scales[:, None, :]

    # rotation matrix -> quaternion (as the polynomial map, no renormalisation)
    q = rotations
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g_rot
    g_q = np.zeros((n, 4))
    g_q[:, 0] = 2.0 * (
        -qz * g[:, 0, 1] + qy * g[:, 0, 2] + qz * g[:, 1, 0]
        - qx * g[:, 1, 2] - qy * g[:, 2, 0] + qx * g[:, 2, 1])
    g_q[:, 1] = 2.0 * (
        qy * g[:, 0, 1] + qz * g[:, 0, 2] + qy * g[:, 1, 0]
        - 2.0 * qx * g[:, 1, 1] - qw * g[:, 1, 2] + qz * g[:, 2, 0]
        + qw * g[:, 2, 1] - 2.0 * qx * g[:, 2, 2])
    g_q[:, 2] = 2.0 * (
        -2.0 * qy * g[:, 0, 0] + qx * g[:, 0, 1] + qw * g[:, 0, 2]
        + qx * g[:, 1, 0] + qz * g[:, 1, 2] - qw * g[:, 2, 0]
        + qz * g[:, 2, 1] - 2.0 * qy * g[:, 2, 2])
    g_q[:, 3] = 2.0 * (
        -2.0 * qz * g[:, 0, 0] - qw * g[:, 0, 1] + qx * g[:, 0, 2]
        + qw * g[:, 1, 0] - 2.0 * qz * g[:, 1, 1] + qy * g[:, 1, 2]
        + qx * g[:, 2, 0] + qy * g[:, 2, 1])

    vm = valid[:, None]
    return dict(positions=np.where(vm, g_pos, 0.0),
                scales=np.where(vm, g_scales, 0.0),
                rotations=np.where(vm, g_q, 0.0))


# ---------------------------------------------------------------------------
# naive reference path


def _render_naive(gaussians: GaussianSet, camera: Camera) -> RenderTarget:
    """Per-pixel compositing over globally depth-sorted splats, no tiling."""
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    depth_img = np.zeros((h, w))
    if len(gaussians) == 0:
        return RenderTarget(color, alpha, depth_img)
    pos, scl, rot, opa, col = gaussians.world_arrays()
    mu, inv2, depth, _radii, valid, _ = _project(pos, scl, rot, camera)
    order = np.argsort(depth, kind="stable")
    order = order[valid[order]]
    for py in range(h):
        for px in range(w):
            t_cur = 1.0
            acc = np.zeros(3)
            w_depth = 0.0
            w_sum = 0.0
            for gi in order:
                if t_cur < _raster.T_EPS:
                    break
                dx = px - mu[gi, 0]
                dy = py - mu[gi, 1]
                q = inv2[gi, 0] * dx * dx + 2 * inv2[gi, 1] * dx * dy \
                    + inv2[gi, 2] * dy * dy
                if q >= _raster.Q_CUT or q < 0.0:
                    continue
                g, _ = _raster._kernel_value(q)
                a = opa[gi] * g
                if a < _raster.A_SKIP:
                    continue
                a = min(a, _raster.A_MAX)
                weight = a * t_cur
                acc += weight * col[gi]
                w_depth += weight * depth[gi]
                w_sum += weight
                t_cur *= 1.0 - a
            color[py, px] = acc
            alpha[py, px] = w_sum
            depth_img[py, px] = w_depth / max(w_sum, 1e-6)
    return RenderTarget(color, alpha, depth_img)


# ---------------------------------------------------------------------------
# photometric losses


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter2(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable zero-padded filtering; the operator is self-adjoint."""
    pad = win.size // 2
    out = np.zeros_like(img)
    tmp = np.zeros_like(img)
    padded = np.zeros((img.shape[0] + 2 * pad,) + img.shape[1:])
    padded[pad:pad + img.shape[0]] = img
    for i, wv in enumerate(win):
        tmp += wv * padded[i:i + img.shape[0]]
    padded2 = np.zeros((img.shape[0], img.shape[1] + 2 * pad) + img.shape[2:])
    padded2[:, pad:pad + img.shape[1]] = tmp
    for i, wv in enumerate(win):
        out += wv * padded2[:, i:i + img.shape[1]]
    return out


def ssim_map(pred: np.ndarray, gt: np.ndarray,
             window: int = 11, sigma: float = 1.5):
    """Per-pixel SSIM (channel-averaged) plus the caches for its backward."""
    win = _gaussian_window(window, sigma)
    mu_x = _filter2(pred, win)
    mu_y = _filter2(gt, win)
    xx = _filter2(pred * pred, win)
    yy = _filter2(gt * gt, win)
    xy = _filter2(pred * gt, win)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + _SSIM_C1
    a2 = 2 * cov + _SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + _SSIM_C1
    b2 = var_x + var_y + _SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    cache = (win, mu_x, mu_y, var_x, cov, a1, a2, b1, b2)
    return smap.mean(axis=2), cache, smap


def ssim_backward(pred: np.ndarray, gt: np.ndarray, cache,
                  g_map: np.ndarray) -> np.ndarray:
    """d(sum g_map * ssim_map)/d pred, with g_map per pixel (channel shared)."""
    win, mu_x, mu_y, var_x, cov, a1, a2, b1, b2 = cache
    g = g_map[:, :, None] / pred.shape[2]
    denom = b1 * b2
    d_mu_x = g * (2 * mu_y * a2 / denom - a1 * a2 * 2 * mu_x / (denom * b1))
    d_var_x = -g * a1 * a2 / (denom * b2)
    d_cov = 2 * g * a1 / denom
    # through the filtered moments: mu_x = w*x, var_x = w*x^2 - mu_x^2,
    # cov = w*(xy) - mu_x mu_y
    t_mu = d_mu_x - 2 * mu_x * d_var_x - mu_y * d_cov
    out = _filter2(t_mu, win)
    out += 2 * pred * _filter2(d_var_x, win)
    out += gt * _filter2(d_cov, win)
    return out


def photometric_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                     lam: float = 0.8, perceptual=None):
    """Masked lam * L1 + (1 - lam) * (1 - SSIM) + optional perceptual term.

    Returns ``(loss, d_loss/d_pred)``. The perceptual plug-in must return a
    scalar and a gradient image; it defaults to zero.
    """
    if pred.shape != gt.shape:
        raise InvalidInputError("pred and gt shapes differ")
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError("lambda must lie in [0, 1]")
    m = mask.astype(bool)
    n_pix = int(m.sum())
    if n_pix == 0:
        raise InvalidInputError("empty mask")
    diff = pred - gt
    l1 = float(np.abs(diff[m]).sum() / (3 * n_pix))
    d_pred = np.zeros_like(pred)
    d_pred[m] = lam * np.sign(diff[m]) / (3 * n_pix)

    loss = lam * l1
    if lam < 1.0:
        smean, cache, _ = ssim_map(pred, gt)
        ssim_val = float(smean[m].mean())
        loss += (1.0 - lam) * (1.0 - ssim_val)
        g_map = np.zeros(smean.shape)
        g_map[m] = -(1.0 - lam) / n_pix
        d_pred += ssim_backward(pred, gt, cache, g_map)

    if perceptual is not None:
        p_loss, p_grad = perceptual(pred, gt)
        loss += float(p_loss)
        d_pred += p_grad
    return loss, d_pred


def image_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> dict:
    """Masked PSNR (peak 1, capped at 99), SSIM, and L1."""
    m = mask.astype(bool)
    if not np.any(m):
        raise InvalidInputError("empty mask")
    diff = pred - gt
    mse = float((diff[m] ** 2).mean())
    psnr = 99.0 if mse <= 1e-12 else min(-10.0 * np.log10(mse), 99.0)
    smean, _, _ = ssim_map(pred, gt)
    return {
        "psnr": float(psnr),
        "ssim": float(smean[m].mean()),
        "l1": float(np.abs(diff[m]).mean()),
    }
