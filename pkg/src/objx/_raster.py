"""Single-threaded numba kernels for the tile rasterizer.

The splat kernel is a 2D Gaussian multiplied by a C1 window that reaches
exactly zero at Mahalanobis distance 3 (q = 9), so footprint culling at 3
sigma introduces no discontinuity into the compositing function and finite
differences of the forward stay consistent with the analytic backward.

Compositing per pixel is front-to-back over depth-sorted splats with an
early-out once transmittance drops below 1e-4. The backward kernel replays
each pixel in reverse, reconstructing transmittance by division (alpha
contributions are capped below 1), and accumulates gradients with respect to
the 2D means, inverse covariances, opacities, and colors.
"""

import numpy as np
from numba import njit

T_EPS = 1e-4      # transmittance early-out
A_MAX = 0.9999    # cap on per-splat alpha so 1 - a never vanishes
A_SKIP = 1e-12    # negligible contributions are skipped
Q_CUT = 9.0       # 3-sigma Mahalanobis cutoff
Q_SOFT = 7.0      # window starts decaying here


@njit(cache=True, fastmath=False)
def _kernel_value(q):
    """exp(-q/2) with the smoothstep window; returns (g, dg/dq)."""
    if q >= Q_CUT:
        return 0.0, 0.0
    e = np.exp(-0.5 * q)
    if q <= Q_SOFT:
        return e, -0.5 * e
    t = (Q_CUT - q) / (Q_CUT - Q_SOFT)
    win = t * t * (3.0 - 2.0 * t)
    dwin = -6.0 * t * (1.0 - t) / (Q_CUT - Q_SOFT)
    return e * win, e * (-0.5 * win + dwin)


@njit(cache=True, fastmath=False)
def forward_tiles(order, tile_start, tile_count, tiles_x, tile_size,
                  height, width, mu, inv2, alpha, color, depth,
                  out_color, out_alpha, out_depth):
    n_tiles = tile_start.shape[0]
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        s = tile_start[tile]
        c = tile_count[tile]
        if c == 0:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                t_cur = 1.0
                r = 0.0
                g_acc = 0.0
                b = 0.0
                w_depth = 0.0
                w_sum = 0.0
                for k in range(s, s + c):
                    if t_cur < T_EPS:
                        break
                    gi = order[k]
                    dx = px - mu[gi, 0]
                    dy = py - mu[gi, 1]
                    q = inv2[gi, 0] * dx * dx + 2.0 * inv2[gi, 1] * dx * dy \
                        + inv2[gi, 2] * dy * dy
                    if q >= Q_CUT or q < 0.0:
                        continue
                    g, _ = _kernel_value(q)
                    a = alpha[gi] * g
                    if a < A_SKIP:
                        continue
                    if a > A_MAX:
                        a = A_MAX
                    w = a * t_cur
                    r += w * color[gi, 0]
                    g_acc += w * color[gi, 1]
                    b += w * color[gi, 2]
                    w_depth += w * depth[gi]
                    w_sum += w
                    t_cur *= 1.0 - a
                out_color[py, px, 0] = r
                out_color[py, px, 1] = g_acc
                out_color[py, px, 2] = b
                out_alpha[py, px] = w_sum
                d = w_depth / max(w_sum, 1e-6)
                out_depth[py, px] = d


@njit(cache=True, fastmath=False)
def backward_tiles(order, tile_start, tile_count, tiles_x, tile_size,
                   height, width, mu, inv2, alpha, color, depth,
                   grad_color_img, grad_alpha_img,
                   g_mu, g_inv2, g_alpha, g_color):
    n_tiles = tile_start.shape[0]
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        s = tile_start[tile]
        c = tile_count[tile]
        if c == 0:
            continue
        for py in range(y0, y1):
            for px in range(x0, x1):
                go0 = grad_color_img[py, px, 0]
                go1 = grad_color_img[py, px, 1]
                go2 = grad_color_img[py, px, 2]
                ga = grad_alpha_img[py, px]
                if go0 == 0.0 and go1 == 0.0 and go2 == 0.0 and ga == 0.0:
                    continue
                # pass 1: find the last processed splat and final transmittance
                t_cur = 1.0
                stop = s + c
                for k in range(s, s + c):
                    if t_cur < T_EPS:
                        stop = k
                        break
                    gi = order[k]
                    dx = px - mu[gi, 0]
                    dy = py - mu[gi, 1]
                    q = inv2[gi, 0] * dx * dx + 2.0 * inv2[gi, 1] * dx * dy \
                        + inv2[gi, 2] * dy * dy
                    if q >= Q_CUT or q < 0.0:
                        continue
                    g, _ = _kernel_value(q)
                    a = alpha[gi] * g
                    if a < A_SKIP:
                        continue
                    if a > A_MAX:
                        a = A_MAX
                    t_cur *= 1.0 - a
                # pass 2: reverse sweep with suffix accumulators
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                u_suf = 0.0
                t_next = t_cur
                for k in range(stop - 1, s - 1, -1):
                    gi = order[k]
                    dx = px - mu[gi, 0]
                    dy = py - mu[gi, 1]
                    q = inv2[gi, 0] * dx * dx + 2.0 * inv2[gi, 1] * dx * dy \
                        + inv2[gi, 2] * dy * dy
                    if q >= Q_CUT or q < 0.0:
                        continue
                    g, dgdq = _kernel_value(q)
                    a = alpha[gi] * g
                    if a < A_SKIP:
                        continue
                    capped = a > A_MAX
                    if capped:
                        a = A_MAX
                    t_k = t_next / (1.0 - a)
                    w = a * t_k
                    # color gradient
                    g_color[gi, 0] += w * go0
                    g_color[gi, 1] += w * go1
                    g_color[gi, 2] += w * go2
                    # d out / d a_k = c_k T_k - S_k / (1 - a_k)
                    inv_om = 1.0 / (1.0 - a)
                    da = go0 * (color[gi, 0] * t_k - s0 * inv_om) \
                        + go1 * (color[gi, 1] * t_k - s1 * inv_om) \
                        + go2 * (color[gi, 2] * t_k - s2 * inv_om) \
                        + ga * (t_k - u_suf * inv_om)
                    # suffix updates (contribution of this splat)
                    s0 += w * color[gi, 0]
                    s1 += w * color[gi, 1]
                    s2 += w * color[gi, 2]
                    u_suf += w
                    t_next = t_k
                    if capped:
                        continue  # cap is flat: no gradient into alpha or q
                    g_alpha[gi] += g * da
                    dq = alpha[gi] * dgdq * da
                    g_inv2[gi, 0] += dq * dx * dx
                    g_inv2[gi, 1] += dq * 2.0 * dx * dy
                    g_inv2[gi, 2] += dq * dy * dy
                    ddx = dq * 2.0 * (inv2[gi, 0] * dx + inv2[gi, 1] * dy)
                    ddy = dq * 2.0 * (inv2[gi, 1] * dx + inv2[gi, 2] * dy)
                    g_mu[gi, 0] -= ddx
                    g_mu[gi, 1] -= ddy
