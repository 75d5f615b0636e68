"""Pure-Python per-pixel alpha-compositing kernels.

This is the reference implementation: the compiled kernel in
_compositing_cy.pyx mirrors it line for line and must produce bitwise
identical output (same operation order, same libm exp, no FMA).

Inputs arrive pre-sorted front-to-back; `indptr`/`gidx` is a CSR layout
mapping each pixel (row-major) to the indices of the Gaussians whose
support box covers it, already in compositing order.
"""
from __future__ import annotations

import math

import numpy as np


def composite_forward(H, W, indptr, gidx, means, prec, depths, colors, opacities,
                      g_max, term_t, group=None):
    """Front-to-back composite; returns (color, depth, wsum, transmit, ncontrib, groupw)."""
    n_pix = H * W
    indptr_l = indptr.tolist()
    gidx_l = gidx.tolist()
    means_l = means.tolist()
    prec_l = prec.tolist()
    depths_l = depths.tolist()
    colors_l = colors.tolist()
    opac_l = opacities.tolist()
    group_l = group.tolist() if group is not None else None

    out_col = [0.0] * (n_pix * 3)
    out_dep = [0.0] * n_pix
    out_wsum = [0.0] * n_pix
    out_trans = [1.0] * n_pix
    out_ncon = [0] * n_pix
    out_groupw = [0.0] * n_pix

    exp = math.exp
    for iy in range(H):
        py = iy + 0.5
        for ix in range(W):
            px = ix + 0.5
            pix = iy * W + ix
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            dsum = 0.0
            wsum = 0.0
            gw = 0.0
            ncon = 0
            for e in range(indptr_l[pix], indptr_l[pix + 1]):
                gi = gidx_l[e]
                m = means_l[gi]
                dx = px - m[0]
                dy = py - m[1]
                p = prec_l[gi]
                power = p[0] * dx * dx + 2.0 * p[1] * dx * dy + p[2] * dy * dy
                g = opac_l[gi] * exp(-0.5 * power)
                if g > g_max:
                    g = g_max
                w = g * T
                c = colors_l[gi]
                cr = cr + w * c[0]
                cg = cg + w * c[1]
                cb = cb + w * c[2]
                dsum = dsum + w * depths_l[gi]
                wsum = wsum + w
                if group_l is not None and group_l[gi] != 0:
                    gw = gw + w
                ncon += 1
                T = T * (1.0 - g)
                if T < term_t:
                    break
            out_col[pix * 3] = cr
            out_col[pix * 3 + 1] = cg
            out_col[pix * 3 + 2] = cb
            out_dep[pix] = dsum
            out_wsum[pix] = wsum
            out_trans[pix] = T
            out_ncon[pix] = ncon
            out_groupw[pix] = gw

    color = np.array(out_col, dtype=np.float64).reshape(H, W, 3)
    depth = np.array(out_dep, dtype=np.float64).reshape(H, W)
    wsum = np.array(out_wsum, dtype=np.float64).reshape(H, W)
    trans = np.array(out_trans, dtype=np.float64).reshape(H, W)
    ncon = np.array(out_ncon, dtype=np.int32).reshape(H, W)
    groupw = np.array(out_groupw, dtype=np.float64).reshape(H, W)
    return color, depth, wsum, trans, ncon, groupw


def composite_backward(H, W, indptr, gidx, means, prec, depths, colors, opacities,
                       g_max, term_t, dldc, dldd):
    """Gradients of a scalar loss through the forward composite.

    dldc: (H, W, 3) loss gradient w.r.t. rendered color; dldd: (H, W) w.r.t.
    rendered depth.  Returns per-Gaussian gradients w.r.t. 2D mean, precision
    components (a, b, c), center depth, opacity and color.
    """
    n = len(means)
    indptr_l = indptr.tolist()
    gidx_l = gidx.tolist()
    means_l = means.tolist()
    prec_l = prec.tolist()
    depths_l = depths.tolist()
    colors_l = colors.tolist()
    opac_l = opacities.tolist()
    dldc_l = dldc.reshape(-1).tolist()
    dldd_l = dldd.reshape(-1).tolist()

    g_mean = [0.0] * (n * 2)
    g_prec = [0.0] * (n * 3)
    g_depth = [0.0] * n
    g_opac = [0.0] * n
    g_color = [0.0] * (n * 3)

    # forward-replay scratch, one slot per composited contributor
    max_row = 0
    for pix in range(H * W):
        row = indptr_l[pix + 1] - indptr_l[pix]
        if row > max_row:
            max_row = row
    s_gi = [0] * max_row
    s_g = [0.0] * max_row
    s_G = [0.0] * max_row
    s_T = [0.0] * max_row
    s_w = [0.0] * max_row
    s_dx = [0.0] * max_row
    s_dy = [0.0] * max_row
    s_clamped = [False] * max_row

    exp = math.exp
    for iy in range(H):
        py = iy + 0.5
        for ix in range(W):
            px = ix + 0.5
            pix = iy * W + ix
            start = indptr_l[pix]
            stop = indptr_l[pix + 1]
            if start == stop:
                continue
            dc0 = dldc_l[pix * 3]
            dc1 = dldc_l[pix * 3 + 1]
            dc2 = dldc_l[pix * 3 + 2]
            dd = dldd_l[pix]
            if dc0 == 0.0 and dc1 == 0.0 and dc2 == 0.0 and dd == 0.0:
                continue

            # replay the forward pass, recording per-contributor state
            T = 1.0
            ncon = 0
            for e in range(start, stop):
                gi = gidx_l[e]
                m = means_l[gi]
                dx = px - m[0]
                dy = py - m[1]
                p = prec_l[gi]
                power = p[0] * dx * dx + 2.0 * p[1] * dx * dy + p[2] * dy * dy
                G = exp(-0.5 * power)
                g = opac_l[gi] * G
                clamped = g > g_max
                if clamped:
                    g = g_max
                s_gi[ncon] = gi
                s_g[ncon] = g
                s_G[ncon] = G
                s_T[ncon] = T
                s_w[ncon] = g * T
                s_dx[ncon] = dx
                s_dy[ncon] = dy
                s_clamped[ncon] = clamped
                ncon += 1
                T = T * (1.0 - g)
                if T < term_t:
                    break

            # back-to-front accumulation of suffix sums
            sc0 = 0.0
            sc1 = 0.0
            sc2 = 0.0
            sd = 0.0
            for j in range(ncon - 1, -1, -1):
                gi = s_gi[j]
                w = s_w[j]
                g = s_g[j]
                c = colors_l[gi]
                g_color[gi * 3] = g_color[gi * 3] + w * dc0
                g_color[gi * 3 + 1] = g_color[gi * 3 + 1] + w * dc1
                g_color[gi * 3 + 2] = g_color[gi * 3 + 2] + w * dc2
                g_depth[gi] = g_depth[gi] + w * dd
                dldw = dc0 * c[0] + dc1 * c[1] + dc2 * c[2] + dd * depths_l[gi]
                dldg = s_T[j] * dldw - (dc0 * sc0 + dc1 * sc1 + dc2 * sc2 + dd * sd) / (1.0 - g)
                if not s_clamped[j]:
                    G = s_G[j]
                    g_opac[gi] = g_opac[gi] + dldg * G
                    dldq = dldg * opac_l[gi] * (-0.5 * G)
                    dx = s_dx[j]
                    dy = s_dy[j]
                    p = prec_l[gi]
                    gx = 2.0 * (p[0] * dx + p[1] * dy)
                    gy = 2.0 * (p[1] * dx + p[2] * dy)
                    g_mean[gi * 2] = g_mean[gi * 2] - dldq * gx
                    g_mean[gi * 2 + 1] = g_mean[gi * 2 + 1] - dldq * gy
                    g_prec[gi * 3] = g_prec[gi * 3] + dldq * dx * dx
                    g_prec[gi * 3 + 1] = g_prec[gi * 3 + 1] + dldq * 2.0 * dx * dy
                    g_prec[gi * 3 + 2] = g_prec[gi * 3 + 2] + dldq * dy * dy
                sc0 = sc0 + w * c[0]
                sc1 = sc1 + w * c[1]
                sc2 = sc2 + w * c[2]
                sd = sd + w * depths_l[gi]

    return (np.array(g_mean).reshape(n, 2), np.array(g_prec).reshape(n, 3),
            np.array(g_depth), np.array(g_opac), np.array(g_color).reshape(n, 3))
