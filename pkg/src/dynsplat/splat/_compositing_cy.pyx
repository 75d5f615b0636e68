# Compiled alpha-compositing kernels.
#
# Mirrors _compositing_py.py line for line: same traversal order, same
# operation order, libm exp, compiled with -ffp-contract=off, so output is
# bitwise identical to the pure-Python reference.

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def composite_forward(int H, int W,
                      cnp.int64_t[::1] indptr, cnp.int64_t[::1] gidx,
                      double[:, ::1] means, double[:, ::1] prec,
                      double[::1] depths, double[:, ::1] colors,
                      double[::1] opacities,
                      double g_max, double term_t, group=None):
    cdef int n_pix = H * W
    color_a = np.zeros((H, W, 3), dtype=np.float64)
    depth_a = np.zeros((H, W), dtype=np.float64)
    wsum_a = np.zeros((H, W), dtype=np.float64)
    trans_a = np.ones((H, W), dtype=np.float64)
    ncon_a = np.zeros((H, W), dtype=np.int32)
    groupw_a = np.zeros((H, W), dtype=np.float64)

    cdef double[:, :, ::1] out_col = color_a
    cdef double[:, ::1] out_dep = depth_a
    cdef double[:, ::1] out_wsum = wsum_a
    cdef double[:, ::1] out_trans = trans_a
    cdef int[:, ::1] out_ncon = ncon_a
    cdef double[:, ::1] out_groupw = groupw_a

    cdef cnp.int8_t[::1] group_v
    cdef bint has_group = group is not None
    if has_group:
        group_v = np.ascontiguousarray(group, dtype=np.int8)

    cdef int iy, ix, ncon
    cdef cnp.int64_t e, gi, pix
    cdef double px, py, T, cr, cg, cb, dsum, wsum, gw
    cdef double dx, dy, power, g, w

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
            for e in range(indptr[pix], indptr[pix + 1]):
                gi = gidx[e]
                dx = px - means[gi, 0]
                dy = py - means[gi, 1]
                power = prec[gi, 0] * dx * dx + 2.0 * prec[gi, 1] * dx * dy + prec[gi, 2] * dy * dy
                g = opacities[gi] * exp(-0.5 * power)
                if g > g_max:
                    g = g_max
                w = g * T
                cr = cr + w * colors[gi, 0]
                cg = cg + w * colors[gi, 1]
                cb = cb + w * colors[gi, 2]
                dsum = dsum + w * depths[gi]
                wsum = wsum + w
                if has_group and group_v[gi] != 0:
                    gw = gw + w
                ncon += 1
                T = T * (1.0 - g)
                if T < term_t:
                    break
            out_col[iy, ix, 0] = cr
            out_col[iy, ix, 1] = cg
            out_col[iy, ix, 2] = cb
            out_dep[iy, ix] = dsum
            out_wsum[iy, ix] = wsum
            out_trans[iy, ix] = T
            out_ncon[iy, ix] = ncon
            out_groupw[iy, ix] = gw

    return color_a, depth_a, wsum_a, trans_a, ncon_a, groupw_a


def composite_backward(int H, int W,
                       cnp.int64_t[::1] indptr, cnp.int64_t[::1] gidx,
                       double[:, ::1] means, double[:, ::1] prec,
                       double[::1] depths, double[:, ::1] colors,
                       double[::1] opacities,
                       double g_max, double term_t,
                       double[:, :, ::1] dldc, double[:, ::1] dldd):
    cdef Py_ssize_t n = means.shape[0]
    g_mean_a = np.zeros((n, 2), dtype=np.float64)
    g_prec_a = np.zeros((n, 3), dtype=np.float64)
    g_depth_a = np.zeros(n, dtype=np.float64)
    g_opac_a = np.zeros(n, dtype=np.float64)
    g_color_a = np.zeros((n, 3), dtype=np.float64)

    cdef double[:, ::1] g_mean = g_mean_a
    cdef double[:, ::1] g_prec = g_prec_a
    cdef double[::1] g_depth = g_depth_a
    cdef double[::1] g_opac = g_opac_a
    cdef double[:, ::1] g_color = g_color_a

    cdef cnp.int64_t max_row = 0, row
    cdef cnp.int64_t pix
    for pix in range(H * W):
        row = indptr[pix + 1] - indptr[pix]
        if row > max_row:
            max_row = row
    if max_row == 0:
        return g_mean_a, g_prec_a, g_depth_a, g_opac_a, g_color_a

    s_gi_a = np.zeros(max_row, dtype=np.int64)
    s_g_a = np.zeros(max_row, dtype=np.float64)
    s_G_a = np.zeros(max_row, dtype=np.float64)
    s_T_a = np.zeros(max_row, dtype=np.float64)
    s_w_a = np.zeros(max_row, dtype=np.float64)
    s_dx_a = np.zeros(max_row, dtype=np.float64)
    s_dy_a = np.zeros(max_row, dtype=np.float64)
    s_cl_a = np.zeros(max_row, dtype=np.int8)
    cdef cnp.int64_t[::1] s_gi = s_gi_a
    cdef double[::1] s_g = s_g_a
    cdef double[::1] s_G = s_G_a
    cdef double[::1] s_T = s_T_a
    cdef double[::1] s_w = s_w_a
    cdef double[::1] s_dx = s_dx_a
    cdef double[::1] s_dy = s_dy_a
    cdef cnp.int8_t[::1] s_cl = s_cl_a

    cdef int iy, ix, ncon
    cdef cnp.int64_t e, gi, start, stop, j
    cdef double px, py, T, dc0, dc1, dc2, dd
    cdef double dx, dy, power, G, g, w
    cdef double sc0, sc1, sc2, sd, dldw, dldg, dldq, gx, gy
    cdef bint clamped

    for iy in range(H):
        py = iy + 0.5
        for ix in range(W):
            px = ix + 0.5
            pix = iy * W + ix
            start = indptr[pix]
            stop = indptr[pix + 1]
            if start == stop:
                continue
            dc0 = dldc[iy, ix, 0]
            dc1 = dldc[iy, ix, 1]
            dc2 = dldc[iy, ix, 2]
            dd = dldd[iy, ix]
            if dc0 == 0.0 and dc1 == 0.0 and dc2 == 0.0 and dd == 0.0:
                continue

            T = 1.0
            ncon = 0
            for e in range(start, stop):
                gi = gidx[e]
                dx = px - means[gi, 0]
                dy = py - means[gi, 1]
                power = prec[gi, 0] * dx * dx + 2.0 * prec[gi, 1] * dx * dy + prec[gi, 2] * dy * dy
                G = exp(-0.5 * power)
                g = opacities[gi] * G
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
                s_cl[ncon] = clamped
                ncon += 1
                T = T * (1.0 - g)
                if T < term_t:
                    break

            sc0 = 0.0
            sc1 = 0.0
            sc2 = 0.0
            sd = 0.0
            for j in range(ncon - 1, -1, -1):
                gi = s_gi[j]
                w = s_w[j]
                g = s_g[j]
                g_color[gi, 0] = g_color[gi, 0] + w * dc0
                g_color[gi, 1] = g_color[gi, 1] + w * dc1
                g_color[gi, 2] = g_color[gi, 2] + w * dc2
                g_depth[gi] = g_depth[gi] + w * dd
                dldw = dc0 * colors[gi, 0] + dc1 * colors[gi, 1] + dc2 * colors[gi, 2] + dd * depths[gi]
                dldg = s_T[j] * dldw - (dc0 * sc0 + dc1 * sc1 + dc2 * sc2 + dd * sd) / (1.0 - g)
                if not s_cl[j]:
                    G = s_G[j]
                    g_opac[gi] = g_opac[gi] + dldg * G
                    dldq = dldg * opacities[gi] * (-0.5 * G)
                    dx = s_dx[j]
                    dy = s_dy[j]
                    gx = 2.0 * (prec[gi, 0] * dx + prec[gi, 1] * dy)
                    gy = 2.0 * (prec[gi, 1] * dx + prec[gi, 2] * dy)
                    g_mean[gi, 0] = g_mean[gi, 0] - dldq * gx
                    g_mean[gi, 1] = g_mean[gi, 1] - dldq * gy
                    g_prec[gi, 0] = g_prec[gi, 0] + dldq * dx * dx
                    g_prec[gi, 1] = g_prec[gi, 1] + dldq * 2.0 * dx * dy
                    g_prec[gi, 2] = g_prec[gi, 2] + dldq * dy * dy
                sc0 = sc0 + w * colors[gi, 0]
                sc1 = sc1 + w * colors[gi, 1]
                sc2 = sc2 + w * colors[gi, 2]
                sd = sd + w * depths[gi]

    return g_mean_a, g_prec_a, g_depth_a, g_opac_a, g_color_a
