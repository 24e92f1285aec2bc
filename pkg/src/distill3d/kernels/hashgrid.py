"""Multi-resolution hash-grid interpolation (forward and backward)."""

from __future__ import annotations

import numpy as np

from . import backend, njit

P1 = 2654435761
P2 = 805459861


@njit
def _lattice(cx, cy, cz, res, size, dense):
    if dense:
        r = res + 1
        return (cx * r + cy) * r + cz
    return ((cx * 1) ^ (cy * P1) ^ (cz * P2)) % size


@njit
def _encode_nb(x01, table, res, offsets, sizes, dense):
    n = x01.shape[0]
    n_lvl = res.shape[0]
    nf = table.shape[1]
    out = np.zeros((n, n_lvl * nf), dtype=table.dtype)
    for i in range(n):
        for l in range(n_lvl):
            r = res[l]
            px = x01[i, 0] * r
            py = x01[i, 1] * r
            pz = x01[i, 2] * r
            bx = min(max(np.floor(px), 0.0), r - 1.0)
            by = min(max(np.floor(py), 0.0), r - 1.0)
            bz = min(max(np.floor(pz), 0.0), r - 1.0)
            fx, fy, fz = px - bx, py - by, pz - bz
            ix, iy, iz = np.int64(bx), np.int64(by), np.int64(bz)
            for c in range(8):
                dx, dy, dz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                row = offsets[l] + _lattice(ix + dx, iy + dy, iz + dz, r, sizes[l], dense[l])
                for f in range(nf):
                    out[i, l * nf + f] += w * table[row, f]
    return out


@njit
def _encode_backward_nb(x01, table, grad_out, res, offsets, sizes, dense, need_x):
    n = x01.shape[0]
    n_lvl = res.shape[0]
    nf = table.shape[1]
    g_table = np.zeros_like(table)
    g_x = np.zeros((n, 3), dtype=table.dtype)
    for i in range(n):
        for l in range(n_lvl):
            r = res[l]
            px = x01[i, 0] * r
            py = x01[i, 1] * r
            pz = x01[i, 2] * r
            bx = min(max(np.floor(px), 0.0), r - 1.0)
            by = min(max(np.floor(py), 0.0), r - 1.0)
            bz = min(max(np.floor(pz), 0.0), r - 1.0)
            fx, fy, fz = px - bx, py - by, pz - bz
            ix, iy, iz = np.int64(bx), np.int64(by), np.int64(bz)
            for c in range(8):
                dx, dy, dz = (c >> 2) & 1, (c >> 1) & 1, c & 1
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                wz = fz if dz else 1.0 - fz
                w = wx * wy * wz
                row = offsets[l] + _lattice(ix + dx, iy + dy, iz + dz, r, sizes[l], dense[l])
                dot = 0.0
                for f in range(nf):
                    g = grad_out[i, l * nf + f]
                    g_table[row, f] += w * g
                    dot += g * table[row, f]
                if need_x:
                    sx = 1.0 if dx else -1.0
                    sy = 1.0 if dy else -1.0
                    sz = 1.0 if dz else -1.0
                    g_x[i, 0] += dot * sx * wy * wz * r
                    g_x[i, 1] += dot * wx * sy * wz * r
                    g_x[i, 2] += dot * wx * wy * sz * r
    return g_table, g_x


_CORNER = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


def _corners_np(x01, l, res, offsets, sizes, dense):
    r = res[l]
    pos = x01 * r
    base = np.clip(np.floor(pos), 0, r - 1)
    frac = pos - base
    cell = base.astype(np.int64)[:, None, :] + _CORNER[None]  # (N, 8, 3)
    if dense[l]:
        row = (cell[..., 0] * (r + 1) + cell[..., 1]) * (r + 1) + cell[..., 2]
    else:
        row = (cell[..., 0] ^ (cell[..., 1] * P1) ^ (cell[..., 2] * P2)) % sizes[l]
    w_axis = np.where(_CORNER[None].astype(bool), frac[:, None, :], 1 - frac[:, None, :])  # (N, 8, 3)
    return row + offsets[l], w_axis


def _encode_np(x01, table, res, offsets, sizes, dense):
    n, nf = x01.shape[0], table.shape[1]
    out = np.zeros((n, len(res) * nf), dtype=table.dtype)
    for l in range(len(res)):
        rows, w_axis = _corners_np(x01, l, res, offsets, sizes, dense)
        w = w_axis.prod(-1)
        out[:, l * nf : (l + 1) * nf] = (table[rows] * w[..., None]).sum(1)
    return out


def _encode_backward_np(x01, table, grad_out, res, offsets, sizes, dense, need_x):
    n, nf = x01.shape[0], table.shape[1]
    g_table = np.zeros_like(table)
    g_x = np.zeros((n, 3), dtype=table.dtype)
    sign = np.where(_CORNER.astype(bool), 1.0, -1.0)  # (8, 3)
    for l in range(len(res)):
        rows, w_axis = _corners_np(x01, l, res, offsets, sizes, dense)
        w = w_axis.prod(-1)
        g = grad_out[:, l * nf : (l + 1) * nf]  # (N, F)
        flat = rows.reshape(-1)
        for f in range(nf):
            g_table[:, f] += np.bincount(flat, weights=(w * g[:, f : f + 1]).reshape(-1), minlength=table.shape[0])
        if need_x:
            dot = (table[rows] * g[:, None, :]).sum(-1)  # (N, 8)
            for a in range(3):
                others = [b for b in range(3) if b != a]
                dw = sign[None, :, a] * w_axis[..., others[0]] * w_axis[..., others[1]] * res[l]
                g_x[:, a] += (dot * dw).sum(1)
    return g_table, g_x


def encode(x01, table, res, offsets, sizes, dense):
    """Interpolated features, (N, levels * F), for points ``x01`` in the unit cube."""
    fn = _encode_nb if backend() == "numba" else _encode_np
    return fn(x01, table, res, offsets, sizes, dense)


def encode_backward(x01, table, grad_out, res, offsets, sizes, dense, need_x=True):
    """Gradients w.r.t. the table and the unit-cube positions."""
    fn = _encode_backward_nb if backend() == "numba" else _encode_backward_np
    return fn(x01, table, grad_out, res, offsets, sizes, dense, need_x)
