"""Triangle coverage in screen space (z-buffered) and in texture space."""

from __future__ import annotations

import numpy as np

from . import backend, njit


@njit
def _zbuffer_nb(xy, z, faces, height, width, near):
    face_id = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[a] <= near or z[b] <= near or z[c] <= near:
            continue
        x0, y0 = xy[a, 0], xy[a, 1]
        x1, y1 = xy[b, 0], xy[b, 1]
        x2, y2 = xy[c, 0], xy[c, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-14:
            continue
        j0 = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        j1 = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        i0 = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        i1 = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                inv_z = w0 / z[a] + w1 / z[b] + w2 / z[c]
                d = 1.0 / inv_z
                if d < depth[i, j]:
                    depth[i, j] = d
                    face_id[i, j] = f
    return face_id, depth


def _candidates(xy, faces, height, width):
    """All (face, pixel) pairs inside each face's clipped bounding box."""
    tri = xy[faces]  # (F, 3, 2)
    j0 = np.clip(np.floor(tri[..., 0].min(1) - 0.5), 0, None).astype(np.int64)
    j1 = np.clip(np.ceil(tri[..., 0].max(1) - 0.5), None, width - 1).astype(np.int64)
    i0 = np.clip(np.floor(tri[..., 1].min(1) - 0.5), 0, None).astype(np.int64)
    i1 = np.clip(np.ceil(tri[..., 1].max(1) - 0.5), None, height - 1).astype(np.int64)
    nw = np.maximum(j1 - j0 + 1, 0)
    nh = np.maximum(i1 - i0 + 1, 0)
    count = nw * nh
    fid = np.repeat(np.arange(faces.shape[0]), count)
    local = np.arange(fid.size) - np.repeat(np.cumsum(count) - count, count)
    ii = i0[fid] + local // np.maximum(nw[fid], 1)
    jj = j0[fid] + local % np.maximum(nw[fid], 1)
    return fid, ii, jj


def _bary_np(tri, px, py):
    x0, y0 = tri[:, 0, 0], tri[:, 0, 1]
    x1, y1 = tri[:, 1, 0], tri[:, 1, 1]
    x2, y2 = tri[:, 2, 0], tri[:, 2, 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    safe = np.where(np.abs(area) < 1e-14, 1.0, area)
    w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / safe
    w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / safe
    w2 = 1.0 - w0 - w1
    ok = (np.abs(area) >= 1e-14) & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    return np.stack([w0, w1, w2], -1), ok


def _zbuffer_np(xy, z, faces, height, width, near):
    face_id = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), np.inf)
    valid = (z[faces] > near).all(1)
    idx = np.nonzero(valid)[0]
    fid, ii, jj = _candidates(xy, faces[idx], height, width)
    fid = idx[fid]
    w, ok = _bary_np(xy[faces[fid]], jj + 0.5, ii + 0.5)
    fid, ii, jj, w = fid[ok], ii[ok], jj[ok], w[ok]
    zf = z[faces[fid]]
    d = 1.0 / (w[:, 0] / zf[:, 0] + w[:, 1] / zf[:, 1] + w[:, 2] / zf[:, 2])
    pix = ii * width + jj
    order = np.lexsort((fid, d, pix))
    pix_s = pix[order]
    first = np.ones(pix_s.size, dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    face_id.reshape(-1)[pix[win]] = fid[win]
    depth.reshape(-1)[pix[win]] = d[win]
    return face_id, depth


def zbuffer(xy: np.ndarray, z: np.ndarray, faces: np.ndarray, height: int, width: int, near: float = 1e-6):
    """Nearest triangle per pixel centre.

    ``xy`` are continuous pixel coordinates (pixel (i, j) has its centre at
    x = j + 0.5, y = i + 0.5) and ``z`` the camera-space depth per vertex.
    Returns ``face_id`` (H, W), -1 where nothing is covered, and the depth.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    fn = _zbuffer_nb if backend() == "numba" else _zbuffer_np
    return fn(xy, z, faces, int(height), int(width), float(near))


@njit
def _raster_uv_nb(uv, size):
    owner = np.full((size, size), -1, dtype=np.int64)
    count = np.zeros((size, size), dtype=np.int64)
    bary = np.zeros((size, size, 3))
    for f in range(uv.shape[0]):
        x0, y0 = uv[f, 0, 0], uv[f, 0, 1]
        x1, y1 = uv[f, 1, 0], uv[f, 1, 1]
        x2, y2 = uv[f, 2, 0], uv[f, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-14:
            continue
        j0 = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        j1 = min(int(np.ceil(max(x0, x1, x2) - 0.5)), size - 1)
        i0 = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        i1 = min(int(np.ceil(max(y0, y1, y2) - 0.5)), size - 1)
        for i in range(i0, i1 + 1):
            py = i + 0.5
            for j in range(j0, j1 + 1):
                px = j + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                count[i, j] += 1
                if owner[i, j] < 0:
                    owner[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2
    return owner, count, bary


def _raster_uv_np(uv, size):
    owner = np.full((size, size), -1, dtype=np.int64)
    count = np.zeros(size * size, dtype=np.int64)
    bary = np.zeros((size, size, 3))
    faces = np.arange(uv.shape[0] * 3).reshape(-1, 3)
    flat = uv.reshape(-1, 2)
    fid, ii, jj = _candidates(flat, faces, size, size)
    w, ok = _bary_np(uv[fid], jj + 0.5, ii + 0.5)
    fid, ii, jj, w = fid[ok], ii[ok], jj[ok], w[ok]
    pix = ii * size + jj
    np.add.at(count, pix, 1)
    order = np.lexsort((fid, pix))
    pix_s = pix[order]
    first = np.ones(pix_s.size, dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    owner.reshape(-1)[pix[win]] = fid[win]
    bary.reshape(-1, 3)[pix[win]] = w[win]
    return owner, count.reshape(size, size), bary


def raster_uv(uv_texels: np.ndarray, size: int):
    """Texel coverage of UV triangles given in texel units, (F, 3, 2).

    Row index follows the second UV coordinate.  Returns the first covering
    triangle per texel (-1 if none), the number of covering triangles, and
    the barycentric weights inside the owner.
    """
    uv = np.ascontiguousarray(uv_texels, dtype=np.float64)
    fn = _raster_uv_nb if backend() == "numba" else _raster_uv_np
    return fn(uv, int(size))
