"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each kernel is warmed up once per backend (numba compiles on first call),
then timed ``--repeat`` times; the best time is reported together with a
check that both backends return the same result.
"""

from __future__ import annotations

import argparse
import time

import numpy as np
import torch

from distill3d import camera, field, meshing, scenes
from distill3d.kernels import HAVE_NUMBA, hashgrid, marching, raster, use_backend


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f":
        fin = np.isfinite(a)
        # scatter-add order differs between backends
        tol = 1e-5 if a.dtype == np.float32 else 1e-9
        return a.shape == b.shape and np.array_equal(fin, np.isfinite(b)) and np.allclose(a[fin], b[fin], rtol=tol, atol=tol)
    return np.array_equal(a, b)


def cases():
    f = field.HashGridField(field.FieldConfig(levels=6, log2_table_size=14))
    table = f.table.detach().numpy()
    rng = np.random.default_rng(0)
    x = rng.random((1 << 16, 3)).astype(np.float32)
    g_out = rng.standard_normal((len(x), table.shape[1] * f.cfg.levels)).astype(np.float32)
    yield "hashgrid.encode (65k pts)", lambda: hashgrid.encode(x, table, *f._meta)
    yield "hashgrid.encode_backward", lambda: hashgrid.encode_backward(x, table, g_out, *f._meta)

    grid = field.density_grid(scenes.oracle_scene(), 64)
    yield "marching.triangulate (64^3)", lambda: marching.triangulate(grid, 10.0)

    verts, faces = meshing.marching_cubes(grid, 10.0)
    pose = camera.front_pose(camera.CameraConfig(width=256, height=256))
    xy, z = camera.project(pose, verts)
    yield "raster.zbuffer (256^2)", lambda: raster.zbuffer(xy, z, faces, 256, 256)

    uv, uv_faces = meshing.unwrap_uv(verts, faces, 1024)
    tri = uv[uv_faces] * 1024
    yield "raster.raster_uv (1024^2)", lambda: raster.raster_uv(tri, 1024)


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    if not HAVE_NUMBA:
        print("numba is not importable; only the numpy path can run")
    print(f"{'kernel':<30} {'numba [s]':>10} {'numpy [s]':>10} {'speedup':>8}  same")
    for name, fn in cases():
        res = {}
        t = {}
        for b in ("numba", "numpy") if HAVE_NUMBA else ("numpy",):
            with use_backend(b):
                t[b] = _best(fn, args.repeat)
                res[b] = fn()
        if HAVE_NUMBA:
            same = _same(res["numba"], res["numpy"])
            print(f"{name:<30} {t['numba']:>10.4f} {t['numpy']:>10.4f} {t['numpy'] / t['numba']:>7.1f}x  {same}")
        else:
            print(f"{name:<30} {'-':>10} {t['numpy']:>10.4f}")


if __name__ == "__main__":
    main()
