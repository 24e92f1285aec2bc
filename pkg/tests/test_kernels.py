from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distill3d import camera, field, meshing, scenes
from distill3d import kernels
from distill3d.kernels import hashgrid, marching, raster, use_backend

pytestmark = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="needs numba for the comparison")


def both(fn):
    with use_backend("numba"):
        a = fn()
    with use_backend("numpy"):
        b = fn()
    return a, b


def test_env_flag_selects_backend(monkeypatch):
    monkeypatch.setenv("DISTILL3D_KERNELS", "numpy")
    assert kernels.backend() == "numpy"
    monkeypatch.setenv("DISTILL3D_KERNELS", "numba")
    assert kernels.backend() == "numba"
    monkeypatch.setenv("DISTILL3D_KERNELS", "cuda")
    with pytest.raises(ValueError):
        kernels.backend()


def test_use_backend_restores_previous():
    with use_backend("numpy"):
        assert kernels.backend() == "numpy"
        with use_backend("numba"):
            assert kernels.backend() == "numba"
        assert kernels.backend() == "numpy"


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hashgrid_backends_agree(seed):
    f = field.HashGridField(field.FieldConfig(levels=5, base_resolution=4, log2_table_size=9))
    rng = np.random.default_rng(seed)
    table = rng.standard_normal(f.table.shape)
    x = rng.random((200, 3))
    g = rng.standard_normal((200, table.shape[1] * 5))
    a, b = both(lambda: hashgrid.encode(x, table, *f._meta))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    (ta, xa), (tb, xb) = both(lambda: hashgrid.encode_backward(x, table, g, *f._meta))
    np.testing.assert_allclose(ta, tb, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(xa, xb, rtol=1e-10, atol=1e-10)


def test_hashgrid_backward_is_adjoint_of_forward(rng):
    """<encode(table), g> is linear in the table, so its gradient is encode_backward(g)."""
    f = field.HashGridField(field.FieldConfig(levels=3, base_resolution=3, log2_table_size=8))
    table = rng.standard_normal(f.table.shape)
    x = rng.random((50, 3))
    g = rng.standard_normal((50, table.shape[1] * 3))
    gt, _ = hashgrid.encode_backward(x, table, g, *f._meta, need_x=False)
    probe = rng.standard_normal(table.shape)
    lhs = np.sum(hashgrid.encode(x, probe, *f._meta) * g)
    assert lhs == pytest.approx(np.sum(gt * probe), rel=1e-10)


def test_triangle_table_shape():
    assert marching.TRI_TABLE.shape == (256, 30)
    assert marching.TRI_COUNT.max() <= 5
    assert marching.TRI_COUNT[0] == 0 and marching.TRI_COUNT[255] == 0
    single = [1 << c for c in range(8)]
    assert all(marching.TRI_COUNT[c] == 1 for c in single)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_marching_backends_agree(seed):
    grid = np.random.default_rng(seed).standard_normal((7, 6, 5))
    a, b = both(lambda: marching.triangulate(grid, 0.1))
    np.testing.assert_array_equal(a, b)


def test_zbuffer_backends_agree():
    grid = field.density_grid(scenes.oracle_scene(), 32)
    v, f = meshing.marching_cubes(grid, 10.0)
    pose = camera.orbit_pose(camera.CameraConfig(width=48, height=48), 70, 130)
    xy, z = camera.project(pose, v)
    (fa, da), (fb, db) = both(lambda: raster.zbuffer(xy, z, f, 48, 48))
    np.testing.assert_array_equal(fa, fb)
    np.testing.assert_array_equal(da, db)
    assert (fa >= 0).any()


def test_zbuffer_keeps_nearest_triangle():
    xy = np.array([[0, 0], [8, 0], [0, 8], [0, 0], [8, 0], [0, 8]], dtype=float)
    z = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    fid, depth = raster.zbuffer(xy, z, faces, 8, 8)
    assert fid[1, 1] == 1 and depth[1, 1] == pytest.approx(1.0)
    assert fid[7, 7] == -1 and np.isinf(depth[7, 7])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_raster_uv_backends_agree(seed):
    tri = np.random.default_rng(seed).random((20, 3, 2)) * 32
    (oa, ca, ba), (ob, cb, bb) = both(lambda: raster.raster_uv(tri, 32))
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ca, cb)
    np.testing.assert_allclose(ba, bb, atol=1e-12)
