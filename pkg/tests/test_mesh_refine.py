from __future__ import annotations

import numpy as np
import pytest
import torch

from distill3d import camera, field, meshing, scenes
from distill3d.guidance import LoraModule, NoiseBands, sds_gradient
from distill3d.mesh_refine import (
    RefinableMesh,
    Stage3Context,
    Stage3Losses,
    face_normals,
    make_optimizer,
    rasterize,
    refine_gradient,
    render_mesh,
    render_textured_mesh,
    stage3_step,
)
from distill3d.meshing import TexturedMesh

A = np.array([0.2, -0.6, -0.6])
E1 = np.array([-0.5, 1.2, 0.0])
E2 = np.array([0.0, 0.0, 1.2])


def ramp_texture(K):
    c = (np.arange(K) + 0.5) / K
    tex = np.zeros((K, K, 3))
    tex[..., 0] = c[None, :]
    tex[..., 1] = c[:, None]
    return tex


def tilted_quad(K=64):
    st = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    verts = A + st[:, :1] * E1 + st[:, 1:] * E2
    uv = 0.1 + 0.8 * st
    faces = np.array([[0, 1, 3], [0, 3, 2]])
    return TexturedMesh(verts, faces, uv, faces.copy(), ramp_texture(K))


@pytest.fixture(scope="module")
def blob_mesh():
    grid = field.density_grid(scenes.oracle_scene(), 24)
    return meshing.extract_textured_mesh(scenes.oracle_scene(), grid, 10.0, texture_size=256)


def test_perspective_correct_uv_on_tilted_plane():
    mesh = tilted_quad()
    pose = camera.orbit_pose(camera.CameraConfig(width=32, height=32), 90, 0)
    out = render_textured_mesh(mesh, pose, dtype=torch.float64)
    rays = camera.generate_rays(pose, torch.float64)
    O, D = rays.origins.numpy(), rays.directions.numpy()
    hit = out.mask.numpy() > 0
    assert hit.sum() > 100
    M = np.stack([E1, E2], 1)
    checked = 0
    for i, j in zip(*np.nonzero(hit)):
        # O + lam D = A + s E1 + t E2
        sol = np.linalg.solve(np.column_stack([D[i, j], -E1, -E2]), A - O[i, j])
        s, t = sol[1], sol[2]
        if not (0.02 < s < 0.98 and 0.02 < t < 0.98):
            continue
        np.testing.assert_allclose(out.rgb[i, j, :2].numpy(), [0.1 + 0.8 * s, 0.1 + 0.8 * t], atol=1e-9)
        checked += 1
    assert checked > 50


def test_background_white_and_mask_binary(blob_mesh):
    out = render_textured_mesh(blob_mesh, camera.front_pose(camera.CameraConfig(width=48, height=48)))
    bg = out.mask == 0
    assert bg.any() and (~bg).any()
    assert torch.all(out.rgb[bg] == 1.0)
    assert set(torch.unique(out.mask).tolist()) <= {0.0, 1.0}
    assert np.array_equal(out.face_id >= 0, out.mask.numpy() > 0)


def test_visible_normals_face_the_camera(blob_mesh):
    pose = camera.orbit_pose(camera.CameraConfig(width=48, height=48), 75, 120)
    out = render_textured_mesh(blob_mesh, pose, dtype=torch.float64)
    fg = out.mask > 0
    n = out.normal[fg]
    np.testing.assert_allclose(n.norm(dim=-1).numpy(), 1.0, atol=1e-9)
    view = camera.generate_rays(pose, torch.float64).directions[fg]
    assert ((n * view).sum(-1) < 0).float().mean() > 0.95


def test_face_normals_unit():
    v = torch.tensor([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(face_normals(v, torch.tensor([[0, 1, 2]])).numpy(), [[0, 0, 1]])


def test_fresh_refinable_mesh_reproduces_base(blob_mesh):
    m = RefinableMesh(blob_mesh)
    pose = camera.front_pose(camera.CameraConfig(width=64, height=64))
    a = rasterize(m, pose)
    b = render_textured_mesh(blob_mesh, pose)
    assert torch.equal(a.rgb, b.rgb) and torch.equal(a.mask, b.mask)
    e = m.export()
    np.testing.assert_array_equal(e.texture, blob_mesh.texture)
    np.testing.assert_allclose(e.uv, blob_mesh.uv, atol=0)
    np.testing.assert_array_equal(e.vertices, blob_mesh.vertices)


def test_export_clips():
    m = RefinableMesh(tilted_quad())
    with torch.no_grad():
        m.texture.add_(2.0)
        m.uv_mlp[-1].bias.fill_(5.0)
    e = m.export()
    assert e.texture.max() <= 1.0 and e.uv.max() <= 1.0


def test_requires_texture():
    with pytest.raises(ValueError):
        RefinableMesh(TexturedMesh(np.eye(3), np.array([[0, 1, 2]])))


def test_render_gradients_match_finite_differences():
    mesh = tilted_quad(K=8)
    rng = np.random.default_rng(0)
    mesh.texture = rng.random((8, 8, 3))
    m = RefinableMesh(mesh, dtype=torch.float64)
    with torch.no_grad():
        m.uv_mlp[-1].weight.normal_(0, 0.05)
    # off-axis so no pixel centre sits on the shared diagonal
    pose = camera.orbit_pose(camera.CameraConfig(width=16, height=16), 87, 4)
    w = torch.as_tensor(rng.random((16, 16, 3)))

    def f():
        return (rasterize(m, pose).rgb * w).sum()

    f().backward()
    params = [(m.texture, 3), (m.texture, 100), (m.offsets, 1), (m.offsets, 7),
              (m.uv_latent, 2), (m.uv_mlp[-1].weight, 5)]
    h = 1e-6
    for p, i in params:
        with torch.no_grad():
            v = p.view(-1)
            old = float(v[i])
            v[i] = old + h
            up = float(f())
            v[i] = old - h
            dn = float(f())
            v[i] = old
        fd = (up - dn) / (2 * h)
        an = float(p.grad.view(-1)[i])
        assert abs(an - fd) <= 1e-5 * max(1.0, abs(fd)), (p.shape, i, an, fd)


def test_refine_gradient_with_fresh_adapter_is_sds(oracle16, schedule, cam16, rng):
    lora = LoraModule(oracle16, dtype=torch.float64)
    pose = camera.orbit_pose(cam16, 80, 200)
    x = torch.as_tensor(rng.random((16, 16, 3)))
    eps = torch.as_tensor(rng.standard_normal((16, 16, 3)))
    a = refine_gradient(lora, oracle16, x, 120, "p", pose, schedule, eps=eps)
    b = sds_gradient(oracle16, x, 120, "p", schedule, eps=eps, pose=pose)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_normal_schedule_endpoints():
    s = Stage3Losses().normal_schedule(2000)
    assert (s.start_value, s.end_value, s.start_step, s.end_step) == (100.0, 10.0, 0, 2000)


def _ctx(blob_mesh, schedule, backend, res=32, active=None, steps=20):
    cam = camera.CameraConfig(width=res, height=res)
    target = render_textured_mesh(blob_mesh, camera.front_pose(cam))
    kw = {} if active is None else {"active": frozenset(active)}
    return Stage3Context(backend, LoraModule(backend), schedule, target.rgb, target.mask, "p", cam,
                         NoiseBands(), Stage3Losses(), steps, np.random.default_rng(0), **kw)


def test_step_kinds_alternate_and_offset_penalty(blob_mesh, schedule, toy):
    m = RefinableMesh(blob_mesh)
    opt = make_optimizer(m, 1e-3)
    ctx = _ctx(blob_mesh, schedule, toy)
    kinds = [stage3_step(m, opt, k, ctx)["kind"] for k in range(4)]
    assert kinds == ["reference", "novel", "reference", "novel"]
    rec = stage3_step(m, opt, 4, ctx)
    assert rec["offset_penalty"] >= 0 and "reference_loss" in rec


def test_reference_step_at_target_has_zero_image_loss(blob_mesh, schedule, toy):
    m = RefinableMesh(blob_mesh)
    rec = stage3_step(m, make_optimizer(m), 0, _ctx(blob_mesh, schedule, toy))
    assert rec["reference_loss"] == 0.0


def test_reference_steps_reduce_image_loss(blob_mesh, schedule, toy):
    m = RefinableMesh(blob_mesh)
    with torch.no_grad():
        m.texture.mul_(0.7)
    opt = make_optimizer(m, 3e-5, 3e-3)
    ctx = _ctx(blob_mesh, schedule, toy, active={"reference"})
    losses = [stage3_step(m, opt, 2 * k, ctx)["reference_loss"] for k in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_optimizer_puts_texture_in_its_own_group(blob_mesh):
    m = RefinableMesh(blob_mesh)
    geo, tex = make_optimizer(m, 1e-5, 3e-3).param_groups
    assert (geo["lr"], tex["lr"]) == (1e-5, 3e-3)
    assert tex["params"] == [m.texture] and len(geo["params"]) == len(list(m.parameters())) - 1
    assert [g["lr"] for g in make_optimizer(m, 2e-4).param_groups] == [2e-4, 2e-4]
