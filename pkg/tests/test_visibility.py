import numpy as np
import pytest
import torch

from core.scenegraph import GaussianSet, instantiate
from core.visibility import (
    build_bvh,
    closest_hits,
    fibonacci_hemisphere,
    fibonacci_local,
    hemisphere_directions,
    sky_visibility,
    trace_rays,
    trace_rays_brute_force,
    trace_visibility,
)


def _random_set(n: int = 60, seed: int = 1) -> GaussianSet:
    rng = np.random.default_rng(seed)
    return GaussianSet.create(
        rng.uniform(-1.0, 1.0, size=(n, 3)),
        scales=rng.uniform(0.02, 0.15, size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacities=rng.uniform(0.0, 1.0, size=n),
    )


def _occluder(opacity: float = 0.9) -> GaussianSet:
    """A ground point and a flat disc one unit above it."""
    return GaussianSet.create(
        np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        scales=np.array([[0.05, 0.05, 0.05], [0.3, 0.3, 0.01]]),
        opacities=np.array([0.9, opacity]),
    )


def test_fibonacci_starts_at_pole_and_stays_above():
    local = fibonacci_local(16).numpy()
    assert np.allclose(local[0], [0.0, 0.0, 1.0])
    assert np.all(local[:, 2] > 0)
    assert np.allclose(np.linalg.norm(local, axis=1), 1.0)


@pytest.mark.parametrize("count", [1, 4, 16, 128])
def test_mean_cosine(count):
    assert fibonacci_local(count)[:, 2].mean().item() == pytest.approx((count + 1) / (2 * count))


def test_samples_are_deterministic_and_in_hemisphere():
    normal = np.array([0.3, -0.5, 0.8])
    a = fibonacci_hemisphere(normal, 32)
    b = fibonacci_hemisphere(normal, 32)
    assert np.array_equal(a.directions, b.directions)
    assert np.all(a.directions @ (normal / np.linalg.norm(normal)) > 0)


def test_hemisphere_directions_batch_shape():
    normals = torch.nn.functional.normalize(torch.randn(5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(2)), dim=-1)
    dirs = hemisphere_directions(normals, 8)
    assert dirs.shape == (5, 8, 3)
    assert torch.all(torch.sum(dirs * normals[:, None], -1) > 0)


def test_bvh_matches_brute_force():
    gaussians = _random_set()
    bvh = build_bvh(gaussians, leaf_size=2)
    rng = np.random.default_rng(5)
    origins = rng.uniform(-1.5, 1.5, size=(300, 3))
    dirs = rng.normal(size=(300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert np.array_equal(trace_rays(bvh, origins, dirs, 0.5, chunk=64), trace_rays_brute_force(bvh, origins, dirs, 0.5))


def test_opaque_disc_blocks_upward_ray():
    bvh = build_bvh(_occluder())
    assert trace_visibility(bvh, [0.0, 0.0, 0.001], [0.0, 0.0, 1.0], exclude=0) == 0
    assert trace_visibility(bvh, [0.0, 0.0, 0.001], [1.0, 0.0, 0.0], exclude=0) == 1
    assert trace_visibility(bvh, [0.0, 0.0, 0.001], [0.0, 0.0, -1.0], exclude=0) == 1


def test_transparent_disc_does_not_block():
    bvh = build_bvh(_occluder(opacity=0.3))
    assert trace_visibility(bvh, [0.0, 0.0, 0.001], [0.0, 0.0, 1.0], 0.5, exclude=0) == 1


def test_excluded_primitive_is_skipped():
    bvh = build_bvh(_occluder())
    assert trace_visibility(bvh, [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], exclude=-1) == 0
    assert trace_visibility(bvh, [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], exclude=0) == 1


def test_origin_inside_ellipsoid_is_not_a_hit():
    bvh = build_bvh(_occluder())
    assert trace_visibility(bvh, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], exclude=-1) == 1


def test_closest_hit_distance():
    bvh = build_bvh(_occluder())
    t, prim = closest_hits(bvh, np.array([[0.0, 0.0, 0.5]]), np.array([[0.0, 0.0, 1.0]]))
    assert prim[0] == 1
    assert t[0] == pytest.approx(0.5 - 3 * 0.01)
    t, prim = closest_hits(bvh, np.array([[5.0, 0.0, 0.5]]), np.array([[0.0, 0.0, 1.0]]))
    assert prim[0] == -1 and np.isinf(t[0])


def test_empty_set_is_fully_visible():
    bvh = build_bvh(GaussianSet.empty())
    assert trace_rays(bvh, np.zeros((3, 3)), np.eye(3)).all()


def test_sky_visibility_under_disc():
    gaussians = _occluder()
    bvh = build_bvh(gaussians)
    dirs = hemisphere_directions(gaussians.normals, 16).numpy()
    vis = sky_visibility(bvh, gaussians.means.numpy(), dirs)
    assert vis.shape == (2, 16)
    assert vis[0, 0] == 0.0
    assert vis[1].all()
    assert 0 < vis[0].mean() < 1


def test_shadow_pole_casts_a_shadow(pole_template):
    scene = pole_template.scene
    vsun = scene.background.sun_visibility.numpy()
    assert set(np.unique(vsun)) <= {0.0, 1.0}
    assert 0 < vsun.sum() < vsun.size
    world = instantiate(scene, pole_template.rig.timestamps[0])
    assert len(world) == scene.primitive_count()
