import numpy as np
import pytest
import torch
from conftest import random_batch
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdprior.cameras import CameraPose, look_at
from rgbdprior.fields import EncodingConfig, RadianceField
from rgbdprior.volume_rendering import (
    Ray,
    RaySampleBatch,
    composite,
    render_patch,
    render_rays,
    sample_ray,
    stratified_samples,
)


def _batch(t, t_far, sigma, color):
    return RaySampleBatch(t=torch.tensor(t, dtype=torch.float64), t_far=torch.tensor(t_far, dtype=torch.float64),
                          sigma=torch.tensor(sigma, dtype=torch.float64), color=torch.tensor(color, dtype=torch.float64))


def test_bin_centers_without_jitter():
    ray = Ray(torch.zeros(3, dtype=torch.float64), torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64), 1.0, 2.0)
    np.testing.assert_allclose(sample_ray(ray, 4).numpy(), [1.125, 1.375, 1.625, 1.875], atol=1e-15)


def test_jittered_samples_reproducible():
    ray = Ray(torch.zeros(3), torch.tensor([1.0, 0.0, 0.0]), 0.5, 3.0)
    a = sample_ray(ray, 32, jitter=True, seed=7)
    b = sample_ray(ray, 32, jitter=True, seed=7)
    c = sample_ray(ray, 32, jitter=True, seed=8)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sampling_rejects_fewer_than_two():
    with pytest.raises(ValueError):
        stratified_samples(1.0, 2.0, 1)


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(torch.zeros(3), torch.tensor([1.0, 1.0, 0.0]), 1.0, 2.0)
    with pytest.raises(ValueError):
        Ray(torch.zeros(3), torch.tensor([1.0, 0.0, 0.0]), 2.0, 1.0)


def test_samples_inside_bounds_sweep(rng):
    near = rng.uniform(0.01, 2.0, 1000)
    far = near + rng.uniform(0.01, 5.0, 1000)
    t = stratified_samples(torch.tensor(near), torch.tensor(far), 16, jitter=True,
                           generator=torch.Generator().manual_seed(0), dtype=torch.float64).numpy()
    assert np.all(t >= near[:, None]) and np.all(t <= far[:, None])
    assert np.all(np.diff(t, axis=-1) > 0)


def test_transparent_ray_shows_background():
    res = composite(_batch([[1.0, 2.0, 3.0]], [4.0], [[0.0, 0.0, 0.0]], np.random.rand(1, 3, 3)), (0.2, 0.4, 0.6))
    np.testing.assert_allclose(res.color.numpy(), [[0.2, 0.4, 0.6]])
    assert res.weight_sum.item() == 0.0
    assert res.depth.item() == 4.0


def test_two_half_opaque_samples():
    # rho = 0.5 on both intervals of width 1
    s = np.log(2.0)
    c1, c2 = [0.9, 0.1, 0.0], [0.0, 0.3, 0.8]
    res = composite(_batch([[1.0, 2.0]], [3.0], [[s, s]], [[c1, c2]]))
    np.testing.assert_allclose(res.samples.weights.numpy(), [[0.5, 0.25]], atol=1e-15)
    expected = 0.5 * np.array(c1) + 0.25 * np.array(c2) + 0.25
    np.testing.assert_allclose(res.color.numpy()[0], expected, atol=1e-15)
    np.testing.assert_allclose(res.depth.item(), (0.5 * 1.0 + 0.25 * 2.0) / 0.75, atol=1e-15)


def test_opaque_limit():
    res = composite(_batch([[1.5, 2.5]], [3.5], [[20.0, 0.0]], [[[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]]]))
    np.testing.assert_allclose(res.samples.weights[0, 0].item(), 1.0, atol=1e-8)
    np.testing.assert_allclose(res.color.numpy()[0], [0.1, 0.2, 0.3], atol=1e-8)
    np.testing.assert_allclose(res.depth.item(), 1.5, atol=1e-8)


def test_last_interval_closes_at_far():
    b = _batch([[1.0, 2.0]], [5.0], [[0.0, 1.0]], np.zeros((1, 2, 3)))
    np.testing.assert_allclose(b.deltas.numpy(), [[1.0, 3.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_batch_invariants(n, seed):
    b = random_batch(np.random.default_rng(seed), 4, n)
    # strict rho < 1 only holds while exp(-sigma * delta) is representable
    b.sigma = torch.minimum(b.sigma, 30.0 / b.deltas)
    res = composite(b)
    a, tr, w = b.alpha.numpy(), b.transmittance.numpy(), b.weights.numpy()
    assert np.all(a >= 0) and np.all(a < 1)
    assert np.all(tr > 0) and np.all(tr <= 1) and np.all(tr[:, 0] == 1)
    assert np.all(np.diff(tr, axis=-1) <= 0)
    np.testing.assert_allclose(w, tr * a, rtol=1e-15)
    assert np.all(w.sum(-1) <= 1 + 1e-12)
    # convex combination of sample colors and background
    c = res.color.numpy()
    assert np.all(c >= -1e-12) and np.all(c <= 1 + 1e-12)
    ws = res.weight_sum.numpy()
    ok = ws > 1e-6
    t = b.t.numpy()
    assert np.all(res.depth.numpy()[ok] >= t[ok, 0] - 1e-12)
    assert np.all(res.depth.numpy()[ok] <= t[ok, -1] + 1e-12)


def test_compositing_gradients_match_finite_differences(rng):
    b = random_batch(rng, 3, 12, requires_grad=True)
    target = torch.tensor(rng.uniform(0, 1, (3, 3)))

    def loss(sigma, color):
        bb = RaySampleBatch(t=b.t, t_far=b.t_far, sigma=sigma, color=color)
        return (composite(bb).color * target).sum()

    ok = torch.autograd.gradcheck(loss, (b.sigma, b.color), eps=1e-6, atol=1e-8, rtol=1e-5)
    assert ok


def _tiny_field(dtype=torch.float64):
    torch.manual_seed(0)
    return RadianceField(config=EncodingConfig(n_levels=2, base_resolution=4, hidden_width=16), dtype=dtype)


def test_transparent_field_patch_encodes_far_plane():
    field = _tiny_field()
    with torch.no_grad():
        field.density_net[-1].bias[0] = -60.0
    cam = CameraPose(20.0, 20.0, 8.0, 8.0, 16, 16, look_at([0, 0, 0.5], [0, 0, -1]))
    patch, res = render_patch(field, cam, 0, 0, 8, 16, 0.1, 2.0, scale=1.0)
    np.testing.assert_allclose(patch[..., :3].detach().numpy(), 1.0, atol=1e-12)
    np.testing.assert_allclose(patch[..., 3].detach().numpy(), 2.0 / 3.0 - 1.0, atol=1e-12)


def test_patch_equals_independent_pixel_renders():
    field = _tiny_field()
    cam = CameraPose(20.0, 20.0, 8.0, 8.0, 16, 16, look_at([0, 0, 0.5], [0, 0, -1]))
    patch, _ = render_patch(field, cam, 3, 5, 4, 24, 0.1, 2.0, scale=1.0)
    for r in range(4):
        for c in range(4):
            o, d = cam.pixel_rays(np.array([3 + r]), np.array([5 + c]), dtype=torch.float64)
            res = render_rays(field, o, d, 0.1, 2.0, 24)
            assert torch.equal(patch[r, c, :3], 2 * res.color[0] - 1)
            assert torch.equal(patch[r, c, 3], 2.0 / (1.0 + res.depth[0]) - 1.0)


def test_degenerate_camera_rejected():
    field = _tiny_field()
    cam = CameraPose(0.0, 20.0, 8.0, 8.0, 16, 16, np.eye(4))
    with pytest.raises(ValueError, match="degenerate"):
        render_patch(field, cam, 0, 0, 4, 8, 0.1, 2.0, scale=1.0)


def test_refinement_stability_on_smooth_field():
    class Smooth(torch.nn.Module):
        background = torch.ones(3, dtype=torch.float64)

        def forward(self, x, d):
            sigma = 2.0 * torch.exp(-((x - torch.tensor([0.0, 0.0, -1.0], dtype=x.dtype)) ** 2).sum(-1) / 0.1)
            rgb = 0.5 + 0.4 * torch.sin(3 * x)
            return sigma, rgb

    rng = np.random.default_rng(0)
    d = rng.normal(size=(64, 3)) * 0.2 + np.array([0, 0, -1.0])
    d = torch.tensor(d / np.linalg.norm(d, axis=-1, keepdims=True))
    o = torch.zeros(64, 3, dtype=torch.float64)
    c1 = render_rays(Smooth(), o, d, 0.1, 3.0, 128).color
    c2 = render_rays(Smooth(), o, d, 0.1, 3.0, 256).color
    assert (c1 - c2).abs().max().item() < 1e-2
