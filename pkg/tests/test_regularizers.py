import numpy as np
import pytest
import torch
from conftest import random_batch
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdprior.cameras import CameraPose, look_at
from rgbdprior.regularizers import (
    FrustumSet,
    count_containing_frustums,
    distortion_loss,
    foreground_loss,
    frustum_loss,
    geometric_loss,
    photometric_loss,
)
from rgbdprior.volume_rendering import RaySampleBatch, composite


def _with_weights(t, t_far, w):
    b = RaySampleBatch(t=torch.tensor(np.asarray(t), dtype=torch.float64),
                       t_far=torch.tensor(np.asarray(t_far), dtype=torch.float64), sigma=None, color=None)
    b.weights = torch.tensor(np.asarray(w), dtype=torch.float64)
    return b


def distortion_oracle(t, t_far, w, depth):
    """Plain double loop over interval midpoints."""
    edges = list(t) + [t_far]
    n = len(w)
    total = 0.0
    for i in range(n):
        mi = 0.5 * (edges[i] + edges[i + 1])
        for j in range(n):
            mj = 0.5 * (edges[j] + edges[j + 1])
            total += w[i] * w[j] * abs(mi - mj)
        total += w[i] ** 2 * (edges[i + 1] - edges[i]) / 3.0
    return total / depth


def test_photometric_examples():
    a = torch.rand(8, 8, 3)
    assert photometric_loss(a, a).item() == 0.0
    assert photometric_loss(torch.zeros(4, 4, 3), torch.ones(4, 4, 3)).item() == 1.0
    checker = (torch.arange(8)[:, None] + torch.arange(8)[None, :]) % 2
    checker = checker[..., None].expand(8, 8, 3).double()
    assert photometric_loss(checker, 1 - checker).item() == 1.0
    with pytest.raises(ValueError):
        photometric_loss(torch.zeros(4, 3), torch.zeros(5, 3))


def test_distortion_zero_weights():
    b = _with_weights([[1.0, 2.0, 3.0]], [4.0], [[0.0, 0.0, 0.0]])
    assert distortion_loss(b, torch.tensor([2.0])).item() == 0.0


def test_distortion_single_bin():
    # one unit weight in [2, 2.5]: midpoint 2.25, width 0.5, D = m
    b = _with_weights([[1.0, 2.0, 2.5]], [3.0], [[0.0, 1.0, 0.0]])
    got = distortion_loss(b, torch.tensor([2.25])).item()
    assert got == pytest.approx((1 / 2.25) * (0.5 / 3), rel=1e-14)


def test_distortion_concentrated_below_spread():
    t = np.linspace(1.0, 3.0, 20)
    near = np.zeros(20)
    near[[9, 10]] = 0.5
    far = np.zeros(20)
    far[[1, 18]] = 0.5
    a = distortion_loss(_with_weights([t], [3.1], [near]), torch.tensor([2.0])).item()
    b = distortion_loss(_with_weights([t], [3.1], [far]), torch.tensor([2.0])).item()
    assert a < b
    assert a == pytest.approx(distortion_oracle(t, 3.1, near, 2.0), rel=1e-12)
    assert b == pytest.approx(distortion_oracle(t, 3.1, far, 2.0), rel=1e-12)


@pytest.mark.parametrize("n", [2, 17, 256])
def test_distortion_matches_double_sum(n, rng):
    b = random_batch(rng, 3, n)
    res = composite(b)
    got = distortion_loss(b, res.depth, reduction="none").numpy()
    for r in range(3):
        ref = distortion_oracle(b.t[r].numpy(), b.t_far[r].item(), b.weights[r].numpy(), res.depth[r].item())
        assert abs(got[r] - ref) <= 1e-10


def test_distortion_rejects_nonpositive_depth():
    b = _with_weights([[1.0, 2.0]], [3.0], [[0.5, 0.5]])
    with pytest.raises(ValueError):
        distortion_loss(b, torch.tensor([0.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 30), st.integers(0, 2**31 - 1))
def test_moving_mass_together_never_increases_pairwise_term(n, seed):
    r = np.random.default_rng(seed)
    t = np.sort(r.uniform(1, 5, n))
    t_far = t[-1] + 0.1
    i, j = sorted(r.choice(n, 2, replace=False))
    w = np.zeros(n)
    w[i] = w[j] = 0.4
    w2 = w.copy()
    if j - i >= 2:
        # shift the far mass one bin closer
        w2[j], w2[j - 1] = 0.0, 0.4
    p1 = distortion_oracle(t, t_far, w, 1.0) - sum(w[k] ** 2 * ((list(t) + [t_far])[k + 1] - t[k]) / 3
                                                   for k in range(n))
    p2 = distortion_oracle(t, t_far, w2, 1.0) - sum(w2[k] ** 2 * ((list(t) + [t_far])[k + 1] - t[k]) / 3
                                                    for k in range(n))
    assert p2 <= p1 + 1e-12


def test_foreground_examples():
    for total, expected in [(1.0, 0.0), (0.0, 1.0), (0.75, 0.0625)]:
        b = _with_weights([[1.0, 2.0]], [3.0], [[total / 2, total / 2]])
        assert foreground_loss(b).item() == pytest.approx(expected, abs=1e-15)


def test_foreground_minimized_at_full_absorption():
    vals = [foreground_loss(_with_weights([[1.0]], [2.0], [[s]])).item() for s in np.linspace(0, 1, 21)]
    assert np.argmin(vals) == 20 and vals[-1] == 0.0


def _ring(n=4, radius=1.0):
    return [CameraPose(50.0, 50.0, 32.0, 32.0, 64, 64, look_at([radius * np.cos(a), 0.0, radius * np.sin(a)],
                                                                [0.0, 0.0, 0.0]))
            for a in np.linspace(0, 2 * np.pi, n, endpoint=False)]


def _brute_count(x, cams, near, far):
    count = 0
    for c in cams:
        p = np.linalg.inv(c.c2w) @ np.append(x, 1.0)
        z = -p[2]
        if not near <= z <= far:
            continue
        u = c.fx * p[0] / z + c.cx
        v = -c.fy * p[1] / z + c.cy
        count += 0 <= u <= c.width and 0 <= v <= c.height
    return count


def test_frustum_count_examples():
    cams = _ring()
    fs = FrustumSet(cams, 0.1, 3.0)
    # on camera 0's axis at mid-depth but beyond the others' extent: choose a point in front of cam 0 only
    c0 = cams[0]
    p = c0.center + (-c0.rotation[:, 2]) * 0.3
    assert count_containing_frustums(p[None], fs)[0] == _brute_count(p, cams, 0.1, 3.0)
    solo = FrustumSet([c0], 0.1, 3.0)
    assert solo.count((c0.center - c0.rotation[:, 2] * 1.5)[None])[0] == 1
    behind = c0.center + c0.rotation[:, 2] * 2.0
    assert solo.count(behind[None])[0] == 0


def test_frustum_count_matches_brute_force(rng):
    cams = _ring(5)
    fs = FrustumSet(cams, 0.2, 2.5)
    pts = rng.uniform(-1.5, 1.5, (400, 3))
    got = fs.count(pts)
    ref = [_brute_count(p, cams, 0.2, 2.5) for p in pts]
    np.testing.assert_array_equal(got, ref)


def test_frustum_face_points_inside():
    cam = CameraPose(10.0, 10.0, 5.0, 5.0, 10, 10, np.eye(4))
    fs = FrustumSet([cam], 1.0, 2.0)
    # corner of the image plane at depth exactly near: u = 0, v = 0
    x = np.array([-0.5, 0.5, -1.0])
    assert fs.count(x[None])[0] == 1


def test_frustum_set_rejects_duplicates():
    cam = _ring(1)[0]
    with pytest.raises(ValueError):
        FrustumSet([cam, cam], 0.1, 1.0)


def test_frustum_loss_cases(rng):
    cams = _ring(4)
    fs = FrustumSet(cams, 0.1, 3.0)
    b = random_batch(rng, 5, 16)
    composite(b)
    counts = fs.count(b.points.numpy())
    ref = (b.weights.numpy() * (counts <= 1)).sum(-1).mean()
    assert frustum_loss(b, fs).item() == pytest.approx(ref, rel=1e-14)
    # everything seen by all four cameras: the scene center
    b.points = torch.zeros_like(b.points)
    assert frustum_loss(b, fs).item() == 0.0
    # nothing visible
    b.points = torch.full_like(b.points, 50.0)
    assert frustum_loss(b, fs, reduction="none").numpy() == pytest.approx(b.weights.sum(-1).numpy())


def test_geometric_loss_linearity():
    photo, fg, fr, dist = 0.3, 0.2, 0.1, 0.05
    assert geometric_loss(photo, fg, fr, dist) == photo
    a = geometric_loss(photo, fg, fr, dist, 0.1, 0.2, 0.5)
    b = geometric_loss(photo, fg, fr, dist, 0.1, 0.2, 1.0)
    assert b - a == pytest.approx(0.5 * dist, abs=1e-15)
    with pytest.raises(ValueError):
        geometric_loss(photo, lambda_fg=-1.0)


def test_regularizer_gradients_match_finite_differences(rng):
    fs = FrustumSet(_ring(4), 0.1, 3.0)
    for _ in range(5):
        b = random_batch(rng, 3, 10, requires_grad=True)
        target = torch.tensor(rng.uniform(0, 1, (3, 3)))
        # the distortion normalizer is held fixed, as in training
        depth = composite(b).depth.detach()

        def losses(sigma, color):
            bb = RaySampleBatch(t=b.t, t_far=b.t_far, sigma=sigma, color=color, points=b.points)
            res = composite(bb)
            return (photometric_loss(res.color, target), distortion_loss(bb, depth), foreground_loss(bb),
                    frustum_loss(bb, fs))

        assert torch.autograd.gradcheck(lambda s, c: losses(s, c), (b.sigma, b.color), eps=1e-6, atol=1e-9,
                                        rtol=1e-5)
