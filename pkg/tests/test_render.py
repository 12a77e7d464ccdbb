import math

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from gaussian_atlas.errors import ValidationError
from gaussian_atlas.model import Gaussian, GaussianCloud
from gaussian_atlas.render import (
    COV2D_FLOOR, Camera, covariance_3d, project_gaussian, psnr, render, ring_cameras, save_png, ssim,
)
from gaussian_atlas.synthetic import random_cloud

IDENTITY = (1.0, 0.0, 0.0, 0.0)


def axis_camera(resolution=(64, 64), focal=50.0):
    """At the origin looking down +z (OpenCV axes)."""
    w, h = resolution
    return Camera(np.eye(4), (focal, focal), (w / 2, h / 2), resolution)


def splats(*gs):
    return GaussianCloud(*(np.array([getattr(g, f) for g in gs]) for f in
                           ("position", "albedo", "opacity", "scale", "rotation")))


def test_covariance_examples():
    np.testing.assert_allclose(covariance_3d([1, 1, 1], IDENTITY), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(covariance_3d([2, 1, 1], IDENTITY), np.diag([4, 1, 1]), atol=1e-15)
    quarter = (math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4))
    np.testing.assert_allclose(covariance_3d([2, 1, 1], quarter), np.diag([1, 4, 1]), atol=1e-9)


def test_covariance_is_symmetric_positive_definite(rng):
    q = rng.normal(size=(50, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cov = covariance_3d(rng.uniform(0.01, 2, (50, 3)), q)
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12)
    assert np.linalg.eigvalsh(cov).min() > 0


def test_on_axis_projection_closed_form():
    cam = axis_camera()
    d, s, f = 4.0, 0.1, 50.0
    mean, cov, depth = project_gaussian(Gaussian((0, 0, d), (1, 1, 1), 1.0, (s, s, s), IDENTITY), cam)
    np.testing.assert_allclose(mean, cam.principal_point)
    expected = (f * s / d) ** 2 + COV2D_FLOOR
    np.testing.assert_allclose(np.diag(cov), [expected, expected], rtol=0.01)
    assert depth == d


def test_behind_camera_is_culled():
    assert project_gaussian(Gaussian((0, 0, -2), (1, 1, 1), 1.0, (0.1,) * 3, IDENTITY), axis_camera()) is None


def test_off_frame_is_culled():
    assert project_gaussian(Gaussian((50, 0, 2), (1, 1, 1), 1.0, (0.01,) * 3, IDENTITY), axis_camera()) is None


def test_focal_doubling_doubles_std():
    g = Gaussian((0.1, -0.2, 3.0), (1, 1, 1), 1.0, (0.05, 0.1, 0.02), (0.9, 0.1, 0.3, 0.2))
    g = Gaussian(g.position, g.albedo, g.opacity, g.scale, tuple(np.array(g.rotation) / np.linalg.norm(g.rotation)))
    _, c1, _ = project_gaussian(g, Camera(np.eye(4), (50, 50), (32, 32), (64, 64)))
    _, c2, _ = project_gaussian(g, Camera(np.eye(4), (100, 100), (32, 32), (64, 64)))
    raw1 = c1 - COV2D_FLOOR * np.eye(2)
    raw2 = c2 - COV2D_FLOOR * np.eye(2)
    np.testing.assert_allclose(raw2, 4 * raw1, rtol=1e-6)


def test_empty_cloud_renders_background():
    out = render(GaussianCloud.empty(), axis_camera(), (0.2, 0.4, 0.6))
    assert np.all(out.color == [0.2, 0.4, 0.6]) and np.all(out.alpha == 0)


def test_single_splat_matches_analytic_footprint():
    cam = axis_camera((64, 64))
    g = Gaussian((0, 0, 4), (1, 0, 0), 1.0, (0.5, 0.5, 0.5), IDENTITY)
    mean, cov, _ = project_gaussian(g, cam)
    out = render(splats(g), cam)
    inv = np.linalg.inv(cov)
    cols, rows = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5)
    d = np.stack([cols - mean[0], rows - mean[1]], axis=-1)
    m = np.einsum("...i,ij,...j->...", d, inv, d)
    expected = np.minimum(np.exp(-0.5 * m), 0.99)
    inside = m <= 9.0
    red = out.color[..., 0]
    assert red[32, 32] >= 0.98
    assert np.all(out.color[..., 1:] == 0)
    assert np.all(np.abs(red[inside] - expected[inside]) <= 0.02 * expected[inside])


def test_two_coincident_splats_closed_form():
    cam = axis_camera((32, 32))
    g = Gaussian((0, 0, 5), (0, 1, 0), 0.5, (0.3, 0.3, 0.3), IDENTITY)
    mean, cov, _ = project_gaussian(g, cam)
    out = render(splats(g, g), cam)
    d = np.array([16.5, 16.5]) - mean
    w = 0.5 * math.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
    assert out.alpha[16, 16] == pytest.approx(1 - (1 - w) ** 2, abs=1e-6)


def test_permutation_invariance_is_bit_exact():
    cloud = random_cloud(300, seed=4)
    cam = ring_cameras(cloud.bounds.center, 2.5 * cloud.bounds.radius, 1, resolution=(96, 96))[0]
    perm = np.random.default_rng(0).permutation(300)
    a, b = render(cloud, cam), render(cloud.subset(perm), cam)
    assert a.color.tobytes() == b.color.tobytes()
    assert a.alpha.tobytes() == b.alpha.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    np.testing.assert_array_equal(a.visibility[perm], b.visibility)


def test_permutation_invariance_with_duplicates():
    base = random_cloud(20, seed=5)
    cloud = base.subset(np.r_[np.arange(20), np.arange(20)])
    cam = ring_cameras((0, 0, 0), 2.5, 1, resolution=(64, 64))[0]
    perm = np.random.default_rng(1).permutation(40)
    assert render(cloud, cam).color.tobytes() == render(cloud.subset(perm), cam).color.tobytes()


def test_compositing_conservation():
    cloud = random_cloud(200, seed=6)
    cam = ring_cameras((0, 0, 0), 2.5, 1, resolution=(64, 64))[0]
    black, white = render(cloud, cam, (0, 0, 0)), render(cloud, cam, (1, 1, 1))
    trans = 1 - black.alpha
    np.testing.assert_allclose(white.color - black.color, np.repeat(trans[..., None], 3, -1), atol=1e-6)
    assert black.alpha.min() >= 0 and black.alpha.max() <= 1
    assert black.visibility.min() >= 0
    # every contribution goes through visibility: sum of colour weights equals alpha
    grey = cloud.replace(albedo=np.ones((200, 3)))
    np.testing.assert_allclose(render(grey, cam).color[..., 0], black.alpha, atol=1e-6)


def test_opacity_monotonicity_up_to_termination():
    cloud = random_cloud(150, seed=7)
    cam = ring_cameras((0, 0, 0), 2.5, 1, resolution=(64, 64))[0]
    before = render(cloud, cam).alpha
    for k in (0, 40, 99):
        op = cloud.opacity.copy()
        op[k] = min(1.0, op[k] * 2 + 0.1)
        after = render(cloud.replace(opacity=op), cam).alpha
        # early termination at T < 1e-4 can only cost that much alpha
        assert np.all(after >= before - 1e-4)


def test_opaque_occluder_hides_small_splat():
    cam = axis_camera((64, 64))
    occluder = Gaussian((0, 0, 3), (1, 1, 1), 1.0, (1.0, 1.0, 0.01), IDENTITY)
    hidden = Gaussian((0, 0, 6), (1, 0, 0), 1.0, (0.1, 0.1, 0.1), IDENTITY)
    vis = render(splats(occluder, hidden), cam).visibility
    assert vis[1] < 1e-3 * vis[0]


def test_zero_opacity_has_zero_visibility():
    cloud = random_cloud(30, seed=8)
    op = cloud.opacity.copy()
    op[3] = 0
    cam = ring_cameras((0, 0, 0), 2.5, 1, resolution=(64, 64))[0]
    assert render(cloud.replace(opacity=op), cam).visibility[3] == 0


def test_psnr_and_ssim_trivial_cases():
    a = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert psnr(a, a) == math.inf
    assert ssim(a, a) == pytest.approx(1.0)
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 0.1)) == pytest.approx(20.0)
    with pytest.raises(ValidationError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValidationError):
        ssim(np.zeros((4, 4)), np.zeros((5, 4)))


@pytest.mark.parametrize("seed", range(3))
def test_metrics_match_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(48, 40, 3))
    b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-4)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-3)


def test_camera_validation():
    with pytest.raises(ValidationError):
        Camera(np.eye(4), (0, 10), (0, 0), (4, 4))
    with pytest.raises(ValidationError):
        Camera(np.eye(4), (10, 10), (0, 0), (4, 4), near=2, far=1)


def test_look_at_straight_down_is_valid():
    cam = Camera.look_at((0, 0, 5), (0, 0, 0))
    np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(cam.rotation[2], [0, 0, -1], atol=1e-12)


def test_ring_cameras_look_at_center():
    for cam in ring_cameras((1, 2, 3), 4.0, 8):
        p = cam.rotation @ np.array([1, 2, 3]) + cam.translation
        np.testing.assert_allclose(p[:2], 0, atol=1e-9)
        assert p[2] == pytest.approx(4.0)


def test_save_png(tmp_path):
    from PIL import Image

    save_png(np.full((4, 6, 3), 0.5), tmp_path / "x.png")
    img = np.asarray(Image.open(tmp_path / "x.png"))
    assert img.shape == (4, 6, 3) and img[0, 0, 0] == 188
