"""CPU splat rasterizer with front-to-back alpha compositing, plus PSNR / SSIM.

Camera convention is OpenCV: +x right, +y down, +z forward. Pixel (row, col)
is sampled at image coordinates (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .model import Gaussian, GaussianCloud

COV2D_FLOOR = 0.3
MAX_WEIGHT = 0.99
MIN_TRANSMITTANCE = 1e-4
BAND_ROWS = 16


@dataclass(frozen=True, eq=False)
class Camera:
    world_to_camera: np.ndarray  # 4x4 rigid transform
    focal: tuple[float, float]
    principal_point: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        pose = np.array(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        pose.setflags(write=False)
        object.__setattr__(self, "world_to_camera", pose)
        if min(self.focal) <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValidationError("need 0 < near < far")
        if min(self.resolution) < 1:
            raise ValidationError("resolution must be at least 1x1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg: float = 60.0,
                resolution: tuple[int, int] = (256, 256), near: float = 0.01, far: float = 1000.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(forward, up / np.linalg.norm(up))) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        pose = np.eye(4)
        pose[:3, :3] = rot
        pose[:3, 3] = -rot @ eye
        w, h = resolution
        f = 0.5 * w / math.tan(math.radians(fov_deg) / 2.0)
        return cls(pose, (f, f), (w / 2.0, h / 2.0), (w, h), near, far)


def ring_cameras(center, radius: float, views: int = 8, elevation_deg: float = 20.0,
                 fov_deg: float = 60.0, resolution: tuple[int, int] = (256, 256)) -> list[Camera]:
    """``views`` cameras evenly spaced in azimuth on a circle at fixed elevation, looking at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    el = math.radians(elevation_deg)
    cams = []
    for k in range(views):
        az = 2.0 * math.pi * k / views
        eye = center + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, center, fov_deg=fov_deg, resolution=resolution))
    return cams


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit (w, x, y, z) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def covariance_3d(scale, rotation) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for scale (..., 3) and quaternion (..., 4)."""
    rot = quaternion_to_matrix(rotation)
    m = rot * np.asarray(scale, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), floor included
    depth: np.ndarray  # (N,)
    radius: np.ndarray  # (N,) 3-sigma footprint in pixels
    visible: np.ndarray  # (N,) bool, survives culling
    degenerate: np.ndarray  # (N,) bool, non-invertible after the floor


def project_cloud(cloud: GaussianCloud, cam: Camera) -> Projection:
    n = len(cloud)
    pos = cloud.positions.astype(np.float64)
    rot = cam.rotation
    p = pos @ rot.T + cam.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    in_depth = (z > cam.near) & (z < cam.far)
    zs = np.where(in_depth, z, 1.0)
    mean2d = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / (zs * zs)
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / (zs * zs)
    m = jac @ rot
    cov3 = covariance_3d(cloud.scale, cloud.rotation)
    cov2 = m @ cov3 @ np.swapaxes(m, 1, 2)
    cov2[:, 0, 0] += COV2D_FLOOR
    cov2[:, 1, 1] += COV2D_FLOOR
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    degenerate = in_depth & ~(np.isfinite(det) & (det > 0))
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    w, h = cam.resolution
    on_frame = (
        (mean2d[:, 0] + radius > 0.5) & (mean2d[:, 0] - radius < w - 0.5)
        & (mean2d[:, 1] + radius > 0.5) & (mean2d[:, 1] - radius < h - 0.5)
    )
    visible = in_depth & ~degenerate & on_frame
    return Projection(mean2d, cov2, z, radius, visible, degenerate)


def project_gaussian(g: Gaussian, cam: Camera):
    """(mean2d, cov2d, depth) of one Gaussian, or None when culled."""
    cloud = GaussianCloud(
        [g.position], [g.albedo], [g.opacity], [g.scale], [g.rotation], activation="raw"
    )
    pr = project_cloud(cloud, cam)
    if not pr.visible[0]:
        return None
    return pr.mean2d[0], pr.cov2d[0], float(pr.depth[0])


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), alpha-weighted
    visibility: np.ndarray  # (N,) summed blend weight per Gaussian
    skipped: int = 0  # degenerate projections


@njit(parallel=True, cache=True)
def _composite(order, mean2d, conic, opacity, rgb, depth, x0, x1, y0, y1, width, height, band):
    n_bands = (height + band - 1) // band
    color = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    dep = np.zeros((height, width))
    vis = np.zeros((n_bands, opacity.shape[0]))
    for b in prange(n_bands):
        r0 = b * band
        r1 = min(height, r0 + band)
        for k in range(order.shape[0]):
            g = order[k]
            lo = max(y0[g], r0)
            hi = min(y1[g] + 1, r1)
            if lo >= hi:
                continue
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            ca = conic[g, 0]
            cb = conic[g, 1]
            cc = conic[g, 2]
            o = opacity[g]
            acc = 0.0
            for r in range(lo, hi):
                dy = r + 0.5 - my
                for c in range(x0[g], x1[g] + 1):
                    t = trans[r, c]
                    if t < MIN_TRANSMITTANCE:
                        continue
                    dx = c + 0.5 - mx
                    w = o * math.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))
                    if w > MAX_WEIGHT:
                        w = MAX_WEIGHT
                    contrib = w * t
                    color[r, c, 0] += rgb[g, 0] * contrib
                    color[r, c, 1] += rgb[g, 1] * contrib
                    color[r, c, 2] += rgb[g, 2] * contrib
                    dep[r, c] += depth[g] * contrib
                    acc += contrib
                    trans[r, c] = t * (1.0 - w)
            vis[b, g] += acc
    return color, trans, dep, vis


def _sort_order(cloud: GaussianCloud, depth: np.ndarray, visible: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(visible)
    rec = cloud.records()[idx]
    # depth first, then attribute content, so the order is permutation invariant
    keys = [idx] + [rec[:, k] for k in range(rec.shape[1] - 1, -1, -1)] + [depth[idx]]
    return idx[np.lexsort(keys)]


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    w, h = cam.resolution
    bg = np.asarray(background, dtype=np.float64)
    n = len(cloud)
    if n == 0:
        return RenderOutput(np.broadcast_to(bg, (h, w, 3)).copy(), np.zeros((h, w)), np.zeros((h, w)), np.zeros(0))
    pr = project_cloud(cloud, cam)
    a, b, c = pr.cov2d[:, 0, 0], pr.cov2d[:, 0, 1], pr.cov2d[:, 1, 1]
    det = np.where(pr.visible, a * c - b * b, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mx, my, rad = pr.mean2d[:, 0], pr.mean2d[:, 1], pr.radius
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(mx - rad - 0.5), 0, w - 1)
        x1 = np.clip(np.floor(mx + rad - 0.5), 0, w - 1)
        y0 = np.clip(np.ceil(my - rad - 0.5), 0, h - 1)
        y1 = np.clip(np.floor(my + rad - 0.5), 0, h - 1)
    vis_mask = pr.visible
    conv = lambda v: np.where(vis_mask, v, 0).astype(np.int64)
    order = _sort_order(cloud, pr.depth, vis_mask)
    color, trans, dep, vis = _composite(
        order, pr.mean2d, conic, cloud.opacity.astype(np.float64), cloud.albedo.astype(np.float64),
        pr.depth, conv(x0), conv(x1), conv(y0), conv(y1), w, h, BAND_ROWS,
    )
    color += trans[..., None] * bg
    return RenderOutput(color, 1.0 - trans, dep, vis.sum(axis=0), int(pr.degenerate.sum()))


# ---------------------------------------------------------------- metrics


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; +inf when identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Colour images (H, W, C) are averaged over channels; the border of half a
    window is excluded from the mean.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., k], b[..., k], data_range) for k in range(a.shape[2])]))
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    filt = lambda x: gaussian_filter(x, sigma=1.5, truncate=3.5, mode="reflect")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = 5
    return float(s[pad:-pad, pad:-pad].mean()) if min(s.shape) > 2 * pad else float(s.mean())


def to_srgb8(linear: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    s = np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1 / 2.4) - 0.055)
    return np.round(s * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_srgb8(image)).save(path)
