"""Differentiable CPU splatting of Gaussians into color, depth and opacity maps.

Everything is written with torch tensors so reverse-mode gradients reach
Gaussian attributes, ray distances and camera poses.  Rasterization is
sparse: every Gaussian only emits (Gaussian, pixel) pairs inside the
bounding box of its 3-sigma ellipse, pairs are grouped per pixel and
composited front to back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import _raster_kernels, geometry
from .errors import ShapeMismatch
from .gaussians import HybridGaussianSet, covariance

LOW_PASS = 0.3
NEAR_CULL = 1e-6
T_MIN = 1e-4
EXTENT_SIGMA = 3.0
DSSIM_WEIGHT = 0.2


@dataclass
class RenderedView:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha_acc: torch.Tensor  # (H, W)

    def numpy(self) -> "RenderedView":
        return RenderedView(*(x.detach().cpu().numpy() for x in (self.color, self.depth, self.alpha_acc)))


@dataclass
class SplatIntermediate:
    mean2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 2, 2), low-pass floor included
    depth: torch.Tensor  # (N,) camera-frame z
    W: torch.Tensor  # (3, 3) world-to-camera rotation
    J: torch.Tensor  # (N, 2, 3)
    valid: torch.Tensor  # (N,) bool


def _as_tensor(x, dtype=torch.float64):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=dtype)


def project_gaussians(means, cov3d, R, t, intrinsics: geometry.CameraIntrinsics) -> SplatIntermediate:
    """Project 3D means and covariances into the image (``J W Sigma W^T J^T``)."""
    fx, fy, cx, cy = intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy
    Xc = geometry.world_to_camera(means, R, t)
    z = Xc[:, 2]
    valid = z > NEAR_CULL
    zs = torch.where(valid, z, torch.ones_like(z))
    x, y = Xc[:, 0], Xc[:, 1]
    mean2d = torch.stack([fx * x / zs + cx, fy * y / zs + cy], dim=-1)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([fx / zs, zero, -fx * x / zs**2], dim=-1),
            torch.stack([zero, fy / zs, -fy * y / zs**2], dim=-1),
        ],
        dim=-2,
    )
    W = R.transpose(0, 1)
    T = J @ W
    cov2d = T @ cov3d @ T.transpose(-1, -2)
    cov2d = cov2d + LOW_PASS * torch.eye(2, dtype=cov2d.dtype)
    return SplatIntermediate(mean2d=mean2d, cov2d=cov2d, depth=z, W=W, J=J, valid=valid)


def _pixel_pairs(mean2d, cov2d, valid, width, height):
    """Integer (gaussian id, pixel id) pairs covering each 3-sigma bounding box."""
    with torch.no_grad():
        rx = EXTENT_SIGMA * torch.sqrt(cov2d[:, 0, 0])
        ry = EXTENT_SIGMA * torch.sqrt(cov2d[:, 1, 1])
        x0 = torch.ceil(mean2d[:, 0] - rx).clamp(0, width - 1)
        x1 = torch.floor(mean2d[:, 0] + rx).clamp(-1, width - 1)
        y0 = torch.ceil(mean2d[:, 1] - ry).clamp(0, height - 1)
        y1 = torch.floor(mean2d[:, 1] + ry).clamp(-1, height - 1)
        finite = torch.isfinite(mean2d).all(dim=1) & torch.isfinite(rx) & torch.isfinite(ry)
        # boxes entirely off-image collapse to empty through the clamps
        off = (mean2d[:, 0] + rx < 0) | (mean2d[:, 0] - rx > width - 1) | (mean2d[:, 1] + ry < 0) | (mean2d[:, 1] - ry > height - 1)
        w = (x1 - x0 + 1).clamp(min=0)
        h = (y1 - y0 + 1).clamp(min=0)
        ok = valid & finite & ~off
        w = torch.where(ok, w, torch.zeros_like(w)).long()
        h = torch.where(ok, h, torch.zeros_like(h)).long()
        counts = w * h
        gid = torch.repeat_interleave(torch.arange(len(counts)), counts)
        starts = torch.cumsum(counts, 0) - counts
        local = torch.arange(int(counts.sum())) - torch.repeat_interleave(starts, counts)
        col = x0.long()[gid] + local % w[gid]
        row = y0.long()[gid] + torch.div(local, w[gid], rounding_mode="floor")
    return gid, row * width + col, col, row


class _Composite(torch.autograd.Function):
    """Front-to-back compositing with the hand-written reverse pass."""

    @staticmethod
    def forward(ctx, mean2d, conic, opacity, color, depth, offsets, gids, width):
        args = [x.detach().numpy().astype(np.float64) for x in (mean2d, conic, opacity, color, depth)]
        out_c, out_d, out_a, n_used, pair_a, pair_t = _raster_kernels.composite_forward(
            offsets, gids, *args, width, T_MIN
        )
        ctx.saved = (offsets, gids, n_used, pair_a, pair_t, args, width)
        dtype = mean2d.dtype
        return tuple(torch.from_numpy(x).to(dtype) for x in (out_c, out_d, out_a))

    @staticmethod
    def backward(ctx, g_c, g_d, g_a):
        offsets, gids, n_used, pair_a, pair_t, args, width = ctx.saved
        grads = _raster_kernels.composite_backward(
            offsets, gids, n_used, pair_a, pair_t, *args, width,
            g_c.detach().numpy().astype(np.float64),
            g_d.detach().numpy().astype(np.float64),
            g_a.detach().numpy().astype(np.float64),
        )
        dtype = g_c.dtype
        return tuple(torch.from_numpy(g).to(dtype) for g in grads) + (None, None, None)


def _conic(cov2d):
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    return torch.stack([cov2d[:, 1, 1] / det, -(cov2d[:, 0, 1] + cov2d[:, 1, 0]) / det, cov2d[:, 0, 0] / det], dim=1)


def _draw_order(depth, valid):
    """Front-to-back order of the visible Gaussians, ties broken by index."""
    d = depth.detach().numpy()
    idx = np.flatnonzero(valid.numpy())
    return idx[np.argsort(d[idx], kind="stable")]


def rasterize_tensors(
    means,
    log_scale,
    quat,
    color,
    opacity,
    R,
    t,
    intrinsics: geometry.CameraIntrinsics,
    *,
    normalize_depth: bool = False,
    backend: str = "compiled",
) -> RenderedView:
    """Alpha-blend Gaussians into an image; all inputs are torch tensors.

    ``backend="compiled"`` runs the compiled per-pixel loops with an explicit
    reverse pass; ``backend="torch"`` composites with plain tensor ops and
    lets autograd differentiate (slower, kept as a cross-check).
    """
    H, W_img = intrinsics.height, intrinsics.width
    dtype = means.dtype
    if means.shape[0] == 0:
        return RenderedView(
            torch.zeros(H, W_img, 3, dtype=dtype), torch.zeros(H, W_img, dtype=dtype), torch.zeros(H, W_img, dtype=dtype)
        )
    splat = project_gaussians(means, covariance(log_scale, quat), R, t, intrinsics)
    if backend == "torch":
        out_c, out_d, out_a = _composite_torch(splat, color, opacity, W_img, H)
    else:
        with torch.no_grad():
            m2 = splat.mean2d.detach().numpy().astype(np.float64)
            cov = splat.cov2d.detach().numpy().astype(np.float64)
            rx = EXTENT_SIGMA * np.sqrt(cov[:, 0, 0])
            ry = EXTENT_SIGMA * np.sqrt(cov[:, 1, 1])
            valid = splat.valid & torch.from_numpy(np.isfinite(m2).all(axis=1) & np.isfinite(rx) & np.isfinite(ry))
            order = _draw_order(splat.depth, valid)
            offsets, gids = _raster_kernels.build_pixel_lists(m2, rx, ry, order, W_img, H)
        out_c, out_d, out_a = _Composite.apply(
            splat.mean2d, _conic(splat.cov2d), opacity, color, splat.depth, offsets, gids, W_img
        )
    if normalize_depth:
        out_d = torch.where(out_a > 1e-12, out_d / out_a.clamp(min=1e-12), torch.zeros_like(out_d))
    return RenderedView(out_c.reshape(H, W_img, 3), out_d.reshape(H, W_img), out_a.reshape(H, W_img))


def _composite_torch(splat: SplatIntermediate, color, opacity, width, height):
    dtype = color.dtype
    n = color.shape[0]
    out_c = torch.zeros(height * width, 3, dtype=dtype)
    out_d = torch.zeros(height * width, dtype=dtype)
    out_a = torch.zeros(height * width, dtype=dtype)
    gid, pix, col, row = _pixel_pairs(splat.mean2d, splat.cov2d, splat.valid, width, height)
    if len(gid) == 0:
        return out_c, out_d, out_a
    with torch.no_grad():
        order = torch.sort(splat.depth.detach(), stable=True).indices
        rank = torch.empty_like(order)
        rank[order] = torch.arange(n)
        perm = torch.sort(pix * n + rank[gid]).indices
        gid, pix, col, row = gid[perm], pix[perm], col[perm], row[perm]
        hit_pix, seg_len = torch.unique_consecutive(pix, return_counts=True)
        seg_start = torch.cumsum(seg_len, 0) - seg_len
        seg_id = torch.repeat_interleave(torch.arange(len(hit_pix)), seg_len)
        slot = torch.arange(len(pix)) - seg_start[seg_id]
        L = int(seg_len.max())
    conic = _conic(splat.cov2d)
    per_g = torch.cat([splat.mean2d, conic, opacity[:, None]], dim=1).index_select(0, gid)
    dx = col.to(dtype) - per_g[:, 0]
    dy = row.to(dtype) - per_g[:, 1]
    a = per_g[:, 5] * torch.exp(-0.5 * (per_g[:, 2] * dx * dx + per_g[:, 3] * dx * dy + per_g[:, 4] * dy * dy))
    # exclusive transmittance per pixel via a padded log-space prefix sum
    flat = seg_id * (L + 1) + slot
    log_keep = torch.zeros(len(hit_pix) * (L + 1), dtype=dtype).index_add(0, flat + 1, torch.log1p(-a))
    T = torch.exp(torch.cumsum(log_keep.reshape(-1, L + 1), dim=1)).reshape(-1).index_select(0, flat)
    wgt = a * T * (T.detach() >= T_MIN).to(dtype)
    cd = torch.cat([color, splat.depth[:, None]], dim=1).index_select(0, gid)
    out_a = out_a.index_add(0, pix, wgt)
    out_c = out_c.index_add(0, pix, wgt[:, None] * cd[:, :3])
    out_d = out_d.index_add(0, pix, wgt * cd[:, 3])
    return out_c, out_d, out_a


def set_tensors(gset: HybridGaussianSet, dtype=torch.float64, requires_grad: bool = False) -> dict:
    """Leaf tensors for every optimizable quantity of a set."""
    names = ("mu", "z", "log_scale", "quat", "color", "opacity", "ray_origin", "ray_dir")
    out = {k: torch.tensor(getattr(gset, k), dtype=dtype) for k in names}
    if requires_grad:
        for k in ("mu", "z", "log_scale", "quat", "color", "opacity"):
            out[k].requires_grad_(True)
    return out


def means_from_tensors(tens: dict):
    ray_mu = tens["ray_origin"] + tens["z"][:, None] * tens["ray_dir"]
    return torch.cat([tens["mu"], ray_mu], dim=0)


def pose_tensors(pose: geometry.CameraPose, dtype=torch.float64, requires_grad: bool = False):
    q = torch.tensor(pose.quaternion, dtype=dtype, requires_grad=requires_grad)
    t = torch.tensor(pose.t, dtype=dtype, requires_grad=requires_grad)
    return q, t


def rotation_from_quat(q):
    return geometry.quat_to_rotmat(q / q.norm())


def rasterize(gset: HybridGaussianSet, camera: geometry.Camera, *, normalize_depth: bool = False) -> RenderedView:
    """Render a set with a camera; returns numpy images."""
    with torch.no_grad():
        tens = set_tensors(gset)
        R = torch.tensor(camera.pose.R)
        t = torch.tensor(camera.pose.t)
        view = rasterize_tensors(
            means_from_tensors(tens), tens["log_scale"], tens["quat"], tens["color"], tens["opacity"],
            R, t, camera.intrinsics, normalize_depth=normalize_depth,
        )
    return view.numpy()


def backward(
    gset: HybridGaussianSet,
    camera: geometry.Camera,
    grad_color=None,
    grad_depth=None,
    grad_alpha=None,
    *,
    normalize_depth: bool = False,
) -> dict:
    """Gradients of ``<grad_color, C> + <grad_depth, D> + <grad_alpha, A>``.

    Any upstream gradient of a scalar loss with respect to the rendered view
    can be passed in.  Returns numpy arrays keyed by ``mu``, ``z``,
    ``log_scale``, ``quat``, ``color``, ``opacity``, ``means`` (positions of
    all Gaussians, ray-based included), ``pose_quat`` and ``pose_t``.
    The pose is parameterized as an (unnormalized) quaternion plus center.
    """
    tens = set_tensors(gset, requires_grad=True)
    q, t = pose_tensors(camera.pose, requires_grad=True)
    means = means_from_tensors(tens)
    means.retain_grad()
    view = rasterize_tensors(
        means, tens["log_scale"], tens["quat"], tens["color"], tens["opacity"],
        rotation_from_quat(q), t, camera.intrinsics, normalize_depth=normalize_depth,
    )
    loss = torch.zeros((), dtype=torch.float64)
    for up, img in ((grad_color, view.color), (grad_depth, view.depth), (grad_alpha, view.alpha_acc)):
        if up is not None:
            loss = loss + (_as_tensor(up) * img).sum()
    leaves = {k: tens[k] for k in ("mu", "z", "log_scale", "quat", "color", "opacity")}
    leaves.update(means=means, pose_quat=q, pose_t=t)
    if loss.requires_grad:
        loss.backward()
    out = {}
    for k, v in leaves.items():
        g = v.grad
        out[k] = np.zeros(tuple(v.shape)) if g is None else g.detach().numpy().copy()
    return out


# -- image metrics and photometric loss --------------------------------------


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_BLUR_CACHE: dict = {}


def _blur_matrix(n: int, size: int, sigma: float, dtype):
    """Dense (n, n) matrix applying the 1D window with zero padding."""
    key = (n, size, sigma, dtype)
    if key not in _BLUR_CACHE:
        g = _gaussian_window(size, sigma, dtype)
        half = size // 2
        M = torch.zeros(n, n, dtype=dtype)
        for k in range(size):
            off = k - half
            if abs(off) >= n:
                continue
            idx = torch.arange(max(0, -off), min(n, n - off))
            M[idx, idx + off] = g[k]
        _BLUR_CACHE[key] = M
    return _BLUR_CACHE[key]


def ssim(img1, img2, window_size: int = 11, sigma: float = 1.5):
    """Mean SSIM of two HxWxC images in [0, 1] (Gaussian window, zero padding).

    The separable window is applied as two banded matrix products.
    """
    a = _as_tensor(img1)
    b = _as_tensor(img2).to(a.dtype)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[0], a.shape[1]
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    Bh = _blur_matrix(H, window_size, sigma, a.dtype)
    Bw = _blur_matrix(W, window_size, sigma, a.dtype)
    stack = torch.cat([x, y, x * x, y * y, x * y], dim=0)
    blurred = Bh @ stack @ Bw.T
    mu1, mu2, e11, e22, e12 = blurred.chunk(5, dim=0)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    C1, C2 = 0.01**2, 0.03**2
    smap = ((2 * mu1 * mu2 + C1) * (2 * s12 + C2)) / ((mu1 * mu1 + mu2 * mu2 + C1) * (s11 + s22 + C2))
    return smap.mean()


def ssim_conv(img1, img2, window_size: int = 11, sigma: float = 1.5):
    """Reference SSIM via a direct 2D convolution (slow; used for cross-checks)."""
    a = _as_tensor(img1)
    b = _as_tensor(img2).to(a.dtype)
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    C = a.shape[-1]
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    g = _gaussian_window(window_size, sigma, a.dtype)
    win = (g[:, None] * g[None, :]).expand(C, 1, window_size, window_size)
    pad = window_size // 2
    mu1 = F.conv2d(x, win, padding=pad, groups=C)
    mu2 = F.conv2d(y, win, padding=pad, groups=C)
    s11 = F.conv2d(x * x, win, padding=pad, groups=C) - mu1 * mu1
    s22 = F.conv2d(y * y, win, padding=pad, groups=C) - mu2 * mu2
    s12 = F.conv2d(x * y, win, padding=pad, groups=C) - mu1 * mu2
    C1, C2 = 0.01**2, 0.03**2
    smap = ((2 * mu1 * mu2 + C1) * (2 * s12 + C2)) / ((mu1 * mu1 + mu2 * mu2 + C1) * (s11 + s22 + C2))
    return smap.mean()


def photometric_loss(rendered, gt, lam: float = DSSIM_WEIGHT):
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2``; returns a torch scalar."""
    a = _as_tensor(rendered)
    b = _as_tensor(gt).to(a.dtype)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    l1 = (a - b).abs().mean()
    return (1.0 - lam) * l1 + lam * (1.0 - ssim(a, b)) / 2.0


def psnr(img1, img2) -> float:
    """PSNR on [0, 1] images; ``inf`` for identical inputs."""
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)


def bilinear_sample(image, p):
    """Sample an HxW(xC) array at subpixel (u, v) locations; numpy or torch.

    Coordinates outside ``[0, W-1] x [0, H-1]`` are clamped to the border.
    """
    is_t = torch.is_tensor(image)
    H, W = image.shape[0], image.shape[1]
    if is_t:
        p = _as_tensor(p).to(image.dtype)
        u = p[..., 0].clamp(0, W - 1)
        v = p[..., 1].clamp(0, H - 1)
        u0 = torch.floor(u).clamp(max=W - 2 if W > 1 else 0).long()
        v0 = torch.floor(v).clamp(max=H - 2 if H > 1 else 0).long()
    else:
        p = np.asarray(p, dtype=np.float64)
        u = np.clip(p[..., 0], 0, W - 1)
        v = np.clip(p[..., 1], 0, H - 1)
        u0 = np.minimum(np.floor(u), max(W - 2, 0)).astype(np.int64)
        v0 = np.minimum(np.floor(v), max(H - 2, 0)).astype(np.int64)
    u1 = u0 + 1 if W > 1 else u0
    v1 = v0 + 1 if H > 1 else v0
    fu = u - u0
    fv = v - v0
    if image.ndim == 3:
        fu, fv = fu[..., None], fv[..., None]
    return (
        image[v0, u0] * (1 - fu) * (1 - fv)
        + image[v0, u1] * fu * (1 - fv)
        + image[v1, u0] * (1 - fu) * fv
        + image[v1, u1] * fu * fv
    )
