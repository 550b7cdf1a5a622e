"""Joint optimization of Gaussians and camera poses, and test-time pose refinement.

Training samples one view per iteration (round robin) and minimizes

    L_photo + l_gp * L_gp + l_rg * L_rg + l_depth * L_depth

with the weights switching at ``phase1_iters``.  The graph refiner joins
for the last ``refiner_iters`` iterations.
"""
from __future__ import annotations

import dataclasses
import io as _io
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry, graph_refine, matching, renderer
from .errors import ConfigError, DivergenceError, NoValidPixels
from .flow_depth import FlowField, estimate_depth
from .gaussians import LOG_SCALE_MAX, LOG_SCALE_MIN, OPACITY_MAX, HybridGaussianSet, init_hybrid

LOG_COLUMNS = ("iter", "L_photo", "L_gp", "L_rg", "L_depth", "total", "psnr_train")


@dataclass
class TrainConfig:
    total_iters: int = 5000
    phase1_iters: int = 2000
    lambda_gp: float = 1.0
    lambda_rg: float = 0.3
    lambda_depth: float = 0.1
    lambda_gp_phase1: float = 1.0
    lambda_rg_phase1: float = 0.0
    lambda_depth_phase1: float = 0.0
    dssim_weight: float = 0.2
    z_lr_start: float = 0.1
    z_lr_end: float = 1.6e-6
    refiner_iters: int = 200
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_refiner: float = 1e-3
    pose_lr_rot: float = 1e-4
    pose_lr_trans: float = 1e-4
    test_pose_iters: int = 500
    test_pose_lr_rot: float = 2e-3
    test_pose_lr_trans: float = 2e-3
    test_pose_lr_decay: float = 0.01
    test_pose_init: str = "import"
    graph_k: int = 8
    graph_radius: float | None = None
    refiner_lambdas: tuple = graph_refine.LAMBDAS
    refiner_hidden: int = 64
    alpha_init: float = 0.1
    depth_alpha_min: float = 0.5
    recompute_flow_depth: bool = False
    use_hybrid: bool = True
    use_graph: bool = True
    checkpoint_every: int = 1000
    seed: int = 42

    def __post_init__(self):
        self.refiner_lambdas = tuple(float(x) for x in self.refiner_lambdas)
        lams = (self.lambda_gp, self.lambda_rg, self.lambda_depth, self.lambda_gp_phase1, self.lambda_rg_phase1, self.lambda_depth_phase1)
        if any(not (x >= 0) for x in lams):
            raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.phase1_iters < self.total_iters:
            raise ConfigError("phase1_iters must lie in [0, total_iters)")
        if not (self.z_lr_start > 0 and self.z_lr_end > 0 and self.lr_position_final > 0):
            raise ConfigError("decay endpoints must be positive")
        if not 0 <= self.refiner_iters <= self.total_iters:
            raise ConfigError("refiner_iters must lie in [0, total_iters]")
        if self.test_pose_init not in ("import", "nearest"):
            raise ConfigError("test_pose_init must be 'import' or 'nearest'")
        if len(self.refiner_lambdas) != 5:
            raise ConfigError("refiner_lambdas needs five entries")

    @property
    def refiner_start(self) -> int:
        return self.total_iters - self.refiner_iters

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["refiner_lambdas"] = list(self.refiner_lambdas)
        return d


ABLATIONS = {
    "hybrid": {"use_hybrid": False},
    "graph": {"use_graph": False},
    "depth": {"lambda_depth": 0.0, "lambda_depth_phase1": 0.0},
}


def ablated(config: TrainConfig, name: str) -> TrainConfig:
    """``config`` with one component switched off; see ``ABLATIONS``."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}")
    return dataclasses.replace(config, **ABLATIONS[name])


def loss_weights(iteration: int, config: TrainConfig) -> tuple[float, float, float]:
    """``(l_gp, l_rg, l_depth)`` in effect at ``iteration``."""
    if iteration < config.phase1_iters:
        return config.lambda_gp_phase1, config.lambda_rg_phase1, config.lambda_depth_phase1
    return config.lambda_gp, config.lambda_rg, config.lambda_depth


def exp_decay(start: float, end: float, iteration: int, total: int) -> float:
    """Log-linear interpolation with exact endpoints."""
    if iteration <= 0:
        return start
    if iteration >= total:
        return end
    return float(np.exp(np.log(start) + (np.log(end) - np.log(start)) * iteration / total))


def z_learning_rate(iteration: int, config: TrainConfig) -> float:
    return exp_decay(config.z_lr_start, config.z_lr_end, iteration, config.total_iters)


def total_loss(components: dict, weights) -> torch.Tensor:
    """Weighted sum of the photometric, position, rendering-geometry and depth terms."""
    l_gp, l_rg, l_depth = weights
    total = components["L_photo"] + l_gp * components["L_gp"]
    if l_rg:
        total = total + l_rg * components["L_rg"]
    if l_depth:
        total = total + l_depth * components["L_depth"]
    return total


def _logit(a):
    a = np.clip(np.asarray(a, dtype=np.float64) / OPACITY_MAX, 1e-12, 1 - 1e-12)
    return np.log(a) - np.log1p(-a)


def unit_camera_dirs(pixels, intrinsics_per_row):
    """Unit camera-frame directions through ``pixels``."""
    out = np.empty((len(pixels), 3))
    for k, (p, K) in enumerate(zip(pixels, intrinsics_per_row)):
        x = np.array([(p[0] - K.cx) / K.fx, (p[1] - K.cy) / K.fy, 1.0])
        out[k] = x / np.linalg.norm(x)
    return out


class SceneState:
    """Torch leaves for every optimizable quantity plus the frozen structure."""

    def __init__(self, gset: HybridGaussianSet, cameras: dict, pose_views):
        self.template = gset.copy()
        self.cameras = dict(cameras)
        self.pose_views = [int(v) for v in pose_views]
        self.pose_index = {v: k for k, v in enumerate(self.pose_views)}
        self.mu = torch.tensor(gset.mu, requires_grad=True)
        self.z = torch.tensor(gset.z, requires_grad=True)
        self.log_scale = torch.tensor(gset.log_scale, requires_grad=True)
        self.quat = torch.tensor(gset.quat, requires_grad=True)
        self.color = torch.tensor(gset.color, requires_grad=True)
        self.opacity_logit = torch.tensor(_logit(gset.opacity), requires_grad=True)
        self.pose_q = torch.tensor(np.array([cameras[v].pose.quaternion for v in self.pose_views]).reshape(-1, 4), requires_grad=True)
        self.pose_t = torch.tensor(np.array([cameras[v].pose.t for v in self.pose_views]).reshape(-1, 3), requires_grad=True)
        bound = [self.pose_index.get(int(v), -1) for v in gset.ray_view]
        if any(b < 0 for b in bound):
            raise ConfigError("every ray-based Gaussian must be anchored in an optimized view")
        self.ray_pose = torch.as_tensor(np.asarray(bound, dtype=np.int64))
        self.ray_dir_cam = torch.tensor(unit_camera_dirs(gset.ray_pixel, [cameras[int(v)].intrinsics for v in gset.ray_view]).reshape(-1, 3))
        self.refiner: graph_refine.Refiner | None = None
        self.graph: graph_refine.GaussianGraph | None = None
        self.refiner_lambdas = graph_refine.LAMBDAS

    # -- derived quantities --------------------------------------------------

    def rotations(self):
        q = self.pose_q / self.pose_q.norm(dim=1, keepdim=True)
        return geometry.quat_to_rotmat(q)

    def camera_tensors(self, rotations=None) -> dict:
        Rs = self.rotations() if rotations is None else rotations
        return {v: matching.CameraTensors(Rs[k], self.pose_t[k], self.cameras[v].intrinsics) for v, k in self.pose_index.items()}

    def ray_means(self, rotations=None):
        Rs = self.rotations() if rotations is None else rotations
        if len(self.ray_pose) == 0:
            return torch.zeros(0, 3, dtype=torch.float64)
        d = torch.einsum("nij,nj->ni", Rs[self.ray_pose], self.ray_dir_cam)
        return self.pose_t[self.ray_pose] + self.z[:, None] * d

    def opacity(self):
        return OPACITY_MAX * torch.sigmoid(self.opacity_logit)

    def attributes(self, rotations=None) -> dict:
        """Effective per-Gaussian attributes, refiner offsets included when active."""
        z = self.z
        log_scale, quat, color, alpha = self.log_scale, self.quat, self.color, self.opacity()
        if self.refiner is not None:
            feats = self._features(z, log_scale, quat, color, alpha).detach()
            off = self.refiner(feats, self.graph.positions, self.graph.edges)
            d = graph_refine.offset_tensors(off, self.refiner_lambdas)
            no = self.template.n_ordinary
            t = self.template
            span = t.z_far - t.z_near
            z = torch.clamp(z + d["z"][no:], t.z_near + 1e-9 * span, t.z_far - 1e-9 * span)
            log_scale = torch.clamp(log_scale + d["s"], LOG_SCALE_MIN, LOG_SCALE_MAX)
            quat = quat + d["r"]
            color = torch.clamp(color + d["c"], 0.0, 1.0)
            alpha = torch.clamp(alpha + d["alpha"], 0.0, OPACITY_MAX)
        Rs = self.rotations() if rotations is None else rotations
        ray_mu = self.ray_means(Rs) if z is self.z else self._ray_means_with(z, Rs)
        return {
            "means": torch.cat([self.mu, ray_mu], dim=0),
            "ray_means": ray_mu,
            "log_scale": log_scale,
            "quat": quat,
            "color": color,
            "opacity": alpha,
        }

    def _ray_means_with(self, z, Rs):
        d = torch.einsum("nij,nj->ni", Rs[self.ray_pose], self.ray_dir_cam)
        return self.pose_t[self.ray_pose] + z[:, None] * d

    def _features(self, z, log_scale, quat, color, alpha):
        pos = torch.cat([self.mu, self.ray_means()], dim=0).detach()
        centroid = pos.mean(dim=0)
        dist = torch.cat([(self.mu - centroid).norm(dim=1), z])
        q = quat / quat.norm(dim=1, keepdim=True)
        q = torch.where(q[:, :1] < 0, -q, q)
        return torch.cat([dist[:, None], log_scale, q, color, alpha[:, None]], dim=1)

    def render(self, view: int, attrs=None, rotations=None, camera=None):
        Rs = self.rotations() if rotations is None else rotations
        attrs = self.attributes(Rs) if attrs is None else attrs
        if camera is not None:
            R, t, K = camera
        else:
            k = self.pose_index[view]
            R, t, K = Rs[k], self.pose_t[k], self.cameras[view].intrinsics
        return renderer.rasterize_tensors(attrs["means"], attrs["log_scale"], attrs["quat"], attrs["color"], attrs["opacity"], R, t, K)

    # -- refiner -------------------------------------------------------------

    def activate_refiner(self, K: int, radius, lambdas, hidden: int, seed: int) -> None:
        with torch.no_grad():
            pos = torch.cat([self.mu, self.ray_means()], dim=0).numpy()
        self.graph = graph_refine.build_knn_graph(pos, K, radius)
        self.refiner = graph_refine.Refiner(hidden=hidden, seed=seed)
        self.refiner_lambdas = tuple(lambdas)

    # -- export --------------------------------------------------------------

    def current_cameras(self) -> dict:
        out = dict(self.cameras)
        with torch.no_grad():
            q = (self.pose_q / self.pose_q.norm(dim=1, keepdim=True)).numpy()
            t = self.pose_t.numpy()
        for v, k in self.pose_index.items():
            out[v] = self.cameras[v].with_pose(geometry.CameraPose.from_quaternion(q[k], t[k]))
        return out

    def to_gset(self) -> HybridGaussianSet:
        """Numpy snapshot with refiner offsets baked in."""
        with torch.no_grad():
            a = self.attributes()
            out = self.template.copy()
            cams = self.current_cameras()
            out.mu = self.mu.numpy().copy()
            out.rebind_rays(cams)
            ray_mu = a["ray_means"].numpy()
            out.z = ((ray_mu - out.ray_origin) * out.ray_dir).sum(axis=1) if out.n_ray else out.z
            out.log_scale = a["log_scale"].numpy().copy()
            out.quat = a["quat"].numpy().copy()
            out.color = a["color"].numpy().copy()
            out.opacity = a["opacity"].numpy().copy()
        return out.enforce_invariants()

    def project_constraints(self) -> None:
        """Renormalize quaternions and clamp the bounded attributes after a step."""
        t = self.template
        span = t.z_far - t.z_near
        with torch.no_grad():
            self.quat /= self.quat.norm(dim=1, keepdim=True)
            self.pose_q /= self.pose_q.norm(dim=1, keepdim=True)
            self.log_scale.clamp_(LOG_SCALE_MIN, LOG_SCALE_MAX)
            self.color.clamp_(0.0, 1.0)
            self.z.clamp_(t.z_near + 1e-9 * span, t.z_far - 1e-9 * span)

    def snapshot(self) -> dict:
        names = ("mu", "z", "log_scale", "quat", "color", "opacity_logit", "pose_q", "pose_t")
        return {k: getattr(self, k).detach().clone() for k in names}


@dataclass
class TrainResult:
    gset: HybridGaussianSet
    cameras: dict
    log: list = field(default_factory=list)
    refiner_params: np.ndarray | None = None
    flow_depths: dict = field(default_factory=dict)

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows) -> str:
    buf = _io.StringIO()
    buf.write(",".join(LOG_COLUMNS) + "\n")
    for r in rows:
        buf.write(str(int(r["iter"])) + "," + ",".join(f"{float(r[c]):.10e}" for c in LOG_COLUMNS[1:]) + "\n")
    return buf.getvalue()


def flow_depth_targets(views, cameras, flows) -> dict:
    """Blended flow depth per view from every available flow raster out of it."""
    out = {}
    for v in views:
        partners = {j: FlowField(i, j, data) for (i, j), data in flows.items() if i == v and j in cameras}
        if partners:
            out[v] = estimate_depth(v, cameras, partners).depth
    return out


def initial_set(bundle, config: TrainConfig) -> HybridGaussianSet:
    """Hybrid initialization; with the hybrid switch off, only the imported points, all ordinary.

    The matches still feed the rendering-geometry loss in that case; the
    switch changes the representation and nothing else.
    """
    train_cams = {v: bundle.cameras[v] for v in bundle.train_views}
    matches = bundle.matches if config.use_hybrid else bundle.matches.select(np.zeros(len(bundle.matches), bool))
    return init_hybrid(bundle.points, bundle.colors, matches, train_cams, bundle.images, seed=config.seed, alpha_init=config.alpha_init)


def _param_groups(state: SceneState, config: TrainConfig, diameter: float):
    return [
        {"params": [state.mu], "lr": config.lr_position * diameter, "name": "mu"},
        {"params": [state.z], "lr": config.z_lr_start, "name": "z"},
        {"params": [state.color], "lr": config.lr_color, "name": "color"},
        {"params": [state.opacity_logit], "lr": config.lr_opacity, "name": "opacity"},
        {"params": [state.log_scale], "lr": config.lr_scale, "name": "scale"},
        {"params": [state.quat], "lr": config.lr_rotation, "name": "rotation"},
        {"params": [state.pose_q], "lr": config.pose_lr_rot, "name": "pose_q"},
        {"params": [state.pose_t], "lr": config.pose_lr_trans * diameter, "name": "pose_t"},
    ]


def scene_diameter(points) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) if len(pts) else 1.0


def loss_components(state: SceneState, view: int, image, matches, depth_target, config: TrainConfig, weights):
    """Render ``view`` and evaluate every loss term sourced in it."""
    Rs = state.rotations()
    attrs = state.attributes(Rs)
    out = state.render(view, attrs, Rs)
    cams = state.camera_tensors(Rs)
    comp = {"L_photo": renderer.photometric_loss(out.color, image, config.dssim_weight)}
    if len(state.template.pairs):
        comp["L_gp"] = matching.gaussian_position_terms(attrs["ray_means"], state.template, cams).mean()
    else:
        comp["L_gp"] = torch.zeros((), dtype=torch.float64)
    _, l_rg, l_depth = weights
    with torch.set_grad_enabled(torch.is_grad_enabled() and l_rg > 0):
        comp["L_rg"] = _rg_loss(out.depth, view, matches, cams)
    with torch.set_grad_enabled(torch.is_grad_enabled() and l_depth > 0):
        comp["L_depth"] = torch.zeros((), dtype=torch.float64)
        if depth_target is not None:
            try:
                comp["L_depth"] = depth_loss_tensor(depth_target, out.depth, out.alpha_acc, config.depth_alpha_min)
            except NoValidPixels:
                pass
    return comp, out


def depth_loss_tensor(target, depth, alpha_acc, alpha_min):
    from .flow_depth import depth_loss

    return depth_loss(target, depth, alpha_acc, alpha_min)


def _rg_loss(depth_map, view, matches, cams):
    errs = []
    for src_v, src_p, tgt_v, tgt_p in (
        (matches.view_i, matches.p_i, matches.view_j, matches.p_j),
        (matches.view_j, matches.p_j, matches.view_i, matches.p_i),
    ):
        sel = np.flatnonzero((src_v == view) & np.isin(tgt_v, list(cams)))
        if len(sel):
            e, _ = matching.rendering_geometry_terms(depth_map, src_p[sel], tgt_v[sel], tgt_p[sel], cams[view], cams)
            errs.append(e)
    errs = [e for e in errs if len(e)]
    if not errs:
        return torch.zeros((), dtype=torch.float64)
    return torch.cat(errs).mean()


def train(bundle, config: TrainConfig | None = None, *, checkpoint_path=None, log_path=None, init_set=None, progress=None) -> TrainResult:
    """Jointly optimize Gaussians and training poses on a bundle.

    ``bundle`` needs ``cameras``, ``images``, ``points``, ``colors``,
    ``matches``, ``flows`` and ``train_views``.  Returns the trained set
    with refiner offsets baked in, the refined cameras and the loss log.
    """
    config = config or TrainConfig()
    torch.manual_seed(config.seed)
    views = [int(v) for v in bundle.train_views]
    matches = bundle.matches
    gset = init_set.copy() if init_set is not None else initial_set(bundle, config)
    state = SceneState(gset, {v: bundle.cameras[v] for v in views}, views)
    diameter = scene_diameter(bundle.points)
    opt = torch.optim.Adam(_param_groups(state, config, diameter), eps=1e-15)
    images = {v: torch.as_tensor(np.asarray(bundle.images[v], dtype=np.float64)) for v in views}
    targets = flow_depth_targets(views, state.cameras, bundle.flows)
    held_out = {v: bundle.cameras[v] for v in getattr(bundle, "test_views", []) if v in bundle.cameras}
    rows = []
    last_good = state.snapshot()

    for it in range(config.total_iters):
        if config.use_graph and config.refiner_iters > 0 and it == config.refiner_start:
            state.activate_refiner(config.graph_k, config.graph_radius, config.refiner_lambdas, config.refiner_hidden, config.seed)
            opt.add_param_group({"params": list(state.refiner.parameters()), "lr": config.lr_refiner, "name": "refiner"})
        if config.recompute_flow_depth and it > 0 and it % max(1, config.checkpoint_every) == 0:
            targets = flow_depth_targets(views, state.current_cameras(), bundle.flows)
        for g in opt.param_groups:
            if g["name"] == "z":
                g["lr"] = z_learning_rate(it, config)
            elif g["name"] == "mu":
                frozen = state.refiner is not None
                g["lr"] = 0.0 if frozen else exp_decay(config.lr_position, config.lr_position_final, it, config.total_iters) * diameter
        view = views[it % len(views)]
        weights = loss_weights(it, config)
        opt.zero_grad(set_to_none=True)
        comp, out = loss_components(state, view, images[view], matches, targets.get(view), config, weights)
        total = total_loss(comp, weights)
        if not torch.isfinite(total):
            ckpt = None
            if checkpoint_path is not None:
                ckpt = _restore_and_save(state, last_good, checkpoint_path, held_out)
            raise DivergenceError(f"non-finite loss at iteration {it}", checkpoint=ckpt)
        total.backward()
        opt.step()
        state.project_constraints()
        last_good = state.snapshot()
        rows.append(
            {
                "iter": it,
                "L_photo": float(comp["L_photo"].detach()),
                "L_gp": float(comp["L_gp"].detach()),
                "L_rg": float(comp["L_rg"].detach()),
                "L_depth": float(comp["L_depth"].detach()),
                "total": float(total.detach()),
                "psnr_train": min(renderer.psnr(out.color.detach().numpy(), images[view].numpy()), 999.0),
            }
        )
        if progress is not None:
            progress(rows[-1])
        if checkpoint_path is not None and config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            _save(state, checkpoint_path, held_out)
    result = TrainResult(
        gset=state.to_gset(),
        cameras=state.current_cameras(),
        log=rows,
        refiner_params=state.refiner.flat_parameters() if state.refiner is not None else None,
        flow_depths=targets,
    )
    if checkpoint_path is not None:
        _save(state, checkpoint_path, held_out)
    if log_path is not None:
        from .harness.io import atomic_write_text

        atomic_write_text(log_path, result.log_csv())
    return result


def _save(state: SceneState, path, extra_cameras=None) -> None:
    from .harness.io import write_checkpoint

    params = state.refiner.flat_parameters() if state.refiner is not None else None
    cams = state.current_cameras()
    splits = {v: 0 for v in cams}
    for v, c in (extra_cameras or {}).items():
        cams.setdefault(v, c)
        splits.setdefault(v, 1)
    write_checkpoint(path, state.to_gset(), params, cams, splits)


def _restore_and_save(state: SceneState, snap: dict, path, extra_cameras=None):
    with torch.no_grad():
        for k, v in snap.items():
            getattr(state, k).copy_(v)
    _save(state, path, extra_cameras)
    return path


# -- test-time pose refinement -------------------------------------------------


def refine_test_pose(gset: HybridGaussianSet, image, init_camera: geometry.Camera, config: TrainConfig | None = None, *, iters=None) -> geometry.Camera:
    """Photometric-only pose optimization of one camera against a frozen set."""
    config = config or TrainConfig()
    iters = config.test_pose_iters if iters is None else iters
    diameter = scene_diameter(gset.positions()) if gset.n_total > 1 else 1.0
    with torch.no_grad():
        tens = renderer.set_tensors(gset)
        means = renderer.means_from_tensors(tens)
    q = torch.tensor(init_camera.pose.quaternion, requires_grad=True)
    t = torch.tensor(init_camera.pose.t, requires_grad=True)
    lr_q = config.test_pose_lr_rot
    lr_t = config.test_pose_lr_trans * diameter
    opt = torch.optim.Adam([{"params": [q], "lr": lr_q}, {"params": [t], "lr": lr_t}], eps=1e-15)
    target = torch.as_tensor(np.asarray(image, dtype=np.float64))
    for it in range(iters):
        f = exp_decay(1.0, config.test_pose_lr_decay, it, iters)
        opt.param_groups[0]["lr"] = lr_q * f
        opt.param_groups[1]["lr"] = lr_t * f
        opt.zero_grad(set_to_none=True)
        out = renderer.rasterize_tensors(
            means, tens["log_scale"], tens["quat"], tens["color"], tens["opacity"], renderer.rotation_from_quat(q), t, init_camera.intrinsics
        )
        loss = renderer.photometric_loss(out.color, target, config.dssim_weight)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite pose loss at iteration {it}")
        loss.backward()
        opt.step()
        with torch.no_grad():
            q /= q.norm()
    qn = q.detach().numpy()
    return init_camera.with_pose(geometry.CameraPose.from_quaternion(qn / np.linalg.norm(qn), t.detach().numpy()))


def nearest_training_camera(camera: geometry.Camera, train_cameras: dict) -> geometry.Camera:
    best = min(train_cameras.values(), key=lambda c: (np.linalg.norm(c.pose.t - camera.pose.t), c.id))
    return camera.with_pose(best.pose)


def rotation_error_deg(cam_a: geometry.Camera, cam_b: geometry.Camera) -> float:
    return math.degrees(geometry.rotation_angle(cam_a.pose.R, cam_b.pose.R))
