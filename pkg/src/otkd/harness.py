"""Desk-scale distillation experiment: synthetic box-corner scenes, a frozen
teacher ensemble, and a small student keypoint regressor trained under
combinations of supervised, prediction-level, and feature-level losses.

The scene "image" is a low-dimensional encoding rather than an RGB render:
one Gaussian blob channel per model corner (amplitude falling off with
depth) plus two normalized coordinate channels.  That keeps the keypoint-
regression structure intact while a full five-condition, multi-seed
experiment stays within a few CPU-minutes.

Conditions:
  noKD       supervised only
  uniformOT  + prediction transfer, uniform teacher weights
  UAKD       + prediction transfer, confidence-blended teacher weights
  PFKD       + feature-region transfer (plan from the weighted coupling)
  UAKD+PFKD  both transfer terms
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateConfiguration, PointBehindCamera, TrainingDiverged
from .geometry import (CameraIntrinsics, KeypointSet, Model3D, Pose, add_01d_hit,
                       pose_errors, project)
from .pfkd import init_projection, receptive_field_extent
from .pnp import Correspondences, pnp_solve
from .regressor import RegressorSpec, ToyRegressor
from .sinkhorn import sinkhorn_unbalanced_batch
from .uncertainty import aggregate, blend_weights, teacher_confidence

GRID = 16
IMAGE_SIZE = 64.0
NUM_CORNERS = 8
IN_CHANNELS = NUM_CORNERS + 2
DELTA = GRID / IMAGE_SIZE

CONDITIONS = ("noKD", "uniformOT", "UAKD", "PFKD", "UAKD+PFKD")
# condition -> (prediction transfer on, feature transfer on, blended weights)
_CONDITION_FLAGS = {
    "noKD": (False, False, False),
    "uniformOT": (True, False, False),
    "UAKD": (True, False, True),
    "PFKD": (False, True, True),
    "UAKD+PFKD": (True, True, True),
}

_BOX_DIMS = (0.10, 0.07, 0.05)
_BLOB_SIGMA = 1.2
_BLOB_AMPLITUDE = 0.25

_DT = np.float32


# --------------------------------------------------------------------------
# scenes


def box_model() -> Model3D:
    """The eight corners of the canonical box; diameter is its space diagonal."""
    dx, dy, dz = _BOX_DIMS
    pts = np.array([[sx * dx / 2, sy * dy / 2, sz * dz / 2]
                    for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return Model3D.from_points(pts)


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=220.0, fy=220.0,
                            cx=IMAGE_SIZE / 2, cy=IMAGE_SIZE / 2)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    model: Model3D
    gt_pose: Pose
    cam: CameraIntrinsics
    gt_keypoints: np.ndarray   # (NUM_CORNERS, 2) pixel coordinates
    encoding: np.ndarray       # (IN_CHANNELS, GRID, GRID) float32

    def __post_init__(self):
        reproj = project(self.model, self.gt_pose, self.cam).points
        if not np.allclose(reproj, self.gt_keypoints, atol=1e-6):
            raise ValueError("gt_keypoints do not match the projected model")


def sample_pose(rng: np.random.Generator) -> Pose:
    """Box pose in front of the camera: modest tilt, near-centered, z in
    [0.45, 0.62] m.  Projections stay near the frame; extreme tilts can push
    a corner a few pixels outside, which region extraction clips."""
    ang = rng.uniform(-0.45, 0.45, 3)
    ca, sa = np.cos(ang), np.sin(ang)
    rx = np.array([[1, 0, 0], [0, ca[0], -sa[0]], [0, sa[0], ca[0]]])
    ry = np.array([[ca[1], 0, sa[1]], [0, 1, 0], [-sa[1], 0, ca[1]]])
    rz = np.array([[ca[2], -sa[2], 0], [sa[2], ca[2], 0], [0, 0, 1]])
    t = np.array([rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02),
                  rng.uniform(0.45, 0.62)])
    return Pose(rotation=rz @ ry @ rx, translation=t)


def _encode(kps: np.ndarray, depths: np.ndarray) -> np.ndarray:
    gg = np.arange(GRID) + 0.5
    lin = (np.arange(GRID) + 0.5) / GRID - 0.5
    coord_r, coord_c = np.meshgrid(lin, lin, indexing="ij")
    chans = []
    for k in range(NUM_CORNERS):
        cxg, cyg = kps[k, 0] * DELTA, kps[k, 1] * DELTA
        amp = _BLOB_AMPLITUDE / depths[k]
        chans.append(amp * np.exp(-((gg[None, :] - cxg) ** 2
                                    + (gg[:, None] - cyg) ** 2)
                                  / (2 * _BLOB_SIGMA ** 2)))
    return np.stack(chans + [coord_r, coord_c]).astype(_DT)


def make_scene(rng: np.random.Generator, model: Model3D | None = None,
               cam: CameraIntrinsics | None = None) -> SyntheticScene:
    model = model or box_model()
    cam = cam or default_camera()
    pose = sample_pose(rng)
    kps = project(model, pose, cam).points
    depths = pose.apply(model.points)[:, 2]
    return SyntheticScene(model=model, gt_pose=pose, cam=cam,
                          gt_keypoints=kps, encoding=_encode(kps, depths))


def make_scenes(count: int, rng: np.random.Generator,
                model: Model3D | None = None,
                cam: CameraIntrinsics | None = None) -> list[SyntheticScene]:
    model = model or box_model()
    cam = cam or default_camera()
    return [make_scene(rng, model, cam) for _ in range(count)]


def _stack(scenes: list[SyntheticScene]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.encoding for s in scenes])
    k = np.stack([s.gt_keypoints for s in scenes])
    return x, k


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainingConfig:
    """Knobs for the training objective and the experiment around it.

    The loss is  gamma_kpt*L_kpt + gamma_distill*(gamma_p*L_pred +
    gamma_f*L_feat);  lam blends teacher confidence against existence scores
    (all-ones here).  gamma_p/gamma_f/lam/ensemble_size defaults follow the
    shipped ablation optimum; the remaining fields shape the synthetic task.
    """
    gamma_kpt: float = 1.0
    gamma_distill: float = 1.0
    gamma_p: float = 5.0
    gamma_f: float = 0.1
    lam: float = 0.5
    ensemble_size: int = 4
    learning_rate: float = 3e-3
    epochs: int = 250
    seed: int = 0
    num_keypoints: int = 8        # student outputs; teachers always predict 8
    student_channels: int = 6
    teacher_channels: int = 12
    train_scenes: int = 16
    teacher_scenes: int = 24
    teacher_epochs: int = 150
    eval_scenes: int = 32
    label_noise_px: float = 4.0
    corrupt_noise_px: float = 10.0
    corrupt_keypoints: tuple[int, ...] = (0, 1)
    corrupt_member: int = 0
    uncertainty_scale: float = 8.0
    tau: float = 10.0
    softmax_beta: float = 5.0
    teacher_error_threshold_px: float = 5.0

    def __post_init__(self):
        for name in ("gamma_kpt", "gamma_distill", "gamma_p", "gamma_f",
                     "label_noise_px", "corrupt_noise_px"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        for name in ("epochs", "teacher_epochs", "train_scenes",
                     "teacher_scenes", "eval_scenes", "student_channels",
                     "teacher_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 1 <= self.num_keypoints <= NUM_CORNERS:
            raise ConfigError(f"num_keypoints must be in [1, {NUM_CORNERS}]")
        if not (self.tau > 0 or np.isinf(self.tau)):
            raise ConfigError("tau must be positive or infinite")
        if not self.uncertainty_scale > 0:
            raise ConfigError("uncertainty_scale must be > 0")
        if not self.teacher_error_threshold_px > 0:
            raise ConfigError("teacher_error_threshold_px must be > 0")
        if not self.softmax_beta > 0:
            raise ConfigError("softmax_beta must be > 0")
        if not 0 <= self.corrupt_member < self.ensemble_size:
            raise ConfigError("corrupt_member must index an ensemble member")
        bad = [k for k in self.corrupt_keypoints
               if not 0 <= k < NUM_CORNERS]
        if bad:
            raise ConfigError(f"corrupt_keypoints out of range: {bad}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["corrupt_keypoints"] = list(self.corrupt_keypoints)
        return d


def _student_spec(cfg: TrainingConfig) -> RegressorSpec:
    return RegressorSpec(in_channels=IN_CHANNELS, channels=cfg.student_channels,
                         num_keypoints=cfg.num_keypoints, grid=GRID,
                         image_size=IMAGE_SIZE, softmax_beta=cfg.softmax_beta)


def _teacher_spec(cfg: TrainingConfig) -> RegressorSpec:
    return RegressorSpec(in_channels=IN_CHANNELS, channels=cfg.teacher_channels,
                         num_keypoints=NUM_CORNERS, grid=GRID,
                         image_size=IMAGE_SIZE, softmax_beta=cfg.softmax_beta)


# --------------------------------------------------------------------------
# batched region helpers (hot-path equivalents of pfkd.extract_region)


def _extract_regions(fmaps: np.ndarray, centers: np.ndarray, extent: int):
    """fmaps (B,C,G,G), centers (B,K,2) int (row,col) -> regions (B,K,C,e,e)
    with zero-filled out-of-bounds cells, plus scatter indices."""
    B, C, G, _ = fmaps.shape
    K = centers.shape[1]
    offs = np.arange(extent) - (extent - 1) // 2
    rr = centers[:, :, 0][:, :, None, None] + offs[None, None, :, None]
    cc = centers[:, :, 1][:, :, None, None] + offs[None, None, None, :]
    rr = np.broadcast_to(rr, (B, K, extent, extent))
    cc = np.broadcast_to(cc, (B, K, extent, extent))
    valid = (rr >= 0) & (rr < G) & (cc >= 0) & (cc < G)
    rs = np.clip(rr, 0, G - 1)
    cs = np.clip(cc, 0, G - 1)
    out = fmaps[np.arange(B)[:, None, None, None], :, rs, cs]  # B,K,e,e,C
    out = out * valid[..., None]
    return np.ascontiguousarray(out.transpose(0, 1, 4, 2, 3)), (rs, cs, valid)


def _scatter_region_grads(dfmaps: np.ndarray, dregions: np.ndarray, idx) -> None:
    """Adds region-content gradients (B,K,C,e,e) back into (B,C,G,G) maps."""
    rs, cs, valid = idx
    B, K, C, e, _ = dregions.shape
    masked = (dregions * valid[:, :, None]).transpose(0, 1, 3, 4, 2)
    bidx = np.broadcast_to(np.arange(B)[:, None, None, None], rs.shape)
    np.add.at(dfmaps, (bidx[..., None], np.arange(C)[None, None, None, None, :],
                       rs[..., None], cs[..., None]), masked)


def _region_centers(kps_px: np.ndarray) -> np.ndarray:
    """(B,K,2) pixel keypoints -> (B,K,2) int (row,col) grid centers, clipped
    into the map so border predictions still yield a region."""
    rows = np.clip(np.round(kps_px[:, :, 1] * DELTA), 0, GRID - 1)
    cols = np.clip(np.round(kps_px[:, :, 0] * DELTA), 0, GRID - 1)
    return np.stack([rows, cols], axis=-1).astype(int)


# --------------------------------------------------------------------------
# teacher side


@dataclass
class DistillTargets:
    """Frozen teacher quantities for one batch of scenes."""
    predictions: np.ndarray          # (B, N, 2) ensemble-mean keypoints, px
    col_weights: np.ndarray          # (B, N) blended per-keypoint weights
    uncertainty: np.ndarray          # (B, N) u in [0, 1)
    regions: np.ndarray              # (B, N, C_T, e, e) ensemble-mean regions


def make_teacher_ensemble(cfg: TrainingConfig,
                          seed_list: list[int] | None = None) -> list[ToyRegressor]:
    """Trains `ensemble_size` regressors from independent initializations on a
    shared clean scene set, freezing each afterwards.  Raises
    TrainingDiverged if any member misses cfg.teacher_error_threshold_px on
    held-out scenes."""
    if seed_list is None:
        seed_list = [10_000 + 97 * e + cfg.seed for e in range(cfg.ensemble_size)]
    if len(seed_list) != cfg.ensemble_size:
        raise ConfigError("seed_list length must equal ensemble_size")
    scenes = make_scenes(cfg.teacher_scenes, np.random.default_rng(2024 + cfg.seed))
    held_out = make_scenes(cfg.eval_scenes, np.random.default_rng(2025 + cfg.seed))
    x, kps = _stack(scenes)
    xh, kh = _stack(held_out)
    spec = _teacher_spec(cfg)
    sup = dataclasses.replace(cfg, gamma_distill=0.0, num_keypoints=NUM_CORNERS,
                              epochs=cfg.teacher_epochs)
    teachers = []
    for member_seed in seed_list:
        net = ToyRegressor(spec, np.random.default_rng(member_seed))
        _train(net, x, kps, None, sup, None)
        pred, _ = net.forward(xh)
        err = float(np.linalg.norm(pred - kh, axis=2).mean())
        if err > cfg.teacher_error_threshold_px:
            raise TrainingDiverged(
                f"teacher seed {member_seed}: held-out error {err:.2f}px "
                f"exceeds {cfg.teacher_error_threshold_px}px")
        net.held_out_error_px = err
        teachers.append(net)
    return teachers


def prepare_targets(teachers: list[ToyRegressor], encodings: np.ndarray,
                    cfg: TrainingConfig,
                    corrupt_rng: np.random.Generator | None = None) -> DistillTargets:
    """Runs the frozen ensemble on a scene batch and aggregates predictions,
    blended weights, and mean feature regions.  When `corrupt_rng` is given,
    one member's predictions for the configured keypoint subset get large
    added noise before aggregation (the regions then come from the shifted
    centers too, so the corruption reaches both transfer paths)."""
    preds, feats = [], []
    for net in teachers:
        kps, fmap = net.forward(encodings)
        preds.append(np.asarray(kps, dtype=float))
        feats.append(fmap)
    preds = np.stack(preds)                       # (E, B, N, 2)
    E, B, N, _ = preds.shape
    if corrupt_rng is not None and cfg.corrupt_keypoints:
        idx = np.array(cfg.corrupt_keypoints)
        noise = corrupt_rng.normal(0.0, cfg.corrupt_noise_px,
                                   preds[cfg.corrupt_member][:, idx].shape)
        preds[cfg.corrupt_member][:, idx] += noise

    stats = aggregate(preds.reshape(E, B * N, 2), scale=cfg.uncertainty_scale)
    u = stats.uncertainty.reshape(B, N)
    conf = teacher_confidence(stats.uncertainty)
    weights = blend_weights(conf, np.ones_like(conf), cfg.lam).reshape(B, N)

    extent = receptive_field_extent(teachers[0].head_spec())
    regions = np.zeros((B, N, teachers[0].spec.channels, extent, extent), _DT)
    for member, fmap in enumerate(feats):
        r, _ = _extract_regions(fmap, _region_centers(preds[member]), extent)
        regions += r
    regions /= E
    return DistillTargets(predictions=stats.mean.reshape(B, N, 2),
                          col_weights=weights, uncertainty=u, regions=regions)


# --------------------------------------------------------------------------
# objective


@dataclass
class TotalLossResult:
    loss: float
    parts: dict[str, float]                 # unweighted kpt/pred/feat values
    gradients: list[np.ndarray]             # aligned with student.parameters()
    projection_gradient: np.ndarray | None
    plans: np.ndarray | None                # (B, M, N) detached coupling
    potentials: tuple[np.ndarray, np.ndarray] | None


def total_loss(student: ToyRegressor, encodings: np.ndarray,
               keypoints_px: np.ndarray, targets: DistillTargets | None,
               cfg: TrainingConfig, projection: np.ndarray | None = None,
               plans: np.ndarray | None = None,
               warm_start: tuple[np.ndarray, np.ndarray] | None = None) -> TotalLossResult:
    """One objective evaluation with manual backpropagation.

    L_kpt is mean squared pixel error against `keypoints_px`; the transfer
    terms follow the prediction- and feature-level losses with the coupling
    detached (recomputed here unless `plans` is supplied, never
    differentiated through).  Gradients cover every student parameter plus,
    when the feature term is active, the channel projection.
    """
    kps, fmaps = student.forward(encodings)
    kps64 = np.asarray(kps, dtype=float)
    B, M, _ = kps.shape

    diff = kps64 - keypoints_px
    loss_kpt = float((diff * diff).sum() / (B * M))
    dk = (cfg.gamma_kpt * 2.0 / (B * M)) * diff

    gp = cfg.gamma_distill * cfg.gamma_p
    gf = cfg.gamma_distill * cfg.gamma_f
    use_pred = gp > 0 and targets is not None
    use_feat = gf > 0 and targets is not None
    loss_pred = 0.0
    loss_feat = 0.0
    dfeats = None
    dproj = None
    potentials = None

    if use_pred or use_feat:
        mus = targets.predictions
        N = mus.shape[1]
        disp = kps64[:, :, None, :] - mus[:, None, :, :]     # (B, M, N, 2)
        dist = np.linalg.norm(disp, axis=3)
        if plans is None:
            eps = 0.01 * np.maximum(dist.mean(axis=(1, 2)), 1e-9)
            a = np.full((B, M), 1.0 / M)
            b = targets.col_weights / N
            f0, g0 = warm_start if warm_start is not None else (None, None)
            plans, f, g, _, _ = sinkhorn_unbalanced_batch(
                dist, a, b, eps, cfg.tau, max_iters=200, tol=1e-5, f0=f0, g0=g0)
            potentials = (f, g)
        if use_pred:
            loss_pred = float((plans * dist).sum() / B)
            unit = disp / np.maximum(dist, 1e-12)[..., None]
            dk = dk + gp * (plans[..., None] * unit).sum(axis=2) / B
        if use_feat:
            if projection is None:
                raise ConfigError("feature transfer is active but no channel "
                                  "projection was supplied")
            extent = targets.regions.shape[-1]
            centers = _region_centers(kps64)
            regions, idx = _extract_regions(fmaps, centers, extent)
            adapted = np.einsum("ct,bntij->bncij", projection, targets.regions)
            sq = (adapted[:, None] - regions[:, :, None]) ** 2   # (B,M,N,C,e,e)
            cs = regions.shape[2]
            coef = 1.0 / (N * M * cs * extent * extent)
            loss_feat = float(coef * np.einsum("bmn,bmncij->", plans, sq) / B)
            gcoef = 2.0 * gf * coef / B
            row_mass = plans.sum(axis=2)
            cross = np.einsum("bmn,bncij->bmcij", plans, adapted)
            dregions = gcoef * (row_mass[:, :, None, None, None] * regions - cross)
            dfeats = np.zeros_like(fmaps)
            _scatter_region_grads(dfeats, dregions.astype(_DT), idx)
            col_mass = plans.sum(axis=1)
            cross_t = np.einsum("bmn,bmcij->bncij", plans, regions)
            dadapted = gcoef * (col_mass[:, :, None, None, None] * adapted - cross_t)
            dproj = np.einsum("bncij,bntij->ct", dadapted, targets.regions)

    loss = cfg.gamma_kpt * loss_kpt + gp * loss_pred + gf * loss_feat
    if not np.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss (kpt={loss_kpt!r}, pred={loss_pred!r}, "
            f"feat={loss_feat!r})")
    student.backward(dk, dfeats)
    return TotalLossResult(loss=loss,
                           parts={"kpt": loss_kpt, "pred": loss_pred,
                                  "feat": loss_feat},
                           gradients=student.gradients(),
                           projection_gradient=dproj, plans=plans,
                           potentials=potentials)


def _train(student: ToyRegressor, encodings: np.ndarray, keypoints_px: np.ndarray,
           targets: DistillTargets | None, cfg: TrainingConfig,
           projection: np.ndarray | None):
    """Plain fixed-step gradient descent; returns (initial, final) loss and the
    trained projection.  Raises TrainingDiverged if the final loss does not
    improve on the initial one."""
    warm = None
    initial = None
    for _ in range(cfg.epochs):
        res = total_loss(student, encodings, keypoints_px, targets, cfg,
                         projection=projection, warm_start=warm)
        if initial is None:
            initial = res.loss
        if res.potentials is not None:
            warm = res.potentials
        student.gd_step(cfg.learning_rate)
        if res.projection_gradient is not None:
            projection = projection - (cfg.learning_rate
                                       * res.projection_gradient).astype(projection.dtype)
    final = total_loss(student, encodings, keypoints_px, targets, cfg,
                       projection=projection, warm_start=warm).loss
    if not final < initial:
        raise TrainingDiverged(
            f"loss failed to improve: initial {initial!r}, final {final!r}")
    return initial, final, projection


# --------------------------------------------------------------------------
# experiment


@dataclass(frozen=True)
class ReportRow:
    condition: str
    seed: int
    kpt_err_px: float
    add01d_rate: float
    e_r_deg: float
    e_t_m: float
    epochs: int
    wall_ms: int


@dataclass
class ExperimentReport:
    condition: str
    rows: list[ReportRow]
    uncertainty: dict[int, np.ndarray]    # seed -> mean u per teacher keypoint
    corrupt_keypoints: tuple[int, ...]

    def mean_kpt_err(self) -> float:
        return float(np.mean([r.kpt_err_px for r in self.rows]))

    def corruption_separation(self) -> dict[int, bool]:
        """Per seed: does every corrupted keypoint's u exceed the median u of
        the clean keypoints?"""
        out = {}
        for seed, u in self.uncertainty.items():
            clean = np.delete(u, np.array(self.corrupt_keypoints, dtype=int))
            med = float(np.median(clean))
            out[seed] = bool(all(u[k] > med for k in self.corrupt_keypoints))
        return out


def _condition_config(condition: str, cfg: TrainingConfig) -> TrainingConfig:
    if condition not in _CONDITION_FLAGS:
        raise ConfigError(f"unknown condition {condition!r}")
    use_pred, use_feat, _ = _CONDITION_FLAGS[condition]
    if not (use_pred or use_feat):
        return dataclasses.replace(cfg, gamma_distill=0.0)
    return dataclasses.replace(cfg,
                               gamma_p=cfg.gamma_p if use_pred else 0.0,
                               gamma_f=cfg.gamma_f if use_feat else 0.0)


def _train_one_seed(condition: str, cfg: TrainingConfig, seed: int,
                    teachers: list[ToyRegressor], corrupt_teacher: bool):
    """Returns (student, per-keypoint mean u or None)."""
    eff = _condition_config(condition, cfg)
    _, _, blended = _CONDITION_FLAGS[condition]
    rng = np.random.default_rng(seed)
    scenes = make_scenes(cfg.train_scenes, rng)
    x, kps = _stack(scenes)
    kps = kps[:, :cfg.num_keypoints]
    labels = kps + rng.normal(0.0, cfg.label_noise_px, kps.shape)

    u_mean = None
    targets = None
    projection = None
    if eff.gamma_distill > 0 and (eff.gamma_p > 0 or eff.gamma_f > 0):
        corrupt_rng = np.random.default_rng(seed + 77) if corrupt_teacher else None
        targets = prepare_targets(teachers, x, cfg, corrupt_rng)
        u_mean = targets.uncertainty.mean(axis=0)
        if not blended:
            targets = dataclasses.replace(
                targets, col_weights=np.ones_like(targets.col_weights))
        if eff.gamma_f > 0:
            projection = init_projection(cfg.student_channels,
                                         cfg.teacher_channels).astype(_DT)

    student = ToyRegressor(_student_spec(cfg), np.random.default_rng(seed + 1000))
    _train(student, x, labels, targets, eff, projection)
    return student, u_mean


def evaluate_student(student: ToyRegressor, cfg: TrainingConfig,
                     eval_scenes: list[SyntheticScene]) -> dict[str, float]:
    """Keypoint error, ADD-0.1d hit rate, and median pose errors from solving
    PnP on the student's predictions.  A scene whose solve degenerates counts
    as a miss with worst-case pose error; that keeps evaluation total even for
    badly undertrained students."""
    if cfg.num_keypoints < 6:
        raise ConfigError("pose evaluation needs num_keypoints >= 6")
    x, kps_gt = _stack(eval_scenes)
    kps_gt = kps_gt[:, :cfg.num_keypoints]
    preds, _ = student.forward(x)
    preds = np.asarray(preds, dtype=float)
    kpt_err = float(np.linalg.norm(preds - kps_gt, axis=2).mean())

    hits, e_rs, e_ts = [], [], []
    for b, scene in enumerate(eval_scenes):
        pts3d = scene.model.points[:cfg.num_keypoints]
        try:
            result = pnp_solve(Correspondences(points2d=KeypointSet(preds[b]),
                                               points3d=pts3d, cam=scene.cam))
            e_t, e_r, _ = pose_errors(result.pose, scene.gt_pose)
            hits.append(add_01d_hit(scene.model, result.pose, scene.gt_pose))
            e_rs.append(e_r)
            e_ts.append(e_t)
        except (DegenerateConfiguration, PointBehindCamera):
            hits.append(False)
            e_rs.append(180.0)
            e_ts.append(float("inf"))
    return {"kpt_err_px": kpt_err,
            "add01d_rate": float(np.mean(hits)),
            "e_r_deg": float(np.median(e_rs)),
            "e_t_m": float(np.median(e_ts))}


def run_experiment(condition: str, cfg: TrainingConfig,
                   corrupt_teacher: bool = False,
                   seeds: list[int] | None = None,
                   teachers: list[ToyRegressor] | None = None) -> ExperimentReport:
    """Trains and evaluates one condition over `seeds` (default: [cfg.seed]).

    The teacher ensemble and the evaluation split depend only on cfg.seed, so
    they are shared by every row; pass `teachers` to reuse one ensemble across
    conditions.  Per-row seeds drive student scenes, label noise, student
    initialization, and the corruption draw.
    """
    if condition not in _CONDITION_FLAGS:
        raise ConfigError(f"unknown condition {condition!r}")
    if seeds is None:
        seeds = [cfg.seed]
    if teachers is None:
        teachers = make_teacher_ensemble(cfg)
    eval_scenes = make_scenes(cfg.eval_scenes, np.random.default_rng(2025 + cfg.seed))

    rows = []
    uncertainty = {}
    for seed in seeds:
        start = time.perf_counter()
        student, u_mean = _train_one_seed(condition, cfg, seed, teachers,
                                          corrupt_teacher)
        metrics = evaluate_student(student, cfg, eval_scenes)
        wall_ms = int(round(1000 * (time.perf_counter() - start)))
        rows.append(ReportRow(condition=condition, seed=seed,
                              epochs=cfg.epochs, wall_ms=wall_ms, **metrics))
        if u_mean is not None:
            uncertainty[seed] = u_mean
    return ExperimentReport(condition=condition, rows=rows,
                            uncertainty=uncertainty,
                            corrupt_keypoints=tuple(cfg.corrupt_keypoints)
                            if corrupt_teacher else ())


def run_all_conditions(cfg: TrainingConfig, corrupt_teacher: bool = False,
                       seeds: list[int] | None = None,
                       conditions: tuple[str, ...] = CONDITIONS) -> list[ExperimentReport]:
    """Runs every condition against one shared teacher ensemble."""
    teachers = make_teacher_ensemble(cfg)
    return [run_experiment(c, cfg, corrupt_teacher, seeds, teachers)
            for c in conditions]


# --------------------------------------------------------------------------
# reports

CSV_HEADER = "condition,seed,kpt_err_px,add01d_rate,e_r_deg,e_t_m,epochs,wall_ms"


def write_report_csv(rows: list[ReportRow], path: str | Path) -> None:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(f"{r.condition},{r.seed},{r.kpt_err_px!r},{r.add01d_rate!r},"
                     f"{r.e_r_deg!r},{r.e_t_m!r},{r.epochs},{r.wall_ms}")
    Path(path).write_text("\n".join(lines) + "\n")


def summarize(reports: list[ExperimentReport]) -> dict:
    """Per-condition means and standard deviations of every numeric column."""
    out = {}
    for rep in reports:
        cols = {}
        for name in ("kpt_err_px", "add01d_rate", "e_r_deg", "e_t_m"):
            vals = np.array([getattr(r, name) for r in rep.rows])
            cols[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        out[rep.condition] = cols
    return out


def write_report_json(reports: list[ExperimentReport], cfg: TrainingConfig,
                      seeds: list[int], path: str | Path) -> None:
    payload = {"config": cfg.to_dict(), "seeds": list(seeds),
               "conditions": summarize(reports)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
