"""Desk-scale detection testbed.

Synthetic scenes with disjoint ground-truth boxes, per-position feature
vectors derived from local geometry plus modality noise, a noise-calibrated
teacher oracle standing in for the accurate-modality detector, and a
trainable linear student.  Training minimizes the combined hard-label and
distillation objective with Adam; every operation is a pure function of its
inputs and explicit seeds.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import (
    AnchorGrid,
    Assignment,
    decode_deltas,
    encode_deltas,
    positive_target_deltas,
)
from .cld import (
    LogitMap,
    classical_logit_distill,
    classical_logit_distill_grad,
    cld_grad,
    cld_loss,
    unified_distribution,
)
from .geometry import Box3D, GeometryFlags, bev_iou
from .xgd import (
    COMPONENT_NAMES,
    gate_decisions,
    gate_keep_rates,
    positive_component_update,
    xgd_loss,
    xgd_loss_grad,
)

# Stream tags mixed into SeedSequence entropy; they keep scene sampling,
# teacher noise, parameter init, and batch shuffling independent.
_STREAM_SCENE = 101
_STREAM_TEACHER = 202
_STREAM_INIT = 303
_STREAM_SHUFFLE = 404

BACKGROUND_LOGIT = -4.0
PEAK_LOGIT = 3.5


class SceneTooDenseError(RuntimeError):
    """Raised when rejection sampling cannot place the requested objects."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class NoiseProfile:
    """Modality error model: positional / size / heading noise, a chance of
    reporting the wrong class, and depth error that grows with distance."""

    center_sigma: float = 0.0
    size_sigma: float = 0.0
    yaw_sigma: float = 0.0
    score_corruption: float = 0.0
    depth_bias: float = 0.0

    def __post_init__(self) -> None:
        for name in ("center_sigma", "size_sigma", "yaw_sigma", "score_corruption", "depth_bias"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.score_corruption > 1:
            raise ValueError("score_corruption is a probability")


@dataclass(frozen=True)
class SceneConfig:
    n_objects: tuple[int, int] = (6, 11)
    # sampling weights per class id; empty means uniform.  The default
    # mirrors street scenes where car-sized objects dominate.
    class_weights: tuple[float, ...] = (0.45, 0.3, 0.25)
    yaw_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    size_scale_range: tuple[float, float] = (0.9, 1.15)
    cy_range: tuple[float, float] = (0.9, 1.1)
    border_margin: float = 2.5
    min_gap: float = 0.5
    feature_dim: int = 16
    feature_dilation: float = 0.9
    ambient_noise: float = 0.02
    student_noise: NoiseProfile = NoiseProfile(
        center_sigma=0.06,
        size_sigma=0.04,
        yaw_sigma=0.05,
        score_corruption=0.08,
        depth_bias=0.002,
    )
    max_rejects: int = 10_000


@dataclass(frozen=True)
class Scene:
    """Ground truth plus the (noisy) per-position features the student sees."""

    gts: tuple[tuple[Box3D, int], ...]
    features: np.ndarray  # (n_positions, feature_dim)
    seed: int

    def __post_init__(self) -> None:
        self.features.setflags(write=False)

    def gt_boxes(self) -> list[Box3D]:
        return [b for b, _ in self.gts]


def generate_scene(rng_seed: int, config: SceneConfig, grid: AnchorGrid) -> Scene:
    """Sample a scene with pairwise-disjoint footprints, fully seeded.

    Object footprints keep ``min_gap`` meters of BEV clearance, so no two
    ground truths ever overlap.  Features encode the nearest visible
    object's geometry as estimated through the student modality's noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence((rng_seed, _STREAM_SCENE)))
    lo, hi = config.n_objects
    if lo < 0 or hi < lo:
        raise ValueError(f"bad n_objects range {config.n_objects}")
    n_target = int(rng.integers(lo, hi + 1))
    x_lo = grid.origin[0] + config.border_margin
    x_hi = grid.origin[0] + grid.nx * grid.cell[0] - config.border_margin
    z_lo = grid.origin[1] + config.border_margin
    z_hi = grid.origin[1] + grid.nz * grid.cell[1] - config.border_margin

    class_sizes = _template_sizes(grid)
    gts: list[tuple[Box3D, int]] = []
    attempts = 0
    while len(gts) < n_target:
        attempts += 1
        if attempts > config.max_rejects:
            raise SceneTooDenseError(
                f"failed to place object {len(gts) + 1}/{n_target} after {config.max_rejects} attempts"
            )
        if config.class_weights:
            weights = np.asarray(config.class_weights, dtype=float)
            if weights.size != grid.k_c or np.any(weights < 0) or weights.sum() <= 0:
                raise ValueError(f"class_weights must be {grid.k_c} non-negative values")
            class_id = int(rng.choice(grid.k_c, p=weights / weights.sum()))
        else:
            class_id = int(rng.integers(0, grid.k_c))
        base_l, base_w, base_h = class_sizes[class_id]
        sl, sw, sh = rng.uniform(*config.size_scale_range, size=3)
        box = Box3D(
            cx=float(rng.uniform(x_lo, x_hi)),
            cy=float(rng.uniform(*config.cy_range)),
            cz=float(rng.uniform(z_lo, z_hi)),
            l=base_l * sl,
            w=base_w * sw,
            h=base_h * sh,
            yaw=float(rng.uniform(*config.yaw_range)),
        )
        grown = replace(box, l=box.l + config.min_gap, w=box.w + config.min_gap)
        if all(bev_iou(grown, replace(g, l=g.l + config.min_gap, w=g.w + config.min_gap)) == 0.0
               for g, _ in gts):
            gts.append((box, class_id))

    features = _embed_features(gts, grid, config, rng)
    return Scene(gts=tuple(gts), features=features, seed=rng_seed)


def _template_sizes(grid: AnchorGrid) -> dict[int, tuple[float, float, float]]:
    sizes: dict[int, tuple[float, float, float]] = {}
    for t in grid.templates:
        sizes.setdefault(t.class_id, (t.l, t.w, t.h))
    return sizes


def _embed_features(
    gts: Sequence[tuple[Box3D, int]],
    grid: AnchorGrid,
    config: SceneConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-position geometry embedding seen through the student modality.

    Layout: [occupancy, dx, dy, dz, l, w, h, sin yaw, cos yaw,
    one-hot class (k_c), squared BEV offset, zero padding].  Noise enters
    through a perturbed copy of the object, so offsets, sizes, and the
    derived distance stay mutually consistent; depth error grows with z.
    """
    k_c = grid.k_c
    dim = config.feature_dim
    if dim < 10 + k_c:
        raise ValueError(f"feature_dim {dim} too small; need >= {10 + k_c}")
    centers = grid.position_centers
    n = centers.shape[0]
    features = np.zeros((n, dim))
    noise = config.student_noise

    visible_gt = np.full(n, -1, dtype=np.int64)
    best_d2 = np.full(n, np.inf)
    for g, (box, _) in enumerate(gts):
        dx = centers[:, 0] - box.cx
        dz = centers[:, 1] - box.cz
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        u = dx * c + dz * s
        v = -dx * s + dz * c
        inside = (np.abs(u) <= 0.5 * box.l + config.feature_dilation) & (
            np.abs(v) <= 0.5 * box.w + config.feature_dilation
        )
        d2 = dx * dx + dz * dz
        take = inside & (d2 < best_d2)
        visible_gt[take] = g
        best_d2[take] = d2[take]

    for p in np.flatnonzero(visible_gt >= 0):
        box, class_id = gts[visible_gt[p]]
        px, pz = centers[p]
        ncx = box.cx + rng.normal(0.0, noise.center_sigma)
        ncy = box.cy + rng.normal(0.0, noise.center_sigma)
        ncz = box.cz + rng.normal(0.0, noise.center_sigma + noise.depth_bias * box.cz)
        nl, nw, nh = (box.l, box.w, box.h) * np.exp(rng.normal(0.0, noise.size_sigma, size=3))
        nyaw = box.yaw + rng.normal(0.0, noise.yaw_sigma)
        seen_class = class_id
        if noise.score_corruption > 0 and rng.uniform() < noise.score_corruption:
            seen_class = int(rng.integers(0, k_c))
        dx, dz = ncx - px, ncz - pz
        features[p, 0] = 1.0
        features[p, 1:4] = (dx, ncy - 1.0, dz)
        features[p, 4:7] = (nl, nw, nh)
        features[p, 7] = math.sin(nyaw)
        features[p, 8] = math.cos(nyaw)
        features[p, 9 + seen_class] = 1.0
        features[p, 9 + k_c] = dx * dx + dz * dz
    if config.ambient_noise > 0:
        features += rng.normal(0.0, config.ambient_noise, size=features.shape)
    return features


@dataclass(frozen=True)
class DetectorOutputs:
    """Dense head outputs on the shared grid."""

    logits: np.ndarray  # (n_positions, k_a, k_c)
    deltas: np.ndarray  # (n_positions, k_a, 7)

    def __post_init__(self) -> None:
        if self.logits.ndim != 3 or self.deltas.ndim != 3 or self.deltas.shape[2] != 7:
            raise ValueError("outputs must be (n_positions, k_a, k_c) and (n_positions, k_a, 7)")
        if self.logits.shape[:2] != self.deltas.shape[:2]:
            raise ValueError("logits and deltas disagree on positions/anchors")
        self.logits.setflags(write=False)
        self.deltas.setflags(write=False)

    @property
    def logits_flat(self) -> np.ndarray:
        """(n_anchors, k_c); anchor row index = position * k_a + slot."""
        return self.logits.reshape(-1, self.logits.shape[2])

    @property
    def deltas_flat(self) -> np.ndarray:
        return self.deltas.reshape(-1, 7)


@dataclass(frozen=True)
class DetectorParams:
    """One linear head pair shared over all grid positions."""

    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray

    def __post_init__(self) -> None:
        for name in ("w_cls", "b_cls", "w_reg", "b_reg"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def init(cls, seed: int, feature_dim: int, k_a: int, k_c: int) -> "DetectorParams":
        rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_INIT)))
        w_cls = rng.normal(0.0, 0.01, size=(feature_dim, k_a * k_c))
        w_reg = rng.normal(0.0, 0.01, size=(feature_dim, k_a * 7))
        # Background prior ~1%: classification starts near its background
        # optimum instead of spending epochs suppressing scores.
        b_cls = np.full(k_a * k_c, -4.6)
        b_reg = np.zeros(k_a * 7)
        return cls(w_cls=w_cls, b_cls=b_cls, w_reg=w_reg, b_reg=b_reg)

    def copy(self) -> "DetectorParams":
        return DetectorParams(
            self.w_cls.copy(), self.b_cls.copy(), self.w_reg.copy(), self.b_reg.copy()
        )


def student_forward(params: DetectorParams, scene: Scene) -> DetectorOutputs:
    """Linear per-position heads; deterministic in (params, scene)."""
    feats = scene.features
    if feats.shape[1] != params.w_cls.shape[0]:
        raise ValueError(
            f"feature dim {feats.shape[1]} does not match params ({params.w_cls.shape[0]})"
        )
    n = feats.shape[0]
    k_ac = params.w_cls.shape[1]
    k_a7 = params.w_reg.shape[1]
    k_a = k_a7 // 7
    logits = (feats @ params.w_cls + params.b_cls).reshape(n, k_a, k_ac // k_a)
    deltas = (feats @ params.w_reg + params.b_reg).reshape(n, k_a, 7)
    return DetectorOutputs(logits=logits, deltas=deltas)


def teacher_predict(
    scene: Scene,
    profile: NoiseProfile,
    grid: AnchorGrid,
    assignment: Assignment,
    seed: int | None = None,
) -> DetectorOutputs:
    """Oracle teacher: ground truth perturbed by the profile.

    Each object gets one perturbed box and one reported class (flipped to a
    random class with probability ``score_corruption``); all of its
    positive anchors carry that box's encoded offsets and a confident
    logit.  Everything else stays at the background logit.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence((scene.seed if seed is None else seed, _STREAM_TEACHER))
    )
    k_a, k_c = grid.k_a, grid.k_c
    logits = np.full((grid.n_positions, k_a, k_c), BACKGROUND_LOGIT)
    deltas = np.zeros((grid.n_positions, k_a, 7))

    per_gt: list[tuple[Box3D, int, float]] = []
    for box, class_id in scene.gts:
        noisy = _perturb_box(box, profile, rng)
        reported = class_id
        if profile.score_corruption > 0:
            # Each response component flips independently: the reported
            # class becomes random, box components take gross errors.  The
            # oracle stays confident about its mistakes.
            if rng.uniform() < profile.score_corruption:
                reported = int(rng.integers(0, k_c))
            noisy = _corrupt_components(noisy, profile.score_corruption, rng)
        peak = PEAK_LOGIT + rng.normal(0.0, 0.3)
        per_gt.append((noisy, reported, peak))

    flat_logits = logits.reshape(-1, k_c)
    flat_deltas = deltas.reshape(-1, 7)
    for idx in assignment.positive_indices:
        noisy, reported, peak = per_gt[assignment.labels[idx]]
        flat_deltas[idx] = encode_deltas(
            noisy.as_array()[None, :], grid.anchor_params[idx][None, :]
        )[0]
        flat_logits[idx, reported] = peak
    return DetectorOutputs(logits=logits, deltas=deltas)


def _perturb_box(box: Box3D, profile: NoiseProfile, rng: np.random.Generator) -> Box3D:
    cx = box.cx + rng.normal(0.0, profile.center_sigma)
    cy = box.cy + rng.normal(0.0, profile.center_sigma)
    cz = box.cz + rng.normal(0.0, profile.center_sigma + profile.depth_bias * box.cz)
    l, w, h = (box.l, box.w, box.h) * np.exp(rng.normal(0.0, profile.size_sigma, size=3))
    yaw = box.yaw + rng.normal(0.0, profile.yaw_sigma)
    return Box3D(cx, cy, cz, float(l), float(w), float(h), yaw)


def _corrupt_components(box: Box3D, rate: float, rng: np.random.Generator) -> Box3D:
    """Gross per-component errors, each flipped with probability ``rate``.

    Center jumps by about half the footprint diagonal, sizes by tens of
    percent, yaw by up to a quarter turn.
    """
    cx, cy, cz, l, w, h, yaw = box.cx, box.cy, box.cz, box.l, box.w, box.h, box.yaw
    diag = math.hypot(l, w)
    if rng.uniform() < rate:
        cx, cy, cz = (
            cx + rng.normal(0.0, 0.5 * diag),
            cy + rng.normal(0.0, 0.25 * h),
            cz + rng.normal(0.0, 0.5 * diag),
        )
    if rng.uniform() < rate:
        l, w, h = (l, w, h) * np.exp(rng.normal(0.0, 0.35, size=3))
    if rng.uniform() < rate:
        yaw = yaw + rng.uniform(-math.pi / 4, math.pi / 4)
    return Box3D(cx, cy, cz, float(l), float(w), float(h), yaw)


@dataclass(frozen=True)
class LossConfig:
    """Weights and switches for the combined training objective."""

    xgd_weight: float = 1.0
    cld_weight: float = 1.0
    tau: float = 1.0
    gate_eps: float = 1e-9
    xgd_components: tuple[str, ...] = COMPONENT_NAMES
    xgd_selection: str = "gate"  # "gate" | "confidence"
    confidence_threshold: float = 0.3
    xgd_normalization: str = "sum"
    cld_region: str = "foreground"  # "foreground" | "positive"
    cld_mode: str = "unified"  # "unified" | "classical"
    kl_teacher_reference: bool = True
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    smooth_l1_beta: float = 1.0 / 9.0
    # Hard-label regression reduction: "per_positive" (default) divides by
    # max(1, n_pos); "sum" keeps the raw per-positive footing, which makes
    # the hard-label term dominate the distillation IoU term.
    reg_normalization: str = "per_positive"

    def __post_init__(self) -> None:
        if self.xgd_weight < 0 or self.cld_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.xgd_selection not in ("gate", "confidence"):
            raise ValueError(f"unknown xgd_selection {self.xgd_selection!r}")
        if self.cld_region not in ("foreground", "positive"):
            raise ValueError(f"unknown cld_region {self.cld_region!r}")
        if self.cld_mode not in ("unified", "classical"):
            raise ValueError(f"unknown cld_mode {self.cld_mode!r}")
        unknown = set(self.xgd_components) - set(COMPONENT_NAMES)
        if unknown:
            raise ValueError(f"unknown XGD components {sorted(unknown)}")
        if self.reg_normalization not in ("sum", "per_positive"):
            raise ValueError(f"unknown reg_normalization {self.reg_normalization!r}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ori: float
    xgd: float
    cld: float
    n_pos: int
    gate_keep: dict[str, float] = field(default_factory=dict)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def _focal_terms(
    logits_flat: np.ndarray,
    labels: np.ndarray,
    gt_classes: np.ndarray,
    gamma: float,
    alpha: float,
) -> tuple[float, np.ndarray]:
    """Summed focal loss over non-ignore anchors and its logit gradient.

    The background formula is evaluated array-wide; the handful of
    positive (anchor, class) entries are patched afterwards, which keeps
    this hot path to a few passes over the logit array.
    """
    z = logits_flat
    # sigmoid, log-sigmoid(z), and log-sigmoid(-z) all share exp(-|z|).
    e = np.exp(-np.abs(z))
    log1p_e = np.log1p(e)
    ln_p = np.minimum(z, 0.0) - log1p_e
    ln_1mp = np.minimum(-z, 0.0) - log1p_e
    p = np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if gamma == 2.0:  # integer powers dominate this hot path
        p_g = p * p
        q_g_of = lambda q: q * q
    else:
        p_g = p**gamma
        q_g_of = lambda q: q**gamma
    loss = -(1.0 - alpha) * p_g * ln_1mp
    grad = (1.0 - alpha) * (p_g * p - gamma * p_g * (1.0 - p) * ln_1mp)

    pos_rows = np.flatnonzero(labels >= 0)
    if pos_rows.size:
        cols = gt_classes[labels[pos_rows]]
        pp = p[pos_rows, cols]
        qq = 1.0 - pp
        q_g = q_g_of(qq)
        loss[pos_rows, cols] = -alpha * q_g * ln_p[pos_rows, cols]
        grad[pos_rows, cols] = alpha * (
            gamma * pp * q_g * ln_p[pos_rows, cols] - q_g * qq
        )
    ignore_rows = np.flatnonzero(labels == -2)
    if ignore_rows.size:
        loss[ignore_rows] = 0.0
        grad[ignore_rows] = 0.0
    return float(loss.sum()), grad


def _smooth_l1(diff: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    absd = np.abs(diff)
    quad = absd < beta
    loss = np.where(quad, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    grad = np.where(quad, diff / beta, np.sign(diff))
    return loss, grad


def base_loss(
    outputs: DetectorOutputs,
    assignment: Assignment,
    gts: Sequence[tuple[Box3D, int]],
    grid: AnchorGrid,
    cfg: LossConfig = LossConfig(),
) -> float:
    """Hard-label objective: focal classification + smooth-L1 regression.

    The classification term runs over all non-ignore anchors; both terms
    are normalized by max(1, n_pos) by default (``reg_normalization``
    switches the regression term to a raw sum).
    """
    value, _, _ = _base_loss_and_grad(outputs, assignment, gts, grid, cfg)
    return value


def _base_loss_and_grad(
    outputs: DetectorOutputs,
    assignment: Assignment,
    gts: Sequence[tuple[Box3D, int]],
    grid: AnchorGrid,
    cfg: LossConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    labels = assignment.labels
    gt_classes = np.array([c for _, c in gts], dtype=np.int64)
    floss, fgrad = _focal_terms(
        outputs.logits_flat, labels, gt_classes, cfg.focal_gamma, cfg.focal_alpha
    )
    norm = max(1, assignment.n_pos)
    cls_term = floss / norm
    dlogits = fgrad / norm

    ddeltas = np.zeros_like(outputs.deltas_flat)
    pos, target_deltas = positive_target_deltas(grid, assignment, gts)
    reg_term = 0.0
    if pos.size:
        diff = outputs.deltas_flat[pos] - target_deltas
        sl, sg = _smooth_l1(diff, cfg.smooth_l1_beta)
        reg_norm = 1 if cfg.reg_normalization == "sum" else norm
        reg_term = float(sl.sum()) / reg_norm
        ddeltas[pos] = sg / reg_norm
    return cls_term + reg_term, dlogits, ddeltas


def _positive_boxes(
    outputs: DetectorOutputs, assignment: Assignment, grid: AnchorGrid
) -> tuple[np.ndarray, np.ndarray, list[Box3D]]:
    pos = assignment.positive_indices
    anchor_params = grid.anchor_params[pos]
    params = decode_deltas(outputs.deltas_flat[pos], anchor_params)
    return pos, anchor_params, [Box3D.from_array(p) for p in params]


def extract_logit_map(outputs: DetectorOutputs, positions: np.ndarray, k_a: int) -> LogitMap:
    """LogitMap over the given (sorted) position indices."""
    values = outputs.logits[positions].reshape(-1, outputs.logits.shape[2])
    return LogitMap(values=values, k_a=k_a)


def cld_positions(assignment: Assignment, grid: AnchorGrid, region: str) -> np.ndarray:
    """Position indices feeding logit distillation for the chosen region."""
    if region == "foreground":
        return np.flatnonzero(assignment.foreground)
    pos_positions = np.unique(assignment.positive_indices // grid.k_a)
    return pos_positions


def total_loss(
    student: DetectorOutputs,
    teacher: DetectorOutputs,
    scene: Scene,
    assignment: Assignment,
    grid: AnchorGrid,
    cfg: LossConfig = LossConfig(),
    flags: GeometryFlags | None = None,
) -> LossBreakdown:
    """Combined objective; a zero weight disables a term exactly."""
    breakdown, _, _ = total_loss_and_grad(student, teacher, scene, assignment, grid, cfg, flags)
    return breakdown


def total_loss_and_grad(
    student: DetectorOutputs,
    teacher: DetectorOutputs,
    scene: Scene,
    assignment: Assignment,
    grid: AnchorGrid,
    cfg: LossConfig = LossConfig(),
    flags: GeometryFlags | None = None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss breakdown plus gradients w.r.t. student logits and deltas.

    Distillation targets (gated boxes, teacher distributions) are detached
    snapshots recomputed on every call; the gate itself never contributes
    gradient.  Returned arrays have the dense (n_positions, k_a, *) shape.
    """
    if student.logits.shape != teacher.logits.shape or student.deltas.shape != teacher.deltas.shape:
        raise ValueError("student and teacher outputs must share the grid layout")
    ori, dlogits_flat, ddeltas_flat = _base_loss_and_grad(
        student, assignment, scene.gts, grid, cfg
    )

    xgd_term = 0.0
    gate_keep: dict[str, float] = {}
    if cfg.xgd_weight > 0 and assignment.n_pos > 0:
        pos, anchor_params, student_boxes = _positive_boxes(student, assignment, grid)
        teacher_boxes = [
            Box3D.from_array(p)
            for p in decode_deltas(teacher.deltas_flat[pos], anchor_params)
        ]
        gt_boxes = [scene.gts[assignment.labels[i]][0] for i in pos]
        if cfg.xgd_selection == "gate":
            decisions = gate_decisions(teacher_boxes, student_boxes, gt_boxes, cfg.gate_eps)
            targets = positive_component_update(
                teacher_boxes,
                student_boxes,
                gt_boxes,
                cfg.gate_eps,
                components=cfg.xgd_components,
                decisions=decisions,
            )
            gate_keep = gate_keep_rates(decisions)
            keep_deltas = student.deltas_flat[pos]
            keep_anchors = anchor_params
            keep_students = student_boxes
        else:
            # Box-level alternative: keep whole teacher boxes whose best
            # class score clears the confidence threshold.
            conf = _sigmoid(teacher.logits_flat[pos]).max(axis=1)
            chosen = np.flatnonzero(conf > cfg.confidence_threshold)
            targets = [teacher_boxes[i] for i in chosen]
            keep_deltas = student.deltas_flat[pos][chosen]
            keep_anchors = anchor_params[chosen]
            keep_students = [student_boxes[i] for i in chosen]
        xgd_term = xgd_loss(keep_students, targets, cfg.xgd_normalization, flags)
        if targets:
            g = xgd_loss_grad(
                keep_deltas,
                keep_anchors,
                targets,
                cfg.xgd_normalization,
                flags=flags,
            )
            rows = pos if cfg.xgd_selection == "gate" else pos[chosen]
            scatter = np.zeros_like(ddeltas_flat)
            scatter[rows] = g
            ddeltas_flat = ddeltas_flat + cfg.xgd_weight * scatter

    cld_term = 0.0
    if cfg.cld_weight > 0:
        positions = cld_positions(assignment, grid, cfg.cld_region)
        if positions.size:
            t_map = extract_logit_map(teacher, positions, grid.k_a)
            s_map = extract_logit_map(student, positions, grid.k_a)
            if cfg.cld_mode == "unified":
                t_dist = unified_distribution(t_map, cfg.tau)
                s_dist = unified_distribution(s_map, cfg.tau)
                if cfg.kl_teacher_reference:
                    cld_term = cld_loss(t_dist, s_dist)
                    g_map = cld_grad(t_dist, s_map, cfg.tau)
                else:
                    cld_term = cld_loss(s_dist, t_dist)
                    g_map = _reverse_kl_grad(t_dist.rows, s_dist.rows, cfg.tau).reshape(
                        s_map.n_fore, s_map.k_c
                    )
            else:
                cld_term = classical_logit_distill(t_map, s_map, cfg.tau)
                g_map = classical_logit_distill_grad(t_map, s_map, cfg.tau)
            scatter = np.zeros_like(dlogits_flat)
            rows = (positions[:, None] * grid.k_a + np.arange(grid.k_a)[None, :]).ravel()
            scatter[rows] = g_map
            dlogits_flat = dlogits_flat + cfg.cld_weight * scatter

    total = ori + cfg.xgd_weight * xgd_term + cfg.cld_weight * cld_term
    breakdown = LossBreakdown(
        total=total,
        ori=ori,
        xgd=xgd_term,
        cld=cld_term,
        n_pos=assignment.n_pos,
        gate_keep=gate_keep,
    )
    k_c = student.logits.shape[2]
    return (
        breakdown,
        dlogits_flat.reshape(student.logits.shape[0], grid.k_a, k_c),
        ddeltas_flat.reshape(student.deltas.shape[0], grid.k_a, 7),
    )


def _reverse_kl_grad(t_rows: np.ndarray, s_rows: np.ndarray, tau: float) -> np.ndarray:
    """Gradient of mean KL(student || teacher) w.r.t. student logits."""
    m = s_rows.shape[0]
    log_ratio = np.log(s_rows) - np.log(t_rows)
    row_kl = np.sum(s_rows * log_ratio, axis=1, keepdims=True)
    return s_rows * (log_ratio - row_kl) / (tau * m)


def replace_outputs(
    student: DetectorOutputs, teacher: DetectorOutputs, mode: str
) -> DetectorOutputs:
    """Substitute the selected student head(s) with the teacher's."""
    if mode not in ("regression", "classification", "both", "none"):
        raise ValueError(f"unknown replacement mode {mode!r}")
    if student.logits.shape != teacher.logits.shape or student.deltas.shape != teacher.deltas.shape:
        raise ValueError("student and teacher outputs must share shapes")
    logits = teacher.logits if mode in ("classification", "both") else student.logits
    deltas = teacher.deltas if mode in ("regression", "both") else student.deltas
    return DetectorOutputs(logits=logits, deltas=deltas)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.003
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 4

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0 (0 evaluates the initialized model)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    total: float
    ori: float
    xgd: float
    cld: float
    n_pos_mean: float
    gate_keep: dict[str, float]


@dataclass
class TrainResult:
    params: DetectorParams
    history: list[EpochStats]

    def final_gate_keep(self) -> dict[str, float]:
        for stats in reversed(self.history):
            if stats.gate_keep:
                return stats.gate_keep
        return {}


class _Adam:
    def __init__(self, shapes: list[np.ndarray], cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in shapes]
        self.v = [np.zeros_like(a) for a in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        c = self.cfg
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            m_hat = self.m[i] / (1 - c.beta1**self.t)
            v_hat = self.v[i] / (1 - c.beta2**self.t)
            out.append(p - c.learning_rate * (m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * p))
        return out


def train(
    grid: AnchorGrid,
    scenes: Sequence[Scene],
    teacher_outputs: Sequence[DetectorOutputs],
    assignments: Sequence[Assignment],
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    seed: int,
    flags: GeometryFlags | None = None,
) -> TrainResult:
    """Adam over the combined loss; deterministic given the seed.

    Gates and distillation targets are recomputed at every step from the
    current student.  Raises TrainingDivergedError with a diagnostic
    snapshot if any loss stops being finite.
    """
    if not (len(scenes) == len(teacher_outputs) == len(assignments)):
        raise ValueError("scenes, teacher outputs, and assignments must align")
    if not scenes:
        raise ValueError("at least one training scene is required")
    if opt_cfg.epochs < 1:
        raise ValueError("train requires epochs >= 1; use the initialized model directly")
    params = DetectorParams.init(seed, scenes[0].features.shape[1], grid.k_a, grid.k_c)
    weights = [params.w_cls, params.b_cls, params.w_reg, params.b_reg]
    adam = _Adam(weights, opt_cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_SHUFFLE)))
    history: list[EpochStats] = []

    for epoch in range(opt_cfg.epochs):
        order = shuffle_rng.permutation(len(scenes))
        sums = np.zeros(4)
        n_pos_sum = 0
        keep_sums = {name: 0.0 for name in COMPONENT_NAMES}
        keep_count = 0
        for start in range(0, len(order), opt_cfg.batch_size):
            batch = order[start : start + opt_cfg.batch_size]
            grads = [np.zeros_like(w) for w in weights]
            for si in batch:
                scene = scenes[si]
                outputs = student_forward(
                    DetectorParams(weights[0], weights[1], weights[2], weights[3]), scene
                )
                breakdown, dlogits, ddeltas = total_loss_and_grad(
                    outputs, teacher_outputs[si], scene, assignments[si], grid, loss_cfg, flags
                )
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, scene {scenes[si].seed}",
                        snapshot={
                            "epoch": epoch,
                            "scene_seed": scenes[si].seed,
                            "breakdown": breakdown,
                        },
                    )
                n = scene.features.shape[0]
                dl = dlogits.reshape(n, -1)
                dd = ddeltas.reshape(n, -1)
                grads[0] += scene.features.T @ dl
                grads[1] += dl.sum(axis=0)
                grads[2] += scene.features.T @ dd
                grads[3] += dd.sum(axis=0)
                sums += (breakdown.total, breakdown.ori, breakdown.xgd, breakdown.cld)
                n_pos_sum += breakdown.n_pos
                if breakdown.gate_keep and not math.isnan(breakdown.gate_keep["center"]):
                    for name in COMPONENT_NAMES:
                        keep_sums[name] += breakdown.gate_keep[name]
                    keep_count += 1
            grads = [g / len(batch) for g in grads]
            weights = adam.step(weights, grads)
        n_seen = len(order)
        history.append(
            EpochStats(
                total=sums[0] / n_seen,
                ori=sums[1] / n_seen,
                xgd=sums[2] / n_seen,
                cld=sums[3] / n_seen,
                n_pos_mean=n_pos_sum / n_seen,
                gate_keep={k: v / keep_count for k, v in keep_sums.items()} if keep_count else {},
            )
        )
    final = DetectorParams(weights[0], weights[1], weights[2], weights[3])
    return TrainResult(params=final, history=history)


def save_scenes(path: str | Path, scenes: Sequence[Scene]) -> None:
    """Write scenes as line-delimited records: seed, GT boxes, class ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            record = {
                "seed": scene.seed,
                "gts": [list(b.as_array()) for b, _ in scene.gts],
                "class_ids": [c for _, c in scene.gts],
            }
            fh.write(json.dumps(record) + "\n")


def load_scenes(path: str | Path, config: SceneConfig, grid: AnchorGrid) -> list[Scene]:
    """Regenerate scenes from stored seeds; verify GTs match the records."""
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            scene = generate_scene(int(record["seed"]), config, grid)
            stored = np.array(record["gts"], dtype=float).reshape(-1, 7)
            current = np.array([b.as_array() for b, _ in scene.gts]).reshape(-1, 7)
            if stored.shape != current.shape or (
                stored.size and np.max(np.abs(stored - current)) > 1e-9
            ) or list(record["class_ids"]) != [c for _, c in scene.gts]:
                raise ValueError(
                    f"{path}:{line_no}: stored scene does not match regeneration "
                    "(was the scene config changed?)"
                )
            scenes.append(scene)
    return scenes
