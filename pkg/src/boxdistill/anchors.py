"""Anchor grid, box delta codec, target assignment, and foreground masking.

One template set is tiled over a regular BEV grid; the teacher oracle and
the trainable student share the same grid and the same assignment.
Anchor index convention: ``(iz * nx + ix) * k_a + slot``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3D, GeometryFlags, bev_iou, wrap_angle, wrap_angle_array

LABEL_NEGATIVE = -1
LABEL_IGNORE = -2

# Decoded box extents are capped here; hitting the cap is flagged.
DECODE_SIZE_CAP = 1e6


@dataclass(frozen=True)
class ClassSpec:
    """Per-class anchor template and matching thresholds."""

    name: str
    l: float
    w: float
    h: float
    cy: float = 1.0
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    eval_iou: float = 0.5


@dataclass(frozen=True)
class GridConfig:
    """Default synthetic layout: a 60 x 57.6 m range on 0.8 m cells.

    The wide ignore bands (gap between neg_iou and pos_iou) leave the
    foreground ring unsupervised by the hard classification loss; that is
    the region logit distillation covers.
    """

    x_range: tuple[float, float] = (-30.0, 30.0)
    z_range: tuple[float, float] = (2.0, 59.6)
    cell: tuple[float, float] = (0.8, 0.8)
    classes: tuple[ClassSpec, ...] = (
        ClassSpec("car", 3.9, 1.6, 1.56, cy=1.0, pos_iou=0.6, neg_iou=0.3, eval_iou=0.7),
        ClassSpec("pedestrian", 0.8, 0.6, 1.73, cy=1.0, pos_iou=0.4, neg_iou=0.15),
        ClassSpec("cyclist", 1.76, 0.6, 1.73, cy=1.0, pos_iou=0.4, neg_iou=0.15),
    )
    rotations: tuple[float, ...] = (0.0, math.pi / 2)


@dataclass(frozen=True)
class AnchorTemplate:
    class_id: int
    l: float
    w: float
    h: float
    yaw: float
    cy: float


@dataclass(frozen=True)
class AnchorGrid:
    """Regular anchor layout: k_a templates at every BEV grid position."""

    origin: tuple[float, float]
    cell: tuple[float, float]
    nx: int
    nz: int
    templates: tuple[AnchorTemplate, ...]
    k_c: int
    class_names: tuple[str, ...]

    @property
    def k_a(self) -> int:
        return len(self.templates)

    @property
    def n_positions(self) -> int:
        return self.nx * self.nz

    @property
    def n_anchors(self) -> int:
        return self.n_positions * self.k_a

    @cached_property
    def position_centers(self) -> np.ndarray:
        """(n_positions, 2) array of (x, z) cell centers, row-major in z then x."""
        ix = np.arange(self.nx)
        iz = np.arange(self.nz)
        xs = self.origin[0] + (ix + 0.5) * self.cell[0]
        zs = self.origin[1] + (iz + 0.5) * self.cell[1]
        gx, gz = np.meshgrid(xs, zs)  # rows iterate z
        out = np.stack([gx.ravel(), gz.ravel()], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def anchor_params(self) -> np.ndarray:
        """(n_anchors, 7) anchor boxes as (cx, cy, cz, l, w, h, yaw) rows."""
        centers = self.position_centers
        tmpl = np.array(
            [[t.cy, t.l, t.w, t.h, t.yaw] for t in self.templates]
        )  # (k_a, 5)
        out = np.empty((self.n_anchors, 7))
        rep = np.repeat(centers, self.k_a, axis=0)
        out[:, 0] = rep[:, 0]
        out[:, 2] = rep[:, 1]
        tiled = np.tile(tmpl, (self.n_positions, 1))
        out[:, 1] = tiled[:, 0]
        out[:, 3:6] = tiled[:, 1:4]
        out[:, 6] = tiled[:, 4]
        out.setflags(write=False)
        return out

    def anchor_box(self, index: int) -> Box3D:
        return Box3D.from_array(self.anchor_params[index])

    def position_of_anchor(self, index: int) -> int:
        return index // self.k_a

    def slot_class_ids(self) -> np.ndarray:
        return np.array([t.class_id for t in self.templates])


def build_anchor_grid(config: GridConfig) -> AnchorGrid:
    """Lay out the anchor grid described by ``config``.

    Positions are cell centers, so every anchor center falls strictly
    inside the detection range.  Raises ValueError on an empty grid.
    """
    dx, dz = config.cell
    if dx <= 0 or dz <= 0:
        raise ValueError(f"cell sizes must be positive, got {config.cell}")
    if config.x_range[1] <= config.x_range[0] or config.z_range[1] <= config.z_range[0]:
        raise ValueError("range bounds must be ordered low < high")
    nx = int(math.floor((config.x_range[1] - config.x_range[0]) / dx + 1e-9))
    nz = int(math.floor((config.z_range[1] - config.z_range[0]) / dz + 1e-9))
    if nx < 1 or nz < 1:
        raise ValueError(f"grid is empty: nx={nx}, nz={nz}")
    if not config.classes:
        raise ValueError("at least one class template is required")
    templates = tuple(
        AnchorTemplate(class_id=c, l=spec.l, w=spec.w, h=spec.h, yaw=wrap_angle(rot), cy=spec.cy)
        for c, spec in enumerate(config.classes)
        for rot in config.rotations
    )
    return AnchorGrid(
        origin=(config.x_range[0], config.z_range[0]),
        cell=(dx, dz),
        nx=nx,
        nz=nz,
        templates=templates,
        k_c=len(config.classes),
        class_names=tuple(spec.name for spec in config.classes),
    )


@dataclass(frozen=True)
class BoxDelta:
    """Regression offsets of a box relative to an anchor.

    Order matches Box3D parameters: centers normalized by the anchor BEV
    diagonal (x, z) and height (y), log-ratio extents, wrapped yaw delta.
    """

    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.dx, self.dy, self.dz, self.dl, self.dw, self.dh, self.dtheta]
        )

    @classmethod
    def from_array(cls, values: np.ndarray) -> "BoxDelta":
        return cls(*(float(v) for v in values))


def encode_box(box: Box3D, anchor: Box3D) -> BoxDelta:
    """Offsets that carry ``anchor`` onto ``box``; inverse of decode_box."""
    diag = math.hypot(anchor.l, anchor.w)
    return BoxDelta(
        dx=(box.cx - anchor.cx) / diag,
        dy=(box.cy - anchor.cy) / anchor.h,
        dz=(box.cz - anchor.cz) / diag,
        dl=math.log(box.l / anchor.l),
        dw=math.log(box.w / anchor.w),
        dh=math.log(box.h / anchor.h),
        dtheta=wrap_angle(box.yaw - anchor.yaw),
    )


def decode_box(delta: BoxDelta, anchor: Box3D, flags: GeometryFlags | None = None) -> Box3D:
    """Apply regression offsets to an anchor. Extents cap at DECODE_SIZE_CAP."""
    arr = decode_deltas(delta.as_array()[None, :], anchor.as_array()[None, :], flags)
    return Box3D.from_array(arr[0])


def decode_deltas(
    deltas: np.ndarray, anchor_params: np.ndarray, flags: GeometryFlags | None = None
) -> np.ndarray:
    """Vectorized decode: (n, 7) deltas + (n, 7) anchors -> (n, 7) box params."""
    deltas = np.asarray(deltas, dtype=float)
    anchor_params = np.asarray(anchor_params, dtype=float)
    diag = np.hypot(anchor_params[:, 3], anchor_params[:, 4])
    out = np.empty_like(deltas)
    out[:, 0] = anchor_params[:, 0] + deltas[:, 0] * diag
    out[:, 1] = anchor_params[:, 1] + deltas[:, 1] * anchor_params[:, 5]
    out[:, 2] = anchor_params[:, 2] + deltas[:, 2] * diag
    sizes = anchor_params[:, 3:6] * np.exp(deltas[:, 3:6])
    over = sizes > DECODE_SIZE_CAP
    if np.any(over):
        sizes = np.where(over, DECODE_SIZE_CAP, sizes)
        if flags is not None:
            flags.decode_clamped += int(np.count_nonzero(over))
    out[:, 3:6] = sizes
    out[:, 6] = wrap_angle_array(anchor_params[:, 6] + deltas[:, 6])
    return out


def encode_deltas(box_params: np.ndarray, anchor_params: np.ndarray) -> np.ndarray:
    """Vectorized encode: (n, 7) box params + (n, 7) anchors -> (n, 7) deltas."""
    box_params = np.asarray(box_params, dtype=float)
    anchor_params = np.asarray(anchor_params, dtype=float)
    diag = np.hypot(anchor_params[:, 3], anchor_params[:, 4])
    out = np.empty_like(box_params)
    out[:, 0] = (box_params[:, 0] - anchor_params[:, 0]) / diag
    out[:, 1] = (box_params[:, 1] - anchor_params[:, 1]) / anchor_params[:, 5]
    out[:, 2] = (box_params[:, 2] - anchor_params[:, 2]) / diag
    out[:, 3:6] = np.log(box_params[:, 3:6] / anchor_params[:, 3:6])
    out[:, 6] = wrap_angle_array(box_params[:, 6] - anchor_params[:, 6])
    return out


@dataclass(frozen=True)
class Assignment:
    """Per-anchor labels plus the foreground position mask.

    ``labels[i]`` is the matched ground-truth index when >= 0,
    LABEL_NEGATIVE, or LABEL_IGNORE.  ``max_iou[i]`` is the best BEV IoU
    against a same-class ground truth (0 when there is none).
    """

    labels: np.ndarray
    max_iou: np.ndarray
    foreground: np.ndarray

    def __post_init__(self) -> None:
        self.labels.setflags(write=False)
        self.max_iou.setflags(write=False)
        self.foreground.setflags(write=False)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))

    @property
    def m_fore(self) -> int:
        return int(np.count_nonzero(self.foreground))

    def n_fore(self, k_a: int) -> int:
        return self.m_fore * k_a


def _candidate_positions(grid: AnchorGrid, gt: Box3D, reach: float) -> np.ndarray:
    """Indices of grid positions whose center could overlap ``gt``."""
    centers = grid.position_centers
    r = 0.5 * math.hypot(gt.l, gt.w) + reach
    near = (np.abs(centers[:, 0] - gt.cx) <= r) & (np.abs(centers[:, 1] - gt.cz) <= r)
    return np.flatnonzero(near)


def assign_targets(
    grid: AnchorGrid,
    gts: Sequence[tuple[Box3D, int]],
    thresholds: Mapping[int, tuple[float, float]] | tuple[float, float] = (0.6, 0.45),
    dilation: float = 0.5,
) -> Assignment:
    """Label every anchor positive / negative / ignore against ``gts``.

    An anchor is positive when its BEV IoU with a same-class ground truth
    reaches the class positive threshold, or when it is that ground
    truth's argmax anchor (forced match, ties to the lowest anchor index).
    Anchors below the negative threshold are negative, the rest ignored.
    The forced match is skipped when a ground truth overlaps no same-class
    anchor at all (argmax over an all-zero row is meaningless and would
    break the positive-implies-foreground property).
    """

    def thr_for(class_id: int) -> tuple[float, float]:
        if isinstance(thresholds, tuple):
            return thresholds
        return thresholds[class_id]

    for class_id in {c for _, c in gts}:
        pos_thr, neg_thr = thr_for(class_id)
        if pos_thr < neg_thr:
            raise ValueError(
                f"pos_iou {pos_thr} must be >= neg_iou {neg_thr} for class {class_id}"
            )

    k_a = grid.k_a
    max_iou = np.zeros(grid.n_anchors)
    best_gt = np.full(grid.n_anchors, -1, dtype=np.int64)
    forced: list[tuple[int, float, int]] = []  # (anchor, iou, gt_index)

    slot_classes = grid.slot_class_ids()
    max_template_reach = max(
        (0.5 * math.hypot(t.l, t.w) for t in grid.templates), default=0.0
    )
    for g, (gt, class_id) in enumerate(gts):
        slots = np.flatnonzero(slot_classes == class_id)
        if slots.size == 0:
            continue
        positions = _candidate_positions(grid, gt, max_template_reach)
        best_anchor, best_val = -1, 0.0
        for p in positions:
            for slot in slots:
                idx = int(p) * k_a + int(slot)
                iou = bev_iou(grid.anchor_box(idx), gt)
                if iou > max_iou[idx] or (iou == max_iou[idx] and best_gt[idx] < 0):
                    max_iou[idx] = iou
                    best_gt[idx] = g
                if iou > best_val:
                    best_val, best_anchor = iou, idx
        if best_anchor >= 0 and best_val > 0.0:
            forced.append((best_anchor, best_val, g))

    labels = np.full(grid.n_anchors, LABEL_NEGATIVE, dtype=np.int64)
    pos_thr_per_slot = np.array([thr_for(int(c))[0] for c in slot_classes])
    neg_thr_per_slot = np.array([thr_for(int(c))[1] for c in slot_classes])
    slot_of = np.tile(np.arange(k_a), grid.n_positions)
    pos_mask = max_iou >= pos_thr_per_slot[slot_of]
    ignore_mask = ~pos_mask & (max_iou >= neg_thr_per_slot[slot_of])
    labels[ignore_mask] = LABEL_IGNORE
    labels[pos_mask] = best_gt[pos_mask]

    for anchor, iou, g in forced:
        if labels[anchor] >= 0 and max_iou[anchor] > iou:
            continue
        labels[anchor] = g

    fg = foreground_mask(grid, gts, dilation=dilation)
    return Assignment(labels=labels, max_iou=max_iou, foreground=fg)


def foreground_mask(
    grid: AnchorGrid, gts: Sequence[tuple[Box3D, int]], dilation: float = 0.5
) -> np.ndarray:
    """Flag positions whose center lies in any GT footprint dilated per side."""
    if dilation < 0:
        raise ValueError(f"dilation must be >= 0, got {dilation}")
    centers = grid.position_centers
    mask = np.zeros(grid.n_positions, dtype=bool)
    for gt, _ in gts:
        dx = centers[:, 0] - gt.cx
        dz = centers[:, 1] - gt.cz
        c, s = math.cos(gt.yaw), math.sin(gt.yaw)
        u = dx * c + dz * s
        v = -dx * s + dz * c
        mask |= (np.abs(u) <= 0.5 * gt.l + dilation) & (np.abs(v) <= 0.5 * gt.w + dilation)
    return mask


def positive_target_deltas(
    grid: AnchorGrid, assignment: Assignment, gts: Sequence[tuple[Box3D, int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Encoded GT deltas for every positive anchor.

    Returns (positive anchor indices, (n_pos, 7) encoded targets), both in
    ascending anchor order.
    """
    pos = assignment.positive_indices
    if pos.size == 0:
        return pos, np.zeros((0, 7))
    gt_params = np.array([gts[assignment.labels[i]][0].as_array() for i in pos])
    return pos, encode_deltas(gt_params, grid.anchor_params[pos])
