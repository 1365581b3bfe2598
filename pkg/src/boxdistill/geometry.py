"""Exact rotated-3D-box geometry on the bird's-eye-view plane.

Boxes live in a camera-style frame: x right, y vertical, z forward.  The
BEV footprint of a box is its (x, z) rectangle; 3D overlap is footprint
overlap times vertical interval overlap.  All functions are pure; the
Monte-Carlo oracle draws every random number from its explicit seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi

# Vertices closer than this (meters) are merged after clipping; collinear
# vertices within this perpendicular distance of their neighbour edge are
# dropped.  Stabilizes areas and finite differences near degeneracy.
MERGE_TOL = 1e-9

# Unions smaller than this (cubic meters) are treated as degenerate.
DEGENERATE_UNION = 1e-12


@dataclass
class GeometryFlags:
    """Diagnostic counters, incremented by operations that hit a guard.

    Callers that care pass one in; each caller owns its accumulator, so
    parallel invocations with separate accumulators stay safe.
    """

    degenerate_union: int = 0
    size_clamped: int = 0
    gradient_clipped: int = 0
    decode_clamped: int = 0


def wrap_angle(theta: float) -> float:
    """Reduce an angle to the interval (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Elementwise :func:`wrap_angle` for numpy arrays.

    Exact (no rounding) for inputs already inside (-pi, pi].
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    wrapped = theta - TWO_PI * np.round(theta / TWO_PI)
    return np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (cx, cy, cz), extents (l, w, h), yaw.

    l spans x at yaw 0, w spans z, h spans the vertical axis; yaw rotates
    the footprint counter-clockwise in the (x, z) plane and is normalized
    to (-pi, pi] on construction.
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box parameters must be finite, got {vals}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(
                f"box extents must be positive, got l={self.l}, w={self.w}, h={self.h}"
            )
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def as_array(self) -> np.ndarray:
        """Parameters in canonical order (cx, cy, cz, l, w, h, yaw)."""
        return np.array(
            [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw], dtype=float
        )

    @classmethod
    def from_array(cls, params: np.ndarray) -> "Box3D":
        cx, cy, cz, l, w, h, yaw = (float(v) for v in params)
        return cls(cx, cy, cz, l, w, h, yaw)


@dataclass(frozen=True)
class ConvexPolygon2D:
    """Convex CCW polygon in the BEV (x, z) plane; may be empty."""

    vertices: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.vertices) > 16:
            raise ValueError(f"polygon has {len(self.vertices)} vertices, cap is 16")
        if _signed_area(list(self.vertices)) < -MERGE_TOL:
            raise ValueError("polygon must be counter-clockwise")
        n = len(self.vertices)
        if n >= 3:
            for i in range(n):
                ax, az = self.vertices[i]
                bx, bz = self.vertices[(i + 1) % n]
                cx, cz = self.vertices[(i + 2) % n]
                cross = (bx - ax) * (cz - az) - (bz - az) * (cx - ax)
                if cross < -MERGE_TOL:
                    raise ValueError("polygon must be convex")

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    @property
    def area(self) -> float:
        return max(0.0, _signed_area(list(self.vertices)))


def _signed_area(pts: list[tuple[float, float]]) -> float:
    if len(pts) < 3:
        return 0.0
    acc = 0.0
    n = len(pts)
    for i in range(n):
        x0, z0 = pts[i]
        x1, z1 = pts[(i + 1) % n]
        acc += x0 * z1 - x1 * z0
    return 0.5 * acc


def _bev_corners(box: Box3D) -> list[tuple[float, float]]:
    """CCW footprint corners of ``box`` in the (x, z) plane."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    out = []
    for u, v in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((box.cx + u * c - v * s, box.cz + u * s + v * c))
    return out


def bev_polygon(box: Box3D) -> ConvexPolygon2D:
    """Footprint rectangle of ``box``: extent l x w rotated by yaw."""
    return ConvexPolygon2D(tuple(_bev_corners(box)))


def _clip(subject: list[tuple[float, float]],
          clip: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman intersection of two convex CCW polygons."""
    output = subject
    n_clip = len(clip)
    for i in range(n_clip):
        if not output:
            return []
        ax, az = clip[i]
        bx, bz = clip[(i + 1) % n_clip]
        ex, ez = bx - ax, bz - az
        inputs = output
        output = []
        px, pz = inputs[-1]
        prev_in = ex * (pz - az) - ez * (px - ax) >= 0.0
        for qx, qz in inputs:
            curr_in = ex * (qz - az) - ez * (qx - ax) >= 0.0
            if curr_in != prev_in:
                # Edge crosses the clip line; the denominator cannot be
                # exactly zero when the inside flags differ, but guard the
                # near-parallel case anyway.
                dx, dz = qx - px, qz - pz
                den = ex * dz - ez * dx
                if den != 0.0:
                    t = (ex * (az - pz) - ez * (ax - px)) / den
                    t = min(1.0, max(0.0, t))
                    output.append((px + t * dx, pz + t * dz))
                else:
                    output.append((qx, qz))
            if curr_in:
                output.append((qx, qz))
            px, pz, prev_in = qx, qz, curr_in
    return _merge_degenerate(output)


def _merge_degenerate(pts: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Drop duplicate and collinear vertices (within MERGE_TOL meters)."""
    if not pts:
        return []
    deduped: list[tuple[float, float]] = []
    for p in pts:
        if not deduped or math.hypot(p[0] - deduped[-1][0], p[1] - deduped[-1][1]) > MERGE_TOL:
            deduped.append(p)
    while len(deduped) > 1 and math.hypot(
        deduped[0][0] - deduped[-1][0], deduped[0][1] - deduped[-1][1]
    ) <= MERGE_TOL:
        deduped.pop()
    if len(deduped) < 3:
        return deduped
    out: list[tuple[float, float]] = []
    n = len(deduped)
    for i in range(n):
        prev_pt = deduped[(i - 1) % n]
        curr = deduped[i]
        next_pt = deduped[(i + 1) % n]
        ex, ez = next_pt[0] - prev_pt[0], next_pt[1] - prev_pt[1]
        elen = math.hypot(ex, ez)
        if elen > 0.0:
            perp = abs(ex * (curr[1] - prev_pt[1]) - ez * (curr[0] - prev_pt[0])) / elen
            if perp <= MERGE_TOL:
                continue
        out.append(curr)
    return out


def convex_clip(subject: ConvexPolygon2D, clip: ConvexPolygon2D) -> ConvexPolygon2D:
    """Intersection ``subject & clip``; the empty polygon when disjoint."""
    if subject.is_empty or clip.is_empty:
        return ConvexPolygon2D()
    return ConvexPolygon2D(tuple(_clip(list(subject.vertices), list(clip.vertices))))


def polygon_area(poly: ConvexPolygon2D) -> float:
    """Shoelace area; zero for polygons with fewer than 3 vertices."""
    return poly.area


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return max(0.0, _signed_area(_clip(_bev_corners(a), _bev_corners(b))))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Footprint IoU in the BEV plane (no vertical term)."""
    # Cheap reject: disjoint circumcircles cannot overlap.
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cz - b.cz) > ra + rb:
        return 0.0
    if (a.cx, a.cz, a.l, a.w, a.yaw) <= (b.cx, b.cz, b.l, b.w, b.yaw):
        inter = _bev_intersection_area(a, b)
    else:
        inter = _bev_intersection_area(b, a)
    union = a.l * a.w + b.l * b.w - inter
    if union <= DEGENERATE_UNION:
        return 0.0
    return min(1.0, inter / union)


class IoU3DResult(NamedTuple):
    iou: float
    intersection: float
    union: float
    degenerate: bool


def iou3d_parts(a: Box3D, b: Box3D, flags: GeometryFlags | None = None) -> IoU3DResult:
    """3D IoU with its intersection/union volumes and degeneracy marker."""
    y_overlap = min(a.cy + 0.5 * a.h, b.cy + 0.5 * b.h) - max(
        a.cy - 0.5 * a.h, b.cy - 0.5 * b.h
    )
    if y_overlap <= 0.0:
        inter = 0.0
    else:
        # Clip in a canonical order so iou3d(a, b) and iou3d(b, a) run the
        # identical float sequence and agree bit-for-bit.
        ka = (a.cx, a.cy, a.cz, a.l, a.w, a.h, a.yaw)
        kb = (b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)
        if ka <= kb:
            inter = _bev_intersection_area(a, b) * y_overlap
        else:
            inter = _bev_intersection_area(b, a) * y_overlap
    union = a.volume + b.volume - inter
    if union <= DEGENERATE_UNION:
        if flags is not None:
            flags.degenerate_union += 1
        return IoU3DResult(0.0, inter, union, True)
    return IoU3DResult(min(1.0, max(0.0, inter / union)), inter, union, False)


def iou3d(a: Box3D, b: Box3D, flags: GeometryFlags | None = None) -> float:
    """Rotated 3D IoU of two boxes, in [0, 1]."""
    return iou3d_parts(a, b, flags).iou


class MonteCarloIoU(NamedTuple):
    value: float
    stderr: float
    n_union_hits: int


def _points_in_box(box: Box3D, pts: np.ndarray) -> np.ndarray:
    """Boolean mask of sample points (n, 3 = x, y, z) inside an oriented box."""
    dx = pts[:, 0] - box.cx
    dz = pts[:, 2] - box.cz
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = dx * c + dz * s
    v = -dx * s + dz * c
    return (
        (np.abs(u) <= 0.5 * box.l)
        & (np.abs(v) <= 0.5 * box.w)
        & (np.abs(pts[:, 1] - box.cy) <= 0.5 * box.h)
    )


def iou3d_mc_oracle(a: Box3D, b: Box3D, n_samples: int, seed: int) -> MonteCarloIoU:
    """Monte-Carlo IoU estimate, independent of the clipping path.

    Samples uniformly in the axis-aligned bounding box of the two boxes and
    counts membership via point-in-oriented-box tests.  The standard error
    is the binomial error of the conditional hit fraction.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    corners = []
    for box in (a, b):
        bev = _bev_corners(box)
        for x, z in bev:
            corners.append((x, box.cy - 0.5 * box.h, z))
            corners.append((x, box.cy + 0.5 * box.h, z))
    lo = np.min(np.array(corners), axis=0)
    hi = np.max(np.array(corners), axis=0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = _points_in_box(a, pts)
    in_b = _points_in_box(b, pts)
    n_union = int(np.count_nonzero(in_a | in_b))
    n_inter = int(np.count_nonzero(in_a & in_b))
    if n_union == 0:
        return MonteCarloIoU(0.0, 0.0, 0)
    p = n_inter / n_union
    stderr = math.sqrt(max(0.0, p * (1.0 - p)) / n_union)
    return MonteCarloIoU(p, stderr, n_union)


#: Canonical finite-difference steps per box parameter, order
#: (cx, cy, cz, l, w, h, yaw): 1e-3 m for center/size, 1e-3 rad for yaw.
DEFAULT_FD_STEPS = np.full(7, 1e-3)

SIZE_FLOOR = 1e-6


def iou3d_grad_fd(
    a: Box3D,
    b_const: Box3D,
    steps: np.ndarray | None = None,
    flags: GeometryFlags | None = None,
) -> np.ndarray:
    """Central-difference gradient of iou3d w.r.t. the 7 parameters of ``a``.

    ``b_const`` is held fixed (the stop-gradient target).  Perturbations
    that would drive an extent non-positive are clamped at SIZE_FLOOR and
    counted in ``flags.size_clamped``; the actual parameter difference is
    used as the divisor so the estimate stays consistent.
    """
    steps = DEFAULT_FD_STEPS if steps is None else np.asarray(steps, dtype=float)
    if steps.shape != (7,) or np.any(steps <= 0):
        raise ValueError("steps must be 7 positive values")
    params = [a.cx, a.cy, a.cz, a.l, a.w, a.h, a.yaw]
    b_corners = _bev_corners(b_const)
    b_vol = b_const.volume
    b_ylo, b_yhi = b_const.cy - 0.5 * b_const.h, b_const.cy + 0.5 * b_const.h

    def value(p: list[float], bev_inter: float | None = None) -> float:
        cx, cy, cz, l, w, h, yaw = p
        y_overlap = min(cy + 0.5 * h, b_yhi) - max(cy - 0.5 * h, b_ylo)
        if y_overlap <= 0.0:
            inter = 0.0
        else:
            if bev_inter is None:
                c, s = math.cos(yaw), math.sin(yaw)
                hl, hw = 0.5 * l, 0.5 * w
                corners = [
                    (cx + u * c - v * s, cz + u * s + v * c)
                    for u, v in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
                ]
                bev_inter = max(0.0, _signed_area(_clip(corners, b_corners)))
            inter = bev_inter * y_overlap
        union = l * w * h + b_vol - inter
        if union <= DEGENERATE_UNION:
            if flags is not None:
                flags.degenerate_union += 1
            return 0.0
        return min(1.0, max(0.0, inter / union))

    # Perturbing cy or h leaves the footprint unchanged, so its
    # intersection area is computed once and reused.
    base_bev = max(0.0, _signed_area(_clip(_bev_corners(a), b_corners)))
    grad = np.zeros(7)
    for i in range(7):
        plus = list(params)
        minus = list(params)
        plus[i] += steps[i]
        minus[i] -= steps[i]
        if i in (3, 4, 5):
            for pert in (plus, minus):
                if pert[i] < SIZE_FLOOR:
                    pert[i] = SIZE_FLOOR
                    if flags is not None:
                        flags.size_clamped += 1
        span = plus[i] - minus[i]
        if span == 0.0:
            continue
        reuse = base_bev if i in (1, 5) else None
        grad[i] = (value(plus, reuse) - value(minus, reuse)) / span
    return grad
