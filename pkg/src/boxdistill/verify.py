"""Self-verification suite: every oracle-backed property in one runnable
report.

Each check re-derives its expected values through an independent route
(Monte-Carlo sampling, brute-force re-implementation, closed forms, finite
differences) and compares the production path against it.  The CLI `verify`
command prints one line per check and exits non-zero on any failure.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import anchors as anchors_mod
from . import cld as cld_mod
from . import geometry as geom
from . import sim as sim_mod
from . import xgd as xgd_mod
from .anchors import build_anchor_grid
from .config import ExperimentConfig, config_from_dict
from .geometry import Box3D


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_box(rng: np.random.Generator, spread: float = 3.0) -> Box3D:
    return Box3D(
        *rng.uniform(-spread, spread, 3),
        *np.exp(rng.uniform(-0.7, 0.9, 3)),
        rng.uniform(-math.pi, math.pi),
    )


def _near_pair(rng: np.random.Generator) -> tuple[Box3D, Box3D]:
    a = _random_box(rng)
    b = Box3D(
        a.cx + rng.normal(0, 0.4 * a.l),
        a.cy + rng.normal(0, 0.4 * a.h),
        a.cz + rng.normal(0, 0.4 * a.w),
        a.l * math.exp(rng.normal(0, 0.25)),
        a.w * math.exp(rng.normal(0, 0.25)),
        a.h * math.exp(rng.normal(0, 0.25)),
        a.yaw + rng.normal(0, 0.6),
    )
    return a, b


def check_mc_iou_agreement(n_pairs: int = 500, n_samples: int = 100_000) -> CheckResult:
    """Exact clipped IoU vs seeded Monte-Carlo on random overlapping pairs."""
    t0 = time.time()
    rng = np.random.default_rng(20240501)
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < n_pairs:
        attempts += 1
        if attempts > n_pairs * 100:
            return CheckResult(
                "mc_iou_agreement", False, "could not sample enough overlapping pairs",
                time.time() - t0,
            )
        a, b = _near_pair(rng)
        exact = geom.iou3d(a, b)
        if exact <= 0.05:
            continue
        est = geom.iou3d_mc_oracle(a, b, n_samples, seed=checked).value
        worst = max(worst, abs(exact - est))
        checked += 1
    return CheckResult(
        "mc_iou_agreement",
        worst <= 0.01,
        f"{checked} pairs, worst |exact - mc| = {worst:.5f} (tol 0.01)",
        time.time() - t0,
    )


def check_geometry_closed_forms() -> CheckResult:
    t0 = time.time()
    failures = []
    box = Box3D(0, 0, 0, 1, 1, 1, 0)
    if geom.iou3d(box, box) != 1.0:
        failures.append("identity IoU != 1")
    # axis-aligned interval-product form on fuzzed pairs
    rng = np.random.default_rng(7)
    for k in range(2000):
        yaw_a = 0.0 if k % 2 == 0 else math.pi
        yaw_b = 0.0 if k % 3 == 0 else math.pi
        a = Box3D(*rng.uniform(-2, 2, 3), *np.exp(rng.uniform(-0.5, 0.5, 3)), yaw_a)
        b = Box3D(*rng.uniform(-2, 2, 3), *np.exp(rng.uniform(-0.5, 0.5, 3)), yaw_b)

        def seg(c, e, c2, e2):
            return max(0.0, min(c + e / 2, c2 + e2 / 2) - max(c - e / 2, c2 - e2 / 2))

        inter = (
            seg(a.cx, a.l, b.cx, b.l) * seg(a.cy, a.h, b.cy, b.h) * seg(a.cz, a.w, b.cz, b.w)
        )
        expected = inter / (a.volume + b.volume - inter)
        if abs(geom.iou3d(a, b) - expected) > 1e-12:
            failures.append(f"axis-aligned mismatch at case {k}")
            break
    rotated = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    octagon_area = 2.0 * (math.sqrt(2.0) - 1.0)
    expected = octagon_area / (2.0 - octagon_area)
    if abs(geom.iou3d(box, rotated) - expected) > 1e-6:
        failures.append("45-degree octagon case out of tolerance")
    return CheckResult(
        "geometry_closed_forms",
        not failures,
        "; ".join(failures) or "identity, axis-aligned fuzz (2000), 45-degree case",
        time.time() - t0,
    )


def _reference_component_update(teacher, student, gt, eps):
    """Deliberately plain re-implementation of the gated update."""
    out = []
    for t_box, s_box, g_box in zip(teacher, student, gt):
        t = [(t_box.cx, t_box.cy, t_box.cz), (t_box.l, t_box.w, t_box.h), t_box.yaw]
        s = [(s_box.cx, s_box.cy, s_box.cz), (s_box.l, s_box.w, s_box.h), s_box.yaw]
        g = [(g_box.cx, g_box.cy, g_box.cz), (g_box.l, g_box.w, g_box.h), g_box.yaw]
        chosen = []
        for x in range(3):
            if x < 2:
                tv = np.array(t[x]) - np.array(s[x])
                gv = np.array(g[x]) - np.array(s[x])
            else:
                tv = np.array([geom.wrap_angle(t[2] - s[2])])
                gv = np.array([geom.wrap_angle(g[2] - s[2])])
            nt, ng = np.linalg.norm(tv), np.linalg.norm(gv)
            if nt < eps:
                keep = True
            elif ng < eps:
                keep = False
            else:
                keep = float(np.dot(tv, gv) / (nt * ng)) > 0.0
            chosen.append(t[x] if keep else s[x])
        out.append(Box3D(*chosen[0], *chosen[1], chosen[2]))
    return out


def check_component_update_bruteforce(n_cases: int = 1000) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(11)
    eps = 1e-9
    for case in range(n_cases):
        n = int(rng.integers(1, 5))
        student = [_random_box(rng) for _ in range(n)]
        gt = [_random_box(rng) for _ in range(n)]
        teacher = []
        for j in range(n):
            t = _random_box(rng)
            # exercise the degeneracy rules
            roll = rng.uniform()
            if roll < 0.15:
                t = Box3D(*(student[j].cx, student[j].cy, student[j].cz),
                          t.l, t.w, t.h, t.yaw)
            elif roll < 0.30:
                gt[j] = Box3D(student[j].cx, student[j].cy, student[j].cz,
                              gt[j].l, gt[j].w, gt[j].h, gt[j].yaw)
            teacher.append(t)
        got = xgd_mod.positive_component_update(teacher, student, gt, eps)
        want = _reference_component_update(teacher, student, gt, eps)
        for g_box, w_box in zip(got, want):
            if g_box != w_box:
                return CheckResult(
                    "component_update_bruteforce",
                    False,
                    f"mismatch at case {case}: {g_box} vs {w_box}",
                    time.time() - t0,
                )
    return CheckResult(
        "component_update_bruteforce",
        True,
        f"{n_cases} random triplet lists match the reference exactly",
        time.time() - t0,
    )


def check_gate_soundness(n_cases: int = 100_000) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(13)
    eps = 1e-9
    k = 3
    student = rng.normal(size=(n_cases, k))
    teacher = student + rng.normal(scale=rng.uniform(1e-12, 2.0, size=(n_cases, 1)), size=(n_cases, k))
    gt = student + rng.normal(scale=rng.uniform(1e-12, 2.0, size=(n_cases, 1)), size=(n_cases, k))
    violations = 0
    for i in range(n_cases):
        decision = xgd_mod.component_gate(student[i], teacher[i], gt[i], eps)
        ts = teacher[i] - student[i]
        gs = gt[i] - student[i]
        if np.linalg.norm(ts) < eps:
            sound = decision.kept
        elif np.linalg.norm(gs) < eps:
            sound = not decision.kept
        else:
            sound = decision.kept == (float(np.dot(ts, gs)) > 0.0)
        if not sound:
            violations += 1
    return CheckResult(
        "gate_soundness",
        violations == 0,
        f"{n_cases} fuzzed triplets, {violations} violations",
        time.time() - t0,
    )


def check_cld_invariants() -> CheckResult:
    t0 = time.time()
    failures = []
    rng = np.random.default_rng(17)
    for _ in range(200):
        m, k_a, k_c = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        logits = cld_mod.LogitMap(rng.normal(0, 3, size=(m * k_a, k_c)), k_a=k_a)
        dist = cld_mod.unified_distribution(logits, tau=float(rng.uniform(0.2, 5.0)))
        if np.max(np.abs(dist.rows.sum(axis=1) - 1.0)) > 1e-12:
            failures.append("row sum off")
            break
        other = cld_mod.LogitMap(rng.normal(0, 3, size=(m * k_a, k_c)), k_a=k_a)
        if cld_mod.cld_loss(cld_mod.unified_distribution(other), dist) < -1e-12:
            failures.append("negative KL")
            break
        row_const = rng.normal(0, 5, size=(m, 1))
        shifted = cld_mod.LogitMap(
            (logits.flattened() + row_const).reshape(m * k_a, k_c), k_a=k_a
        )
        base = cld_mod.cld_loss(cld_mod.unified_distribution(other), cld_mod.unified_distribution(logits))
        moved = cld_mod.cld_loss(cld_mod.unified_distribution(other), cld_mod.unified_distribution(shifted))
        if abs(base - moved) > 1e-9:
            failures.append("shift invariance broken")
            break
    # frozen two-term reference value
    teacher = cld_mod.unified_distribution(cld_mod.LogitMap(np.zeros((1, 2)), k_a=1))
    student = cld_mod.unified_distribution(cld_mod.LogitMap(np.array([[math.log(3.0), 0.0]]), k_a=1))
    hand = 0.5 * math.log(2.0 / 3.0) + 0.5 * math.log(2.0)
    if abs(cld_mod.cld_loss(teacher, student) - hand) > 1e-6:
        failures.append(f"hand value mismatch: {cld_mod.cld_loss(teacher, student)} vs {hand}")
    # tau -> infinity flattens the distribution and kills the loss
    wide = cld_mod.LogitMap(rng.normal(0, 3, size=(4, 3)), k_a=2)
    other_wide = cld_mod.LogitMap(rng.normal(0, 3, size=(4, 3)), k_a=2)
    big_tau = cld_mod.unified_distribution(wide, tau=1e6)
    uniform = np.full_like(big_tau.rows, 1.0 / big_tau.rows.shape[1])
    if np.max(np.abs(big_tau.rows - uniform)) > 1e-5:
        failures.append("tau->inf not uniform")
    if cld_mod.cld_loss(cld_mod.unified_distribution(other_wide, tau=1e6), big_tau) > 1e-6:
        failures.append("tau->inf loss not vanishing")
    # highlighting: argmax of the unified row is the max-logit (anchor, class)
    for _ in range(100):
        lm = cld_mod.LogitMap(rng.normal(0, 2, size=(3 * 2, 4)), k_a=2)
        rows = cld_mod.unified_distribution(lm).rows
        if not np.array_equal(rows.argmax(axis=1), lm.flattened().argmax(axis=1)):
            failures.append("highlighting property broken")
            break
    return CheckResult(
        "cld_invariants",
        not failures,
        "; ".join(failures) or "row sums, KL sign, shift invariance, hand value, tau limit, highlighting",
        time.time() - t0,
    )


def check_cld_grad_fd(n_maps: int = 100) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(19)
    worst = 0.0
    for _ in range(n_maps):
        m, k_a, k_c = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        tau = float(rng.uniform(0.5, 3.0))
        teacher = cld_mod.unified_distribution(
            cld_mod.LogitMap(rng.normal(0, 2, size=(m * k_a, k_c)), k_a=k_a), tau
        )
        s_vals = rng.normal(0, 2, size=(m * k_a, k_c))
        analytic = cld_mod.cld_grad(teacher, cld_mod.LogitMap(s_vals, k_a=k_a), tau)
        h = 1e-5
        fd = np.zeros_like(s_vals)
        for i in range(s_vals.shape[0]):
            for j in range(k_c):
                up = s_vals.copy(); up[i, j] += h
                dn = s_vals.copy(); dn[i, j] -= h
                fd[i, j] = (
                    cld_mod.cld_loss(teacher, cld_mod.unified_distribution(cld_mod.LogitMap(up, k_a=k_a), tau))
                    - cld_mod.cld_loss(teacher, cld_mod.unified_distribution(cld_mod.LogitMap(dn, k_a=k_a), tau))
                ) / (2 * h)
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-30)
        worst = max(worst, rel)
    return CheckResult(
        "cld_grad_fd",
        worst < 1e-4,
        f"{n_maps} logit maps, worst rel err {worst:.2e} (tol 1e-4)",
        time.time() - t0,
    )


def check_codec_roundtrip(n_cases: int = 10_000) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(n_cases):
        box = _random_box(rng)
        anchor = _random_box(rng)
        back = anchors_mod.decode_box(anchors_mod.encode_box(box, anchor), anchor)
        err = float(np.max(np.abs(back.as_array()[:6] - box.as_array()[:6])))
        # yaw may round-trip to the equivalent angle across the wrap boundary
        err = max(err, abs(geom.wrap_angle(back.yaw - box.yaw)))
        worst = max(worst, err)
    return CheckResult(
        "codec_roundtrip",
        worst < 1e-9,
        f"{n_cases} random box/anchor pairs, worst error {worst:.2e}",
        time.time() - t0,
    )


def check_iou_grad_self_consistency(n_cases: int = 40) -> CheckResult:
    """Coarse and fine finite-difference steps must agree away from contact."""
    t0 = time.time()
    rng = np.random.default_rng(29)
    checked = 0
    worst = 0.0
    while checked < n_cases:
        a, b = _near_pair(rng)
        if not 0.15 < geom.iou3d(a, b) < 0.95:
            continue
        g1 = geom.iou3d_grad_fd(a, b, steps=np.full(7, 1e-3))
        g2 = geom.iou3d_grad_fd(a, b, steps=np.full(7, 1e-4))
        denom = max(np.linalg.norm(g1), np.linalg.norm(g2), 1e-12)
        if denom < 1e-6:
            continue
        rel = np.linalg.norm(g1 - g2) / denom
        worst = max(worst, rel)
        checked += 1
    return CheckResult(
        "iou_grad_self_consistency",
        worst < 1e-2,
        f"{checked} pairs, worst step-halving rel err {worst:.2e} (tol 1e-2)",
        time.time() - t0,
    )


def _small_training_config() -> ExperimentConfig:
    return config_from_dict(
        {
            "grid": {"x_range": [0.0, 14.4], "z_range": [0.0, 14.4], "cell": [1.2, 1.2]},
            "scene": {"n_objects": [2, 4], "border_margin": 1.8, "class_weights": []},
            "data": {"n_train_scenes": 2, "n_val_scenes": 1},
            "optimizer": {"epochs": 1},
            "seeds": [0],
        }
    )


def check_training_grad_fd(n_states: int = 5) -> CheckResult:
    """Assembled weight gradient vs end-to-end central differences.

    Distillation targets are frozen at the probe point because gate
    decisions are piecewise constant: the finite differences measure the
    active smooth piece of the loss, which is the quantity the assembled
    gradient represents.
    """
    t0 = time.time()
    cfg = _small_training_config()
    grid = build_anchor_grid(cfg.grid)
    thresholds = cfg.assignment_thresholds()
    rng = np.random.default_rng(31)
    worst = 0.0
    state = 0
    attempt = 0
    while state < n_states:
        attempt += 1
        if attempt > n_states * 20:
            return CheckResult(
                "training_grad_fd", False, "could not find smooth states", time.time() - t0
            )
        scene = sim_mod.generate_scene(int(rng.integers(1 << 30)), cfg.scene, grid)
        assignment = anchors_mod.assign_targets(
            grid, scene.gts, thresholds, dilation=cfg.foreground_dilation
        )
        if assignment.n_pos == 0:
            continue
        teacher = sim_mod.teacher_predict(scene, cfg.teacher_noise, grid, assignment)
        params = sim_mod.DetectorParams.init(int(rng.integers(1 << 30)), 16, grid.k_a, grid.k_c)
        params = sim_mod.DetectorParams(
            params.w_cls + rng.normal(0, 0.05, params.w_cls.shape),
            params.b_cls + rng.normal(0, 0.3, params.b_cls.shape),
            params.w_reg + rng.normal(0, 0.02, params.w_reg.shape),
            params.b_reg + rng.normal(0, 0.02, params.b_reg.shape),
        )
        flags = geom.GeometryFlags()
        out = sim_mod.student_forward(params, scene)
        _, dlog, ddel = sim_mod.total_loss_and_grad(
            out, teacher, scene, assignment, grid, cfg.loss, flags
        )
        if flags.gradient_clipped or flags.degenerate_union or flags.size_clamped:
            continue  # stay away from flagged non-smooth configurations
        n = scene.features.shape[0]
        grads = {
            "w_cls": scene.features.T @ dlog.reshape(n, -1),
            "b_cls": dlog.reshape(n, -1).sum(axis=0),
            "w_reg": scene.features.T @ ddel.reshape(n, -1),
            "b_reg": ddel.reshape(n, -1).sum(axis=0),
        }

        pos = assignment.positive_indices
        anchor_params = grid.anchor_params[pos]
        student_boxes0 = [
            Box3D.from_array(r)
            for r in anchors_mod.decode_deltas(out.deltas_flat[pos], anchor_params)
        ]
        teacher_boxes = [
            Box3D.from_array(r)
            for r in anchors_mod.decode_deltas(teacher.deltas_flat[pos], anchor_params)
        ]
        gt_boxes = [scene.gts[assignment.labels[i]][0] for i in pos]
        frozen_targets = xgd_mod.positive_component_update(
            teacher_boxes, student_boxes0, gt_boxes, cfg.loss.gate_eps,
            components=cfg.loss.xgd_components,
        )
        fg = sim_mod.cld_positions(assignment, grid, cfg.loss.cld_region)
        teacher_dist = cld_mod.unified_distribution(
            sim_mod.extract_logit_map(teacher, fg, grid.k_a), cfg.loss.tau
        )

        def loss_of(p: sim_mod.DetectorParams) -> float:
            o = sim_mod.student_forward(p, scene)
            value = sim_mod.base_loss(o, assignment, scene.gts, grid, cfg.loss)
            boxes = [
                Box3D.from_array(r)
                for r in anchors_mod.decode_deltas(o.deltas_flat[pos], anchor_params)
            ]
            value += cfg.loss.xgd_weight * xgd_mod.xgd_loss(
                boxes, frozen_targets, cfg.loss.xgd_normalization
            )
            student_dist = cld_mod.unified_distribution(
                sim_mod.extract_logit_map(o, fg, grid.k_a), cfg.loss.tau
            )
            value += cfg.loss.cld_weight * cld_mod.cld_loss(teacher_dist, student_dist)
            return value

        h = 1e-5
        an, fd = [], []
        for name in ("w_cls", "b_cls", "w_reg", "b_reg"):
            w = getattr(params, name)
            flat = w.reshape(-1)
            picks = rng.choice(flat.size, size=min(12, flat.size), replace=False)
            for k in picks:
                up = flat.copy(); up[k] += h
                dn = flat.copy(); dn[k] -= h
                pu = {f: getattr(params, f) for f in ("w_cls", "b_cls", "w_reg", "b_reg")}
                pd = dict(pu)
                pu[name] = up.reshape(w.shape)
                pd[name] = dn.reshape(w.shape)
                fd.append((loss_of(sim_mod.DetectorParams(**pu)) - loss_of(sim_mod.DetectorParams(**pd))) / (2 * h))
                an.append(grads[name].reshape(-1)[k])
        an_arr, fd_arr = np.array(an), np.array(fd)
        rel = np.linalg.norm(an_arr - fd_arr) / max(
            np.linalg.norm(an_arr), np.linalg.norm(fd_arr), 1e-30
        )
        worst = max(worst, rel)
        state += 1
    return CheckResult(
        "training_grad_fd",
        worst < 1e-2,
        f"{n_states} random states, worst rel l2 err {worst:.2e} (tol 1e-2)",
        time.time() - t0,
    )


def verify_suite(fast: bool = False) -> list[CheckResult]:
    """Run all oracle-backed checks; `fast` shrinks the sample counts."""
    if fast:
        checks = [
            check_mc_iou_agreement(n_pairs=40, n_samples=20_000),
            check_geometry_closed_forms(),
            check_component_update_bruteforce(n_cases=200),
            check_gate_soundness(n_cases=10_000),
            check_cld_invariants(),
            check_cld_grad_fd(n_maps=20),
            check_codec_roundtrip(n_cases=1_000),
            check_iou_grad_self_consistency(n_cases=10),
            check_training_grad_fd(n_states=2),
        ]
    else:
        checks = [
            check_mc_iou_agreement(),
            check_geometry_closed_forms(),
            check_component_update_bruteforce(),
            check_gate_soundness(),
            check_cld_invariants(),
            check_cld_grad_fd(),
            check_codec_roundtrip(),
            check_iou_grad_self_consistency(),
            check_training_grad_fd(),
        ]
    return checks
