"""Synthetic test bench for response-level distillation of anchor-based
3D detectors: exact rotated-box geometry, component-gated box distillation,
cross-anchor logit distillation, a trainable toy detector pair, and
40-recall-point average-precision evaluation."""

from .anchors import (
    AnchorGrid,
    Assignment,
    BoxDelta,
    ClassSpec,
    GridConfig,
    assign_targets,
    build_anchor_grid,
    decode_box,
    encode_box,
    foreground_mask,
)
from .cld import (
    LogitMap,
    UnifiedDistribution,
    classical_logit_distill,
    cld_grad,
    cld_loss,
    unified_distribution,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    default_config,
    load_config,
)
from .evaluation import Detection, EvalReport, ap_r40, decode_and_nms
from .geometry import (
    Box3D,
    ConvexPolygon2D,
    GeometryFlags,
    bev_iou,
    bev_polygon,
    convex_clip,
    iou3d,
    iou3d_grad_fd,
    iou3d_mc_oracle,
    polygon_area,
    wrap_angle,
)
from .sim import (
    DetectorOutputs,
    DetectorParams,
    LossConfig,
    NoiseProfile,
    Scene,
    SceneConfig,
    base_loss,
    generate_scene,
    replace_outputs,
    student_forward,
    teacher_predict,
    total_loss,
    train,
)
from .xgd import (
    BoxComponents,
    ComponentGate,
    GateDecision,
    component_gate,
    positive_component_update,
    xgd_loss,
    xgd_loss_grad,
)

__version__ = "0.1.0"
