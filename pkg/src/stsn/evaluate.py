"""Evaluation on reference frames and the temporal ablations.

All evaluations run the network on each clip's designated reference frame.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .metrics import map_at_05
from .model import stsn_forward, wrap_params
from .tensor import Tensor

__all__ = [
    "EvalConfig",
    "EvalReport",
    "ClipResult",
    "evaluate",
    "ablation_frame_count",
    "weight_profile",
    "offset_tracking",
]


@dataclass(frozen=True)
class EvalConfig:
    K_eval: int = 2
    temporal_stride: int = 1
    score_threshold: float = 0.05
    nms_threshold: float = 0.3
    iou_threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        for v in (self.score_threshold, self.nms_threshold, self.iou_threshold):
            if not 0.0 <= v <= 1.0:
                raise ValueError("thresholds must lie in [0, 1]")
        if self.K_eval < 0 or self.temporal_stride < 1:
            raise ValueError("K_eval must be >= 0 and temporal_stride >= 1")


@dataclass
class ClipResult:
    detections: list
    center_weights: np.ndarray  # [n_objects, 2K+1] weights at each gt centre cell
    center_offsets: np.ndarray  # [n_objects, 2K+1, 2] mean o4 (dy, dx) in pixels at the centre cell
    motions: np.ndarray  # [n_objects, 2K+1, 2] true centre displacement ref -> support (dy, dx)
    offset_magnitude: float  # mean |o4| over the whole map, feature cells


@dataclass
class EvalReport:
    mAP: float
    per_class_ap: dict
    K: int
    temporal_stride: int
    detections: list = field(default_factory=list)  # per clip
    weight_profile: list = field(default_factory=list)  # [(k, mean weight)]
    mean_offsets: list = field(default_factory=list)  # [(k, mean dy, mean dx)] pixels
    mean_offset_magnitude: float = 0.0
    clip_results: list = field(default_factory=list)


def center_cells(clip, t, config):
    s = config.head_stride
    h, w = config.feature_hw
    cells = []
    for cy, cx in clip.centers(t):
        cells.append((min(max(int(cy // s), 0), h - 1), min(max(int(cx // s), 0), w - 1)))
    return cells


def mean_kernel_offset(o4, i, j):
    """Mean (dy, dx) over the kernel taps of an offset field at cell (i, j)."""
    field_ = o4.data if isinstance(o4, Tensor) else np.asarray(o4)
    taps = field_[:, i, j].reshape(-1, 2)
    return taps.mean(axis=0)


def _eval_clip(clip, P, config, K, stride, ecfg):
    t = clip.reference_frame
    res = stsn_forward(
        clip.frames, t, config, P, K=K, temporal_stride=stride,
        score_threshold=ecfg.score_threshold, nms_threshold=ecfg.nms_threshold,
    )
    weights = res.weights.data
    cells = center_cells(clip, t, config)
    n, m = len(cells), len(res.indices)
    cw = np.zeros((n, m))
    co = np.zeros((n, m, 2))
    mv = np.zeros((n, m, 2))
    ref_c = clip.centers(t)
    for o, (i, j) in enumerate(cells):
        cw[o] = weights[:, i, j]
        for e, idx in enumerate(res.indices):
            co[o, e] = mean_kernel_offset(res.offsets[e], i, j) * config.head_stride
            mv[o, e] = clip.centers(idx)[o] - ref_c[o]
    mags = [np.hypot(o.data[0::2], o.data[1::2]).mean() for o in res.offsets]
    return ClipResult(res.detections, cw, co, mv, float(np.mean(mags)))


def evaluate(params, config, clips, eval_config=None):
    """mAP@0.5 plus weight and offset diagnostics at the reference frames."""
    ecfg = eval_config or EvalConfig()
    K, stride = ecfg.K_eval, ecfg.temporal_stride
    P = wrap_params(params)
    if ecfg.workers > 1:
        with ThreadPoolExecutor(ecfg.workers) as pool:
            results = list(pool.map(lambda c: _eval_clip(c, P, config, K, stride, ecfg), clips))
    else:
        results = [_eval_clip(c, P, config, K, stride, ecfg) for c in clips]
    dets = [r.detections for r in results]
    gts = [c.gt(c.reference_frame) for c in clips]
    mAP, per_class = map_at_05(dets, gts, ecfg.iou_threshold)
    ks = [j * stride for j in range(-K, K + 1)]
    all_w = np.concatenate([r.center_weights for r in results], axis=0)
    all_o = np.concatenate([r.center_offsets for r in results], axis=0)
    profile = [(k, float(all_w[:, e].mean())) for e, k in enumerate(ks)]
    offsets = [(k, float(all_o[:, e, 0].mean()), float(all_o[:, e, 1].mean())) for e, k in enumerate(ks)]
    return EvalReport(
        mAP=mAP,
        per_class_ap=per_class,
        K=K,
        temporal_stride=stride,
        detections=dets,
        weight_profile=profile,
        mean_offsets=offsets,
        mean_offset_magnitude=float(np.mean([r.offset_magnitude for r in results])),
        clip_results=results,
    )


def ablation_frame_count(params, config, clips, K_values, eval_config=None):
    """mAP at each K (same trained parameters) -> ``{K: mAP}``."""
    base = eval_config or EvalConfig()
    out = {}
    for K in K_values:
        out[K] = evaluate(params, config, clips, _with(base, K_eval=K)).mAP
    return out


def weight_profile(params, config, clips, K, eval_config=None):
    """Mean aggregation weight at gt object centres for each offset k -> ``[(k, w)]``."""
    base = eval_config or EvalConfig()
    return evaluate(params, config, clips, _with(base, K_eval=K)).weight_profile


def offset_tracking(report, min_motion=4.0, cos_threshold=0.5):
    """Fraction of (object, supporting frame) cases whose mean o4 points along the motion.

    Only cases whose true displacement is at least ``min_motion`` pixels count.
    Returns ``(fraction, number of cases)``; a zero offset scores as a miss.
    """
    hits = total = 0
    for r in report.clip_results:
        for o in range(r.motions.shape[0]):
            for e in range(r.motions.shape[1]):
                m = r.motions[o, e]
                norm_m = float(np.hypot(*m))
                if norm_m < min_motion:
                    continue
                v = r.center_offsets[o, e]
                norm_v = float(np.hypot(*v))
                cos = float(v @ m) / (norm_v * norm_m) if norm_v > 0 else 0.0
                total += 1
                hits += cos > cos_threshold
    return (hits / total if total else float("nan")), total


def _with(cfg, **kw):
    from dataclasses import replace

    return replace(cfg, **kw)
