"""Detection loss, momentum SGD and the training loop."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import forward_predictions, wrap_params
from .tensor import NonFiniteError, Tape, add, record_op

__all__ = [
    "TrainConfig",
    "TrainingError",
    "build_targets",
    "bce_with_logits",
    "masked_l1",
    "detection_loss",
    "MomentumSGD",
    "sample_training_indices",
    "train",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss during training."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-2
    lr_steps: tuple = (2000,)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 3.0
    offset_lr_mult: float = 1.0  # learning-rate multiplier for the offset predictors
    K_train: int = 1
    lambda_cls: float = 1.0
    lambda_box: float = 1.0
    reference: str = "center"  # or "any"
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(int(s) for s in self.lr_steps))
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.offset_lr_mult < 0:
            raise ValueError("offset_lr_mult must be non-negative")
        if self.K_train < 0:
            raise ValueError("K_train must be >= 0")
        if self.reference not in ("center", "any"):
            raise ValueError("reference must be 'center' or 'any'")

    def lr_at(self, it):
        return self.lr * self.lr_decay ** sum(1 for s in self.lr_steps if it >= s)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def build_targets(gt, config):
    """Dense targets from ``[(class_id, (x1, y1, x2, y2)), ...]``.

    A cell is positive for a class iff a box centre of that class falls in
    it. Returns ``(cls [C,h,w], box [4,h,w], positive [h,w])``.
    """
    h, w = config.feature_hw
    s = config.head_stride
    cls_t = np.zeros((config.num_classes, h, w))
    box_t = np.zeros((4, h, w))
    pos = np.zeros((h, w), dtype=bool)
    for c, (x1, y1, x2, y2) in gt:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        i = min(max(int(math.floor(cy / s)), 0), h - 1)
        j = min(max(int(math.floor(cx / s)), 0), w - 1)
        cls_t[c, i, j] = 1.0
        box_t[:, i, j] = (cx / s - (j + 0.5), cy / s - (i + 0.5), math.log((x2 - x1) / s), math.log((y2 - y1) / s))
        pos[i, j] = True
    return cls_t, box_t, pos


def bce_with_logits(logits, target, normalizer=None):
    """Binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    Summed over every logit and divided by ``normalizer`` (default: the
    number of logits, i.e. the mean).
    """
    z = logits.data
    t = target.astype(z.dtype)
    # softplus(z) - t z, stable for either sign of z
    loss = np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z)))
    n = float(z.size if normalizer is None else normalizer)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return record_op(np.asarray(loss.sum() / n, dtype=z.dtype), (logits,), lambda g: (g * (sig - t) / n,))


def masked_l1(box, target, mask):
    """Sum over coordinates, mean over masked cells, of ``|box - target|``."""
    npos = int(mask.sum())
    b = box.data
    diff = b - target.astype(b.dtype)
    m = mask[None].astype(b.dtype)
    if npos == 0:
        return record_op(np.zeros((), dtype=b.dtype), (box,), lambda g: (np.zeros_like(b),))
    val = (np.abs(diff) * m).sum() / npos
    return record_op(np.asarray(val), (box,), lambda g: (g * np.sign(diff) * m / npos,))


def _scale(x, factor):
    return record_op(x.data * factor, (x,), lambda g: (g * factor,))


def detection_loss(predictions, gt, config, lambda_cls=1.0, lambda_box=1.0):
    """``lambda_cls * BCE + lambda_box * L1(box at positive cells)``.

    The BCE is summed over all class logits and divided by the number of
    positive cells, so a handful of objects is not drowned by background
    cells. With no objects it falls back to the mean over logits.
    """
    cls_t, box_t, pos = build_targets(gt, config)
    npos = int(pos.sum())
    cls_term = _scale(bce_with_logits(predictions.logits, cls_t, npos or None), lambda_cls)
    if not pos.any():
        return cls_term
    return add(cls_term, _scale(masked_l1(predictions.box, box_t, pos), lambda_box))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class MomentumSGD:
    """``v <- mu v + g;  p <- p - lr v`` (in place on the parameter arrays)."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0, lr_mult=None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_mult = lr_mult or {}
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        for k, p in self.params.items():
            step_lr = lr * self.lr_mult.get(k, 1.0)
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= (step_lr * v).astype(p.dtype)


def _clip_grads(grads, max_norm):
    if not max_norm:
        return grads, None
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def sample_training_indices(rng, clip, cfg):
    """Reference frame plus ``K_train`` random frames before it and after it.

    Supporting frames are drawn uniformly among the frames before and after
    the reference; with none available on a side, the reference is reused.
    """
    T = clip.num_frames
    t = clip.reference_frame if cfg.reference == "center" else int(rng.integers(T))
    before = [int(rng.integers(0, t)) if t > 0 else t for _ in range(cfg.K_train)]
    after = [int(rng.integers(t + 1, T)) if t < T - 1 else t for _ in range(cfg.K_train)]
    return t, sorted(before) + [t] + sorted(after)


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)


def train(params, clips, model_config, train_config, static_baseline=False, progress=None):
    """Train ``params`` (copied, not mutated) and return ``TrainResult``.

    ``static_baseline`` restricts every sample to the reference frame alone.
    """
    if not clips:
        raise ValueError("training set is empty")
    cfg = train_config
    if static_baseline:
        cfg = replace(cfg, K_train=0)
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    mult = {k: cfg.offset_lr_mult for k in params if k.startswith("sampling.offset.")}
    opt = MomentumSGD(params, cfg.momentum, cfg.weight_decay, lr_mult=mult)
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(model_config.dtype)
    losses = []
    for it in range(cfg.iterations):
        clip = clips[int(rng.integers(len(clips)))]
        t, indices = sample_training_indices(rng, clip, cfg)
        where = f"at iteration {it} (clip seed {clip.seed}, frames {indices})"
        # overflow is detected explicitly below, so numpy's warnings are noise
        with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            P = wrap_params(params, requires_grad=True)
            try:
                preds, _, _, _ = forward_predictions(clip.frames, t, indices, P, model_config)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite activations {where}: {exc}") from exc
            loss = detection_loss(preds, clip.gt(t), model_config, cfg.lambda_cls, cfg.lambda_box)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} {where}")
            gm = tape.backward(loss)
        grads = {k: gm[P[k]].data.astype(dtype, copy=False) for k in params}
        grads, _ = _clip_grads(grads, cfg.clip_norm)
        lr = cfg.lr_at(it)
        if lr > 0:
            opt.step(grads, lr)
        losses.append(value)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            window = losses[-cfg.log_every :]
            log.info("iter %d loss %.5f lr %g", it + 1, sum(window) / len(window), lr)
            if progress is not None:
                progress(it + 1, sum(window) / len(window))
    return TrainResult(params, losses)
