"""Spatiotemporal sampling network forward graph.

Pipeline for a reference frame ``t``:

1. a small conv backbone maps every selected frame to features ``f``;
2. for each supporting frame ``t + k`` (the reference itself included) the
   sampling block concatenates ``f_t`` and ``f_{t+k}``, runs three
   deformable layers whose offsets are predicted from the running features,
   and a fourth deformable layer that resamples ``f_{t+k}`` itself;
3. the resampled maps are combined with per-pixel weights, a softmax over
   cosine similarities of their embeddings under a 3-layer subnet;
4. an anchor-free dense head predicts per-cell class scores and boxes.

Parameters are a flat ``{name: ndarray}`` dict; every forward call wraps them
as Tensors so one dict can serve any number of tapes.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .conv import ConvParams, ConvSpec, conv2d, deform_conv2d, offset_conv, offset_spec
from .metrics import Detection, nms
from .tensor import (
    Tensor,
    TensorError,
    add,
    channel_cosine,
    channel_slice,
    concat_channels,
    mul,
    relu,
    sigmoid,
    softmax_over_leading_axis,
)

__all__ = [
    "ModelConfig",
    "Predictions",
    "ForwardResult",
    "init_params",
    "wrap_params",
    "param_groups",
    "backbone_forward",
    "sampling_block",
    "subnet_embed",
    "aggregation_weights",
    "aggregate",
    "detection_head",
    "decode_detections",
    "supporting_frame_indices",
    "forward_predictions",
    "stsn_forward",
]

NUM_BLOCK_LAYERS = 4
COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    feature_channels: int = 32
    backbone_depth: int = 4
    head_stride: int = 4
    K: int = 1
    temporal_stride: int = 1
    num_classes: int = 3
    image_h: int = 64
    image_w: int = 64
    in_channels: int = 1
    subnet_channels: tuple = (16, 16, 64)
    head_channels: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "subnet_channels", tuple(int(c) for c in self.subnet_channels))
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.temporal_stride < 1:
            raise ValueError("temporal_stride must be >= 1")
        if self.feature_channels <= 0 or self.feature_channels % 2:
            raise ValueError("feature_channels must be a positive even number")
        if self.head_stride < 1 or self.head_stride & (self.head_stride - 1):
            raise ValueError("head_stride must be a power of two")
        n_down = self.head_stride.bit_length() - 1
        if self.backbone_depth < n_down + 1:
            raise ValueError(f"backbone_depth must be at least {n_down + 1} for head_stride {self.head_stride}")
        if self.image_h % self.head_stride or self.image_w % self.head_stride:
            raise ValueError("image size must be divisible by head_stride")
        if len(self.subnet_channels) != 3:
            raise ValueError("subnet needs exactly three layers")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def feature_hw(self):
        return self.image_h // self.head_stride, self.image_w // self.head_stride

    def backbone_strides(self):
        n_down = self.head_stride.bit_length() - 1
        return [1] + [2] * n_down + [1] * (self.backbone_depth - 1 - n_down)

    def to_dict(self):
        d = asdict(self)
        d["subnet_channels"] = list(self.subnet_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    # -- layer geometry ---------------------------------------------------

    def backbone_specs(self):
        c = self.feature_channels
        specs = []
        cin = self.in_channels
        for stride in self.backbone_strides():
            specs.append(ConvSpec(cin, c, 3, 3, stride=stride, pad=1))
            cin = c
        return specs

    def deform_specs(self):
        c = self.feature_channels
        return [ConvSpec(2 * c if layer == 0 else c, c, 3, 3, stride=1, pad=1) for layer in range(NUM_BLOCK_LAYERS)]

    def offset_input_channels(self):
        # o1 from the concatenation, o2..o4 from g1..g3
        c = self.feature_channels
        return [2 * c, c, c, c]

    def subnet_specs(self):
        c1, c2, c3 = self.subnet_channels
        return [
            ConvSpec(self.feature_channels, c1, 1, 1, pad=0),
            ConvSpec(c1, c2, 3, 3, pad=1),
            ConvSpec(c2, c3, 1, 1, pad=0),
        ]

    def head_specs(self):
        c, hc = self.feature_channels, self.head_channels
        return {
            "head.0": ConvSpec(c, hc, 3, 3, pad=1),
            "head.cls": ConvSpec(hc, self.num_classes, 1, 1, pad=0),
            "head.box": ConvSpec(hc, 4, 1, 1, pad=0),
        }

    def layer_specs(self):
        """Ordered ``{layer name: ConvSpec}`` for every parameterised layer."""
        specs = {}
        for i, s in enumerate(self.backbone_specs()):
            specs[f"backbone.{i}"] = s
        dspecs = self.deform_specs()
        for i, s in enumerate(dspecs):
            cin = self.offset_input_channels()[i]
            specs[f"sampling.offset.{i + 1}"] = offset_spec(ConvSpec(cin, s.out_channels, 3, 3, pad=1))
            specs[f"sampling.deform.{i + 1}"] = s
        for i, s in enumerate(self.subnet_specs()):
            specs[f"subnet.{i}"] = s
        specs.update(self.head_specs())
        return specs


PRIOR_PROBABILITY = 0.01


def init_params(config, seed=0):
    """He-normal conv weights, zero biases, zero offset predictors.

    The class logits start at the bias for a 1% prior so the dense BCE
    loss does not open with a flood of false positives.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, spec in config.layer_specs().items():
        shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        if name.startswith("sampling.offset"):
            w = np.zeros(shape)
        else:
            fan_in = spec.in_channels * spec.num_taps
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        b = np.zeros(spec.out_channels)
        if name == "head.cls":
            w *= 0.1
            b[:] = -np.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
        elif name == "head.box":
            w *= 0.1
        params[f"{name}.w"] = w.astype(dtype)
        params[f"{name}.b"] = b.astype(dtype)
    return params


def param_groups(params):
    """Group parameter names by component: backbone, offset convs, deform convs, subnet, head."""
    groups = {}
    for name in params:
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "sampling" else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


def wrap_params(params, requires_grad=False):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _conv_params(P, name):
    return ConvParams(P[f"{name}.w"], P[f"{name}.b"])


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        if x.dtype != dtype:
            return Tensor(x.data.astype(dtype))
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def backbone_forward(frame, P, config):
    """Per-frame features ``[c, H/stride, W/stride]``: 3x3 convs with relu."""
    want = (config.in_channels, config.image_h, config.image_w)
    if tuple(frame.dims) != want:
        raise TensorError(f"frame dims {list(frame.dims)} != {list(want)}")
    x = frame
    for i, spec in enumerate(config.backbone_specs()):
        x = relu(conv2d(x, spec, _conv_params(P, f"backbone.{i}")))
    return x


def sampling_block(f_t, f_supp, P, config, return_offsets=False):
    """Resample ``f_supp`` for the reference ``f_t``; returns g4 (and [o1..o4])."""
    if f_t.dims != f_supp.dims:
        raise TensorError(f"reference {list(f_t.dims)} and support {list(f_supp.dims)} dims differ")
    specs = config.deform_specs()
    offsets = []
    g = concat_channels(f_t, f_supp)
    for layer in range(1, NUM_BLOCK_LAYERS + 1):
        spec = specs[layer - 1]
        o = offset_conv(g, ConvSpec(g.dims[0], spec.out_channels, 3, 3, pad=1), _conv_params(P, f"sampling.offset.{layer}"))
        offsets.append(o)
        if layer < NUM_BLOCK_LAYERS:
            g = relu(deform_conv2d(g, o, spec, _conv_params(P, f"sampling.deform.{layer}")))
        else:
            # last layer samples the original supporting map
            g = deform_conv2d(f_supp, o, spec, _conv_params(P, f"sampling.deform.{layer}"))
    return (g, offsets) if return_offsets else g


def subnet_embed(g, P, config):
    """S(g): 1x1 -> 3x3 -> 1x1 convs, relu between."""
    s0, s1, s2 = config.subnet_specs()
    x = relu(conv2d(g, s0, _conv_params(P, "subnet.0")))
    x = relu(conv2d(x, s1, _conv_params(P, "subnet.1")))
    return conv2d(x, s2, _conv_params(P, "subnet.2"))


def aggregation_weights(g_ref, g_list, P, config, embeddings=None):
    """Per-pixel softmax over frames of cosine similarity between S-embeddings.

    ``g_list`` holds every resampled map in frame order, the reference's own
    ``g_{t,t}`` included. Returns a ``[len(g_list), h, w]`` Tensor.
    """
    if not g_list:
        raise TensorError("need at least one feature map to weight")
    for g in g_list:
        if g.dims != g_ref.dims:
            raise TensorError("all feature maps must share dims")
    if embeddings is None:
        embeddings = {}
    ref_emb = subnet_embed(g_ref, P, config)
    sims = []
    for g in g_list:
        key = id(g)
        if key not in embeddings:
            embeddings[key] = ref_emb if g is g_ref else subnet_embed(g, P, config)
        sims.append(channel_cosine(ref_emb, embeddings[key], COSINE_EPS))
    logits = sims[0] if len(sims) == 1 else concat_channels(*sims)
    return softmax_over_leading_axis(logits)


def aggregate(g_list, weights):
    """``g_agg(p) = sum_k w_k(p) g_k(p)``, weights broadcast over channels."""
    if len(g_list) != weights.dims[0]:
        raise TensorError(f"{len(g_list)} feature maps but {weights.dims[0]} weights")
    out = None
    for k, g in enumerate(g_list):
        term = mul(g, channel_slice(weights, k, k + 1))
        out = term if out is None else add(out, term)
    return out


@dataclass
class Predictions:
    logits: Tensor  # [num_classes, h, w]
    box: Tensor  # [4, h, w]: dx, dy (cells), log w, log h (cells)

    @property
    def scores(self):
        return sigmoid(self.logits)


def detection_head(g_agg, P, config):
    specs = config.head_specs()
    x = relu(conv2d(g_agg, specs["head.0"], _conv_params(P, "head.0")))
    logits = conv2d(x, specs["head.cls"], _conv_params(P, "head.cls"))
    box = conv2d(x, specs["head.box"], _conv_params(P, "head.box"))
    return Predictions(logits, box)


def decode_boxes(box, config):
    """Decode ``[4, h, w]`` regression into pixel boxes ``[h, w, 4]`` clipped to the image."""
    s = config.head_stride
    h, w = box.shape[1:]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = (jj + 0.5 + box[0]) * s
    cy = (ii + 0.5 + box[1]) * s
    bw = s * np.exp(np.clip(box[2], -10, 10))
    bh = s * np.exp(np.clip(box[3], -10, 10))
    x1 = np.clip(cx - bw / 2, 0, config.image_w)
    x2 = np.clip(cx + bw / 2, 0, config.image_w)
    y1 = np.clip(cy - bh / 2, 0, config.image_h)
    y2 = np.clip(cy + bh / 2, 0, config.image_h)
    return np.stack([x1, y1, x2, y2], axis=-1)


def decode_detections(predictions, score_threshold, config):
    """One Detection per (class, cell) whose score reaches ``score_threshold``."""
    scores = predictions.scores.data if isinstance(predictions, Predictions) else np.asarray(predictions[0])
    box = predictions.box.data if isinstance(predictions, Predictions) else np.asarray(predictions[1])
    boxes = decode_boxes(box, config)
    out = []
    for c, i, j in zip(*np.nonzero(scores >= score_threshold)):
        x1, y1, x2, y2 = (float(v) for v in boxes[i, j])
        if x2 > x1 and y2 > y1:
            out.append(Detection(int(c), float(scores[c, i, j]), (x1, y1, x2, y2)))
    return out


def supporting_frame_indices(t, K, temporal_stride, video_len):
    """``t + j * stride`` for ``j = -K..K``, clamped into the video (copy padding)."""
    if not 0 <= t < video_len:
        raise IndexError(f"reference frame {t} outside video of length {video_len}")
    return [min(max(t + j * temporal_stride, 0), video_len - 1) for j in range(-K, K + 1)]


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    detections: list
    weights: Tensor
    offsets: list  # o4 per entry of ``indices``
    predictions: Predictions
    indices: list
    raw_detections: list = field(default_factory=list)


def forward_predictions(frames, t, indices, P, config):
    """Run the network for reference ``t`` with supporting frames ``indices``.

    ``indices`` must contain ``t``; order defines the weight channel order.
    Features and sampled maps are computed once per distinct frame index.
    Returns ``(Predictions, weights, [o4 per index], [o1..o4 per index])``.
    """
    if t not in indices:
        raise ValueError("indices must include the reference frame")
    dtype = np.dtype(config.dtype)
    feats = {}

    def feature(i):
        if i not in feats:
            feats[i] = backbone_forward(_as_tensor(frames[i], dtype), P, config)
        return feats[i]

    f_t = feature(t)
    sampled = {}
    for i in indices:
        if i not in sampled:
            sampled[i] = sampling_block(f_t, feature(i), P, config, return_offsets=True)
    g_list = [sampled[i][0] for i in indices]
    weights = aggregation_weights(sampled[t][0], g_list, P, config)
    g_agg = aggregate(g_list, weights)
    preds = detection_head(g_agg, P, config)
    return preds, weights, [sampled[i][1][-1] for i in indices], [sampled[i][1] for i in indices]


def stsn_forward(frames, t, config, params, K=None, temporal_stride=None, score_threshold=0.05, nms_threshold=0.3):
    """Detections for frame ``t`` of ``frames`` ([T, C, H, W]) plus diagnostics."""
    if len(frames) < 1:
        raise ValueError("clip has no frames")
    K = config.K if K is None else K
    stride = config.temporal_stride if temporal_stride is None else temporal_stride
    indices = supporting_frame_indices(t, K, stride, len(frames))
    P = params if all(isinstance(v, Tensor) for v in params.values()) else wrap_params(params)
    preds, weights, o4, _ = forward_predictions(frames, t, indices, P, config)
    raw = decode_detections(preds, score_threshold, config)
    return ForwardResult(nms(raw, nms_threshold), weights, o4, preds, indices, raw)
