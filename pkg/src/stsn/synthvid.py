"""Synthetic moving-shape videos with a degraded reference frame.

Each clip holds 1-3 shapes (disk, square, triangle) drifting with constant
integer velocity and bouncing off the borders. The designated reference
frame (the clip centre) is optionally occluded and/or blurred, while every
other frame stays clean, so a detector only recovers the occluded object by
looking at neighbouring frames.

Dataset layout on disk::

    DIR/manifest.json      clip records, boxes as CSV rows
    DIR/clip_0000.stsn     frames tensor, little-endian float32 + CRC32
"""

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

__all__ = [
    "SHAPES",
    "ClipConfig",
    "Clip",
    "DatasetError",
    "generate_clip",
    "generate_dataset",
    "render_object",
    "apply_degradation",
    "write_tensor",
    "read_tensor",
    "write_dataset",
    "read_dataset",
]

SHAPES = ("disk", "square", "triangle")

MAGIC = b"STSN"
TENSOR_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST = "manifest.json"


class DatasetError(IOError):
    """Malformed manifest, truncated tensor file or checksum mismatch."""


@dataclass(frozen=True)
class ClipConfig:
    frames: int = 9
    image_h: int = 64
    image_w: int = 64
    num_objects: tuple = (1, 3)
    half_size: tuple = (5, 8)
    velocity: tuple = (1.0, 4.0)  # speed range, pixels per frame
    occlusion_prob: float = 0.7
    blur_prob: float = 0.5
    noise_std: float = 0.03
    occlusion_coverage: tuple = (0.5, 0.7)
    identical_frames: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("clip needs at least one frame")
        for p in (self.occlusion_prob, self.blur_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.num_objects
        if not 1 <= lo <= hi <= 3:
            raise ValueError("num_objects must lie within 1..3")
        if self.velocity[0] < 0 or self.velocity[1] < self.velocity[0]:
            raise ValueError("bad velocity range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def reference_frame(self):
        return self.frames // 2


@dataclass
class Clip:
    frames: np.ndarray  # [T, 1, H, W] float32 in [0, 1]
    boxes: np.ndarray  # [T, n, 4] (x1, y1, x2, y2)
    classes: np.ndarray  # [n] int
    motion: np.ndarray  # [T - 1, n, 2] (dy, dx): centre(t + 1) - centre(t)
    degraded: np.ndarray  # [T] bool
    reference_frame: int
    background: float = 0.0
    occluders: dict = field(default_factory=dict)  # frame -> (x1, y1, x2, y2)
    seed: int = 0

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def gt(self, t):
        """``[(class_id, box), ...]`` at frame ``t``."""
        return [(int(c), tuple(float(v) for v in b)) for c, b in zip(self.classes, self.boxes[t])]

    def centers(self, t):
        """Object centres ``[n, 2]`` as (y, x)."""
        b = self.boxes[t]
        return np.stack([(b[:, 1] + b[:, 3]) / 2, (b[:, 0] + b[:, 2]) / 2], axis=1)

    def equals(self, other):
        return (
            np.array_equal(self.frames, other.frames)
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.motion, other.motion)
            and np.array_equal(self.degraded, other.degraded)
            and self.reference_frame == other.reference_frame
            and self.background == other.background
            and self.occluders == other.occluders
        )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_object(shape, cy, cx, r, h, w):
    """Boolean mask of a shape centred at integer (cy, cx) with half-size r.

    Pixel centres are tested, so the mask's bounding rectangle is exactly
    ``[cx - r, cy - r, cx + r, cy + r]`` for every shape.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    py = yy + 0.5 - cy
    px = xx + 0.5 - cx
    if shape == "disk":
        return py * py + px * px <= r * r
    if shape == "square":
        return (np.abs(py) <= r) & (np.abs(px) <= r)
    if shape == "triangle":
        # apex up; half a pixel of slack so the apex row is drawn
        half_width = (py + r) / 2.0
        return (py >= -r) & (py <= r) & (np.abs(px) <= half_width + 0.5)
    raise ValueError(f"unknown shape {shape!r}")


def _box(cy, cx, r):
    return np.array([cx - r, cy - r, cx + r, cy + r], dtype=np.float64)


def _sample_velocity(rng, lo, hi):
    for _ in range(1000):
        v = rng.integers(-int(np.ceil(hi)), int(np.ceil(hi)) + 1, size=2)
        speed = float(np.hypot(*v))
        if lo <= speed <= hi and speed > 0:
            return v
    raise ValueError("velocity range admits no integer vector")


def _spawn(cfg, rng):
    n = int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1))
    objs = []
    for _ in range(n):
        for _attempt in range(200):
            r = int(rng.integers(cfg.half_size[0], cfg.half_size[1] + 1))
            if 2 * r >= min(cfg.image_h, cfg.image_w):
                break
            cy = int(rng.integers(r, cfg.image_h - r + 1))
            cx = int(rng.integers(r, cfg.image_w - r + 1))
            # keep spawn boxes at least 2 px apart
            if all(abs(cy - o["cy"]) >= r + o["r"] + 2 or abs(cx - o["cx"]) >= r + o["r"] + 2 for o in objs):
                objs.append({"cy": cy, "cx": cx, "r": r})
                break
        else:
            raise ValueError("unsatisfiable spawn: objects do not fit in the frame")
    if len(objs) < n:
        raise ValueError("unsatisfiable spawn: objects do not fit in the frame")
    for o in objs:
        o["cls"] = int(rng.integers(0, len(SHAPES)))
        o["v"] = _sample_velocity(rng, *cfg.velocity)
        o["intensity"] = float(rng.uniform(0.6, 1.0))
    return objs


def _step(pos, vel, lo, hi):
    p = pos + vel
    if p < lo:
        p, vel = 2 * lo - p, -vel
    elif p > hi:
        p, vel = 2 * hi - p, -vel
    return p, vel


def _trajectories(objs, cfg):
    T = cfg.frames
    centres = np.zeros((T, len(objs), 2), dtype=np.int64)
    for k, o in enumerate(objs):
        cy, cx = o["cy"], o["cx"]
        vy, vx = int(o["v"][0]), int(o["v"][1])
        r = o["r"]
        for t in range(T):
            centres[t, k] = (cy, cx)
            if cfg.identical_frames:
                continue
            cy, vy = _step(cy, vy, r, cfg.image_h - r)
            cx, vx = _step(cx, vx, r, cfg.image_w - r)
    return centres


def apply_degradation(frame, kind, seed, box=None, background=0.0, coverage=None):
    """Blur or occlude one frame ([H, W] or [1, H, W]); output clamped to [0, 1].

    ``blur``: a 5x5 box filter applied twice with reflective borders.
    ``occlusion``: a rectangle filled with ``background`` covering a fraction
    ``coverage`` (default drawn from [0.5, 0.7]) of ``box``, entering from a
    random side and spanning the box fully in the other direction.
    Returns ``(frame, occluder_rect_or_None)``.
    """
    arr = np.asarray(frame)
    img = arr[0] if arr.ndim == 3 else arr
    img = img.astype(np.float64)
    rng = np.random.default_rng(seed)
    rect = None
    if kind == "blur":
        img = uniform_filter(uniform_filter(img, size=5, mode="reflect"), size=5, mode="reflect")
    elif kind == "occlusion":
        if box is None:
            raise ValueError("occlusion needs the target box")
        frac = float(rng.uniform(0.5, 0.7)) if coverage is None else float(coverage)
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        side = int(rng.integers(0, 4))
        bw, bh = x2 - x1, y2 - y1
        if side == 0:  # from the left
            rect = (x1 - 1, y1 - 1, x1 + int(np.ceil(frac * bw)), y2 + 1)
        elif side == 1:  # from the right
            rect = (x2 - int(np.ceil(frac * bw)), y1 - 1, x2 + 1, y2 + 1)
        elif side == 2:  # from the top
            rect = (x1 - 1, y1 - 1, x2 + 1, y1 + int(np.ceil(frac * bh)))
        else:
            rect = (x1 - 1, y2 - int(np.ceil(frac * bh)), x2 + 1, y2 + 1)
        h, w = img.shape
        rx1, ry1 = max(rect[0], 0), max(rect[1], 0)
        rx2, ry2 = min(rect[2], w), min(rect[3], h)
        img[ry1:ry2, rx1:rx2] = background
        rect = (rx1, ry1, rx2, ry2)
    else:
        raise ValueError(f"unknown degradation {kind!r}")
    img = np.clip(img, 0.0, 1.0)
    out = img[None] if arr.ndim == 3 else img
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64), rect


def generate_clip(config):
    """Render one clip; fully determined by ``config.seed``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    objs = _spawn(cfg, rng)
    background = float(rng.uniform(0.05, 0.3))
    centres = _trajectories(objs, cfg)
    T, H, W = cfg.frames, cfg.image_h, cfg.image_w
    frames = np.empty((T, 1, H, W), dtype=np.float64)
    boxes = np.zeros((T, len(objs), 4))
    for t in range(T):
        img = np.full((H, W), background)
        for k, o in enumerate(objs):
            cy, cx = centres[t, k]
            img[render_object(SHAPES[o["cls"]], cy, cx, o["r"], H, W)] = o["intensity"]
            boxes[t, k] = _box(cy, cx, o["r"])
        if cfg.identical_frames and t > 0:
            frames[t] = frames[0]
            continue
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
        frames[t, 0] = np.clip(img, 0.0, 1.0)
    degraded = np.zeros(T, dtype=bool)
    occluders = {}
    ref = cfg.reference_frame
    do_occ = rng.random() < cfg.occlusion_prob
    do_blur = rng.random() < cfg.blur_prob
    if do_occ:
        target = int(rng.integers(0, len(objs)))
        frames[ref], rect = apply_degradation(
            frames[ref], "occlusion", int(rng.integers(2**31)), box=boxes[ref, target], background=background,
            coverage=float(rng.uniform(*cfg.occlusion_coverage)),
        )
        occluders[ref] = tuple(int(v) for v in rect)
        degraded[ref] = True
    if do_blur:
        frames[ref], _ = apply_degradation(frames[ref], "blur", 0)
        degraded[ref] = True
    if cfg.identical_frames and degraded[ref]:
        frames[:] = frames[ref]
        degraded[:] = True
    motion = (centres[1:] - centres[:-1]).astype(np.float64)
    return Clip(
        frames=frames.astype(np.float32),
        boxes=boxes,
        classes=np.array([o["cls"] for o in objs], dtype=np.int64),
        motion=motion,
        degraded=degraded,
        reference_frame=ref,
        background=background,
        occluders=occluders,
        seed=cfg.seed,
    )


def generate_dataset(config, num_clips, base_seed=None):
    """Clips seeded ``base_seed + i``."""
    base = config.seed if base_seed is None else base_seed
    return [generate_clip(replace(config, seed=base + i)) for i in range(num_clips)]


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def write_tensor(path, array):
    """Header (magic, u16 version, u16 rank, u32 dims), float32 LE payload, CRC32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<HH", TENSOR_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload + struct.pack("<I", zlib.crc32(payload)))


def read_tensor(path):
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise DatasetError(f"{path}: not an STSN tensor file")
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != TENSOR_VERSION:
        raise DatasetError(f"{path}: unsupported tensor version {version}")
    start = 8 + 4 * rank
    if len(data) < start:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(data) != start + nbytes + 4:
        raise DatasetError(f"{path}: truncated or oversized payload")
    payload = data[start : start + nbytes]
    (crc,) = struct.unpack_from("<I", data, start + nbytes)
    if zlib.crc32(payload) != crc:
        raise DatasetError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _clip_record(i, clip):
    rows = []
    for t in range(clip.num_frames):
        for c, b in zip(clip.classes, clip.boxes[t]):
            rows.append(",".join([str(t), str(int(c))] + [repr(float(v)) for v in b]))
    motion = []
    for t in range(clip.motion.shape[0]):
        for k in range(clip.motion.shape[1]):
            dy, dx = clip.motion[t, k]
            motion.append(f"{t},{k},{float(dy)!r},{float(dx)!r}")
    return {
        "file": f"clip_{i:04d}.stsn",
        "frames": clip.num_frames,
        "dims": list(clip.frames.shape),
        "objects": int(len(clip.classes)),
        "boxes": rows,
        "motion": motion,
        "degraded": [int(d) for d in clip.degraded],
        "reference_frame": clip.reference_frame,
        "background": clip.background,
        "occluders": {str(t): list(r) for t, r in clip.occluders.items()},
        "seed": clip.seed,
    }


def write_dataset(clips, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, clip in enumerate(clips):
        rec = _clip_record(i, clip)
        write_tensor(d / rec["file"], clip.frames)
        records.append(rec)
    manifest = {
        "format": "stsn-synthvid",
        "version": MANIFEST_VERSION,
        "clip_count": len(clips),
        "dims": list(clips[0].frames.shape) if clips else [],
        "clips": records,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _parse_clip(d, rec):
    frames = read_tensor(d / rec["file"])
    T, n = int(rec["frames"]), int(rec["objects"])
    if list(frames.shape) != list(rec["dims"]) or frames.shape[0] != T:
        raise DatasetError(f"{rec['file']}: dims disagree with manifest")
    boxes = np.zeros((T, n, 4))
    classes = np.zeros(n, dtype=np.int64)
    if len(rec["boxes"]) != T * n:
        raise DatasetError(f"{rec['file']}: expected {T * n} box rows")
    for idx, row in enumerate(rec["boxes"]):
        parts = row.split(",")
        if len(parts) != 6:
            raise DatasetError(f"bad box row {row!r}")
        t, c = int(parts[0]), int(parts[1])
        k = idx % n
        boxes[t, k] = [float(v) for v in parts[2:]]
        classes[k] = c
    motion = np.zeros((max(T - 1, 0), n, 2))
    for row in rec["motion"]:
        t, k, dy, dx = row.split(",")
        motion[int(t), int(k)] = (float(dy), float(dx))
    return Clip(
        frames=frames,
        boxes=boxes,
        classes=classes,
        motion=motion,
        degraded=np.array(rec["degraded"], dtype=bool),
        reference_frame=int(rec["reference_frame"]),
        background=float(rec["background"]),
        occluders={int(t): tuple(r) for t, r in rec["occluders"].items()},
        seed=int(rec["seed"]),
    )


def read_dataset(directory):
    d = Path(directory)
    path = d / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest in {d}")
    try:
        manifest = json.loads(path.read_text())
        if manifest.get("format") != "stsn-synthvid" or manifest.get("version") != MANIFEST_VERSION:
            raise DatasetError("unrecognised manifest format/version")
        records = manifest["clips"]
        if len(records) != manifest["clip_count"]:
            raise DatasetError("clip_count disagrees with records")
        return [_parse_clip(d, rec) for rec in records]
    except DatasetError:
        raise
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise DatasetError(f"malformed manifest: {exc}") from exc
    except OSError as exc:
        raise DatasetError(str(exc)) from exc
