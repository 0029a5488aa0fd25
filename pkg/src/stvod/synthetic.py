"""Synthetic video clips: colored shapes on a dark background moving along
continuous trajectories, with the degradation phenomena that make video
frames hard for single-frame detectors (motion blur, partial occlusion,
defocus) applied to the current frame.

A clip is ``frames_per_clip`` frames, reference frames first and the
current frame last. Ground-truth boxes exactly bound each object's own
rendered mask before any degradation; degradations never touch the
annotations. Everything is a pure function of (config, seed).

On disk a clip is a directory of binary 8-bit P6 PPM frames plus
``annotations.jsonl`` (one JSON record per frame) and ``meta.json``;
datasets are ``clips/<id>/`` directories. Frames are quantized to the
8-bit grid at generation time so the disk round trip is bitwise exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .boxes import BoxCS

CLASS_NAMES = ("circle", "square", "triangle", "cross")
# base hue per class; objects carry the class's hue family (appearance is a
# class cue, like real video categories), jittered per instance
CLASS_HUES = (0.0, 0.33, 0.62, 0.15)
DEGRADATION_KINDS = ("motion_blur", "occlusion", "defocus")
MIN_VISIBLE_PIXELS = 4


def class_color(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """Sample an RGB color from the class's hue family."""
    import colorsys

    hue = (CLASS_HUES[class_id] + rng.uniform(-0.05, 0.05)) % 1.0
    sat = rng.uniform(0.65, 1.0)
    val = rng.uniform(0.7, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


class DatasetError(ValueError):
    """Raised for malformed dataset files; messages carry file and line."""


@dataclass
class GroundTruthBox:
    class_id: int
    box: BoxCS


@dataclass
class GenConfig:
    frame_size: int = 64
    frames_per_clip: int = 5
    min_objects: int = 1
    max_objects: int = 3
    min_half_extent: float = 7.0
    max_half_extent: float = 13.0
    max_speed: float = 1.5
    degradation_prob: float = 0.5
    kinds: tuple[str, ...] = DEGRADATION_KINDS

    def validate(self) -> None:
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be >= 1")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError(
                f"object count range [{self.min_objects}, {self.max_objects}] invalid"
            )
        if self.frame_size < 2 * self.max_half_extent + 4:
            raise ValueError("frame_size too small for the configured object sizes")
        for kind in self.kinds:
            if kind not in DEGRADATION_KINDS:
                raise ValueError(f"unknown degradation kind {kind!r}")


@dataclass
class SceneObject:
    class_id: int
    half_extent: float
    color: np.ndarray  # [3] in [0, 1]
    start: np.ndarray  # (x, y) at t=0, pixel units
    velocity: np.ndarray  # (vx, vy) pixels per frame
    wobble_amp: np.ndarray  # (ax, ay)
    wobble_freq: float
    wobble_phase: float

    def position(self, t: float) -> np.ndarray:
        wob = self.wobble_amp * np.sin(2 * np.pi * self.wobble_freq * t + self.wobble_phase)
        return self.start + self.velocity * t + wob

    def mask(self, t: float, height: int, width: int) -> np.ndarray:
        """Boolean occupancy of this object alone at frame t."""
        cx, cy = self.position(t)
        ys, xs = np.meshgrid(
            np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij"
        )
        r = self.half_extent
        name = CLASS_NAMES[self.class_id]
        if name == "circle":
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        if name == "square":
            return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= r
        if name == "triangle":
            verts = np.array(
                [
                    [cx, cy - r],
                    [cx + r * np.sqrt(3) / 2, cy + r / 2],
                    [cx - r * np.sqrt(3) / 2, cy + r / 2],
                ]
            )
            inside = np.ones_like(xs, dtype=bool)
            for i in range(3):
                ax, ay = verts[i]
                bx, by = verts[(i + 1) % 3]
                cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
                inside &= cross >= 0
            return inside
        if name == "cross":
            arm = r / 3.0
            horiz = (np.abs(ys - cy) <= arm) & (np.abs(xs - cx) <= r)
            vert = (np.abs(xs - cx) <= arm) & (np.abs(ys - cy) <= r)
            return horiz | vert
        raise ValueError(f"unknown shape class {self.class_id}")


@dataclass
class ClipSample:
    frames: list[np.ndarray]  # [3, H, W] float64 in [0, 1], 8-bit quantized
    annotations: list[list[GroundTruthBox]]
    degradations: list[str | None]
    seed: int
    current_index: int
    objects: list[SceneObject] = field(default_factory=list)


def _tight_box(mask: np.ndarray) -> BoxCS | None:
    ys, xs = np.nonzero(mask)
    if ys.size < MIN_VISIBLE_PIXELS:
        return None
    h, w = mask.shape
    x1, x2 = xs.min() / w, (xs.max() + 1) / w
    y1, y2 = ys.min() / h, (ys.max() + 1) / h
    return BoxCS((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def _random_object(cfg: GenConfig, rng: np.random.Generator) -> SceneObject:
    r = rng.uniform(cfg.min_half_extent, cfg.max_half_extent)
    class_id = int(rng.integers(len(CLASS_NAMES)))
    color = class_color(class_id, rng)
    margin = r + 1.0
    start = rng.uniform(margin, cfg.frame_size - margin, size=2)
    velocity = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
    if rng.random() < 0.5:
        amp = rng.uniform(0.0, cfg.max_speed, size=2)
    else:
        amp = np.zeros(2)
    return SceneObject(
        class_id=class_id,
        half_extent=r,
        color=color,
        start=start,
        velocity=velocity,
        wobble_amp=amp,
        wobble_freq=float(rng.uniform(0.05, 0.3)),
        wobble_phase=float(rng.uniform(0.0, 2 * np.pi)),
    )


def _quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0


def generate_clip(cfg: GenConfig, seed: int) -> ClipSample:
    """Render one clip deterministically from (config, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.frame_size
    background = rng.uniform(0.02, 0.18, size=3)
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = [_random_object(cfg, rng) for _ in range(n_objects)]

    frames: list[np.ndarray] = []
    annotations: list[list[GroundTruthBox]] = []
    degradations: list[str | None] = [None] * cfg.frames_per_clip
    current = cfg.frames_per_clip - 1
    current_velocities = []
    current_boxes_px: list[tuple[int, np.ndarray] | None] = []
    for t in range(cfg.frames_per_clip):
        frame = np.tile(background[:, None, None], (1, size, size))
        boxes: list[GroundTruthBox] = []
        for obj in objects:
            mask = obj.mask(t, size, size)
            box = _tight_box(mask)
            if box is not None:
                frame[:, mask] = obj.color[:, None]
                boxes.append(GroundTruthBox(class_id=obj.class_id, box=box))
            if t == current:
                current_velocities.append(obj.position(t) - obj.position(t - 1))
                if box is None:
                    current_boxes_px.append(None)
                else:
                    ys, xs = np.nonzero(mask)
                    current_boxes_px.append(
                        (obj.class_id, np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]))
                    )
        frames.append(frame)
        annotations.append(boxes)

    if rng.random() < cfg.degradation_prob and cfg.kinds:
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        params = _degradation_params(kind, current_velocities, current_boxes_px, rng)
        if params is not None:
            frames[current] = apply_degradation(frames[current], kind, params, rng)
            degradations[current] = kind

    frames = [_quantize(f) for f in frames]
    return ClipSample(
        frames=frames,
        annotations=annotations,
        degradations=degradations,
        seed=seed,
        current_index=current,
        objects=objects,
    )


def _degradation_params(kind, velocities, boxes_px, rng) -> dict | None:
    if kind == "motion_blur":
        if velocities:
            speeds = [float(np.hypot(*v)) for v in velocities]
            direction = velocities[int(np.argmax(speeds))]
        else:
            direction = np.array([1.0, 0.0])
        if np.hypot(*direction) < 1e-6:
            angle = rng.uniform(0, 2 * np.pi)
            direction = np.array([np.cos(angle), np.sin(angle)])
        return {"direction": tuple(direction), "length": int(rng.integers(9, 16))}
    if kind == "occlusion":
        candidates = [b for b in boxes_px if b is not None]
        if not candidates:
            return None
        areas = [(b[1][2] - b[1][0]) * (b[1][3] - b[1][1]) for b in candidates]
        target = candidates[int(np.argmax(areas))]
        # paint the occluder in another class's colors so it also misleads
        other = (target[0] + int(rng.integers(1, len(CLASS_NAMES)))) % len(CLASS_NAMES)
        return {
            "box_px": tuple(int(v) for v in target[1]),
            "color": class_color(other, rng),
        }
    if kind == "defocus":
        return {"radius": float(rng.uniform(2.5, 4.5))}
    raise ValueError(f"unknown degradation kind {kind!r}")


# ---------------------------------------------------------------------------
# degradations


def _wrap_blur(frame: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(frame)
    for c in range(frame.shape[0]):
        out[c] = ndimage.convolve(frame[c], kernel, mode="wrap")
    return out


def _line_kernel(direction, length: int) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.hypot(*d)
    half = length // 2
    size = 2 * half + 1
    kernel = np.zeros((size, size))
    for s in np.linspace(-half, half, 8 * size):
        x = int(round(half + s * d[0]))
        y = int(round(half + s * d[1]))
        kernel[y, x] += 1.0
    return kernel / kernel.sum()


def _disk_kernel(radius: float) -> np.ndarray:
    half = int(np.ceil(radius))
    ys, xs = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    kernel = (xs**2 + ys**2 <= radius**2).astype(np.float64)
    return kernel / kernel.sum()


def apply_degradation(
    frame: np.ndarray, kind: str, params: dict, rng: np.random.Generator
) -> np.ndarray:
    """Return a degraded copy of a [3, H, W] frame; annotations describe the
    underlying object and are never changed by degradation.

    motion_blur: box blur along the given direction (sum-1 kernel, wrap
    boundary, so constants pass through). occlusion: an opaque random-color
    rectangle covering at most 60% of the target object's pixel box.
    defocus: isotropic disk blur (sum-1 kernel, mean-preserving).
    """
    if kind == "motion_blur":
        return _wrap_blur(frame, _line_kernel(params["direction"], params["length"]))
    if kind == "defocus":
        return _wrap_blur(frame, _disk_kernel(params["radius"]))
    if kind == "occlusion":
        x1, y1, x2, y2 = params["box_px"]
        bw, bh = x2 - x1, y2 - y1
        max_area = 0.6 * bw * bh
        u = rng.uniform(0.4, 0.78)
        v = min(0.78, max_area / (bw * bh) / u)
        rw = max(1, int(bw * u))
        rh = max(1, int(bh * v))
        while rw * rh > max_area and rw * rh > 1:  # integer rounding can overshoot
            if rw >= rh:
                rw -= 1
            else:
                rh -= 1
        ox = int(rng.integers(x1, max(x1 + 1, x2 - rw + 1)))
        oy = int(rng.integers(y1, max(y1 + 1, y2 - rh + 1)))
        out = frame.copy()
        h, w = frame.shape[1:]
        color = params.get("color")
        if color is None:
            color = rng.uniform(0.0, 1.0, size=3)
        out[:, max(0, oy) : min(h, oy + rh), max(0, ox) : min(w, ox + rw)] = np.asarray(
            color
        )[:, None, None]
        return out
    raise ValueError(f"unknown degradation kind {kind!r}")


# ---------------------------------------------------------------------------
# PPM and clip I/O


def write_ppm(path: Path, frame: np.ndarray) -> None:
    """Write a [3, H, W] float frame as binary 8-bit P6."""
    data = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary P6 file into a [3, H, W] float frame in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(raw[start:i])
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 file (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    i += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw[i : i + 3 * w * h], dtype=np.uint8)
    if pixels.size != 3 * w * h:
        raise DatasetError(f"{path}: pixel payload truncated")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_clip(clip: ClipSample, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        write_ppm(directory / f"frame_{i:04d}.ppm", frame)
    with open(directory / "annotations.jsonl", "w") as fh:
        for i, boxes in enumerate(clip.annotations):
            record = {
                "frame": i,
                "boxes": [
                    {"class_id": b.class_id, "cx": b.box.cx, "cy": b.box.cy,
                     "w": b.box.w, "h": b.box.h}
                    for b in boxes
                ],
            }
            fh.write(json.dumps(record) + "\n")
    meta = {
        "seed": clip.seed,
        "current_index": clip.current_index,
        "degradations": clip.degradations,
        "frame_count": len(clip.frames),
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def _parse_annotation_line(path: Path, lineno: int, line: str, expect_frame: int):
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    if record.get("frame") != expect_frame:
        raise DatasetError(
            f"{path}:{lineno}: expected record for frame {expect_frame}, "
            f"got {record.get('frame')!r}"
        )
    boxes = []
    for entry in record.get("boxes", []):
        try:
            box = BoxCS(float(entry["cx"]), float(entry["cy"]),
                        float(entry["w"]), float(entry["h"]))
            class_id = int(entry["class_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed box record {entry!r}") from exc
        if not (0 < box.w < 1 and 0 < box.h < 1):
            raise DatasetError(f"{path}:{lineno}: box extents out of (0,1): {entry!r}")
        boxes.append(GroundTruthBox(class_id=class_id, box=box))
    return boxes


def read_clip(directory: Path) -> ClipSample:
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    n = int(meta["frame_count"])
    frames = [read_ppm(directory / f"frame_{i:04d}.ppm") for i in range(n)]
    ann_path = directory / "annotations.jsonl"
    lines = ann_path.read_text().splitlines()
    annotations = []
    for i in range(n):
        if i >= len(lines) or not lines[i].strip():
            raise DatasetError(f"{ann_path}:{i + 1}: missing record for frame {i}")
        annotations.append(_parse_annotation_line(ann_path, i + 1, lines[i], i))
    return ClipSample(
        frames=frames,
        annotations=annotations,
        degradations=list(meta["degradations"]),
        seed=int(meta["seed"]),
        current_index=int(meta["current_index"]),
    )


def generate_dataset(cfg: GenConfig, out_dir: Path, count: int, seed_start: int) -> list[Path]:
    """Write ``count`` clips under ``out_dir/clips/``; clip i uses seed
    ``seed_start + i``, so disjoint seed ranges give disjoint datasets."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        clip = generate_clip(cfg, seed_start + i)
        path = out_dir / "clips" / f"{i:04d}"
        write_clip(clip, path)
        paths.append(path)
    return paths


def load_dataset(data_dir: Path) -> list[ClipSample]:
    clips_dir = Path(data_dir) / "clips"
    if not clips_dir.is_dir():
        raise DatasetError(f"{data_dir}: no clips/ directory")
    return [read_clip(p) for p in sorted(clips_dir.iterdir()) if p.is_dir()]
