"""Sequence sources: synthetic clip generation, OTB-format directories, and
training-pair sampling.

Synthetic clips render a textured target on a textured background, moving on
a smooth random walk, with exact ground truth by construction. They are the
default training and evaluation corpus; real sequences enter through the
OTB-format loader at whatever scale is available locally.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import DataFormatError
from .geometry import Box, LabelSet, make_anchor_grid, make_label_set
from .patches import to_bchw
from .tracker import TrackerConfig, context_side, crop_template, crop_window

_IMG_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sequence:
    """Frames plus one ground-truth box per frame."""

    frames: list[np.ndarray]
    gt: list[Box]
    name: str = "sequence"

    def __post_init__(self) -> None:
        if len(self.frames) < 1 or len(self.frames) != len(self.gt):
            raise ValueError(
                f"sequence needs matching frame/annotation counts >= 1, got "
                f"{len(self.frames)}/{len(self.gt)}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames[0].shape[0], self.frames[0].shape[1]


@dataclass(frozen=True)
class SyntheticConfig:
    frame_h: int = 256
    frame_w: int = 256
    n_frames: int = 60
    target_size: float = 36.0
    target_aspect: float = 1.0
    target_shape: str = "rect"  # or "ellipse"
    texture_amp: float = 0.15
    background_cells: int = 8
    speed: float = 3.0
    inertia: float = 0.9
    size_drift: float = 0.01
    n_distractors: int = 1
    distractor_similarity: float = 0.0  # 0 = independent colors, 1 = target-colored
    occluder: bool = False
    illum_drift: float = 0.05
    contrast: float = 1.0  # 1 = fully saturated shapes, lower blends toward the background
    sensor_noise: float = 0.0  # per-frame i.i.d. gaussian pixel noise

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.target_shape not in ("rect", "ellipse"):
            raise ValueError(f"unknown target shape {self.target_shape!r}")
        if not (0.0 < self.contrast <= 1.0):
            raise ValueError("contrast must lie in (0, 1]")
        if not (0.0 <= self.distractor_similarity <= 1.0):
            raise ValueError("distractor similarity must lie in [0, 1]")
        if self.sensor_noise < 0:
            raise ValueError("sensor noise must be non-negative")
        margin = 2.0
        max_side = self.target_size * math.sqrt(max(self.target_aspect, 1 / self.target_aspect))
        if max_side + margin >= min(self.frame_h, self.frame_w):
            raise ValueError("target does not fit inside the frame")


def _smooth_noise(rng: np.random.Generator, cells: int, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.0, 1.0, size=(cells, cells, 3)).astype(np.float32)
    return cv2.resize(base, (w, h), interpolation=cv2.INTER_LINEAR)


def _saturated_color(rng: np.random.Generator) -> np.ndarray:
    hue = rng.uniform(0.0, 180.0)
    hsv = np.array([[[hue, 230.0, 230.0]]], dtype=np.float32)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return (rgb[0, 0] / 255.0).astype(np.float32)


class _MovingShape:
    """A colored, textured shape on a smooth bounded random walk."""

    def __init__(self, rng: np.random.Generator, cfg: SyntheticConfig, size: float):
        self.cfg = cfg
        self.w = size / math.sqrt(cfg.target_aspect)
        self.h = size * math.sqrt(cfg.target_aspect)
        margin_x, margin_y = self.w / 2 + 1.0, self.h / 2 + 1.0
        self.cx = rng.uniform(margin_x, cfg.frame_w - margin_x)
        self.cy = rng.uniform(margin_y, cfg.frame_h - margin_y)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        self.vx = math.cos(angle) * cfg.speed
        self.vy = math.sin(angle) * cfg.speed
        # low contrast pulls the shape toward the mid-gray background level
        self.color = 0.5 + cfg.contrast * (_saturated_color(rng) - 0.5)
        self.texture = (
            rng.uniform(-1.0, 1.0, size=(4, 4, 3)).astype(np.float32) * cfg.texture_amp
        )
        self.log_size = 0.0

    def advance(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        self.vx = cfg.inertia * self.vx + rng.normal(0.0, cfg.speed * 0.3)
        self.vy = cfg.inertia * self.vy + rng.normal(0.0, cfg.speed * 0.3)
        vcap = max(cfg.speed * 2.0, 1e-6)
        self.vx = float(np.clip(self.vx, -vcap, vcap))
        self.vy = float(np.clip(self.vy, -vcap, vcap))
        self.log_size = float(
            np.clip(self.log_size + rng.normal(0.0, cfg.size_drift), -0.25, 0.25)
        )
        self.cx += self.vx
        self.cy += self.vy
        # reflect so the box stays fully inside the frame
        w, h = self.size()
        min_x, max_x = w / 2 + 1.0, cfg.frame_w - w / 2 - 1.0
        min_y, max_y = h / 2 + 1.0, cfg.frame_h - h / 2 - 1.0
        if self.cx < min_x or self.cx > max_x:
            self.vx = -self.vx
            self.cx = float(np.clip(self.cx, min_x, max_x))
        if self.cy < min_y or self.cy > max_y:
            self.vy = -self.vy
            self.cy = float(np.clip(self.cy, min_y, max_y))

    def size(self) -> tuple[float, float]:
        s = math.exp(self.log_size)
        return self.w * s, self.h * s

    def box(self) -> Box:
        w, h = self.size()
        return Box.from_center(self.cx, self.cy, w, h)

    def draw(self, frame: np.ndarray) -> None:
        box = self.box()
        x0 = max(int(math.floor(box.x)), 0)
        y0 = max(int(math.floor(box.y)), 0)
        x1 = min(int(math.ceil(box.x2)), frame.shape[1])
        y1 = min(int(math.ceil(box.y2)), frame.shape[0])
        if x1 <= x0 or y1 <= y0:
            return
        ys = np.arange(y0, y1, dtype=np.float32) + 0.5
        xs = np.arange(x0, x1, dtype=np.float32) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        if self.cfg.target_shape == "ellipse":
            mask = ((gx - box.cx) / (box.w / 2)) ** 2 + ((gy - box.cy) / (box.h / 2)) ** 2 <= 1.0
        else:
            mask = (gx >= box.x) & (gx < box.x2) & (gy >= box.y) & (gy < box.y2)
        if not mask.any():
            return
        tex = cv2.resize(self.texture, (x1 - x0, y1 - y0), interpolation=cv2.INTER_LINEAR)
        region = frame[y0:y1, x0:x1]
        painted = np.clip(self.color[None, None, :] + tex, 0.0, 1.0)
        region[mask] = painted[mask]


def gen_synthetic_sequence(
    cfg: SyntheticConfig = SyntheticConfig(), seed: int = 0, name: str | None = None
) -> Sequence:
    """Deterministically generate one synthetic sequence for the given seed."""
    rng = np.random.default_rng(seed)
    background = 0.25 + 0.5 * _smooth_noise(rng, cfg.background_cells, cfg.frame_h, cfg.frame_w)
    target = _MovingShape(rng, cfg, cfg.target_size)
    distractors = []
    for _ in range(cfg.n_distractors):
        shape = _MovingShape(rng, cfg, cfg.target_size * rng.uniform(0.7, 1.2))
        sim = cfg.distractor_similarity
        shape.color = sim * target.color + (1.0 - sim) * shape.color
        distractors.append(shape)
    occluder = _MovingShape(rng, cfg, cfg.target_size * 0.9) if cfg.occluder else None
    illum_phase = rng.uniform(0.0, 2.0 * math.pi)

    frames: list[np.ndarray] = []
    gt: list[Box] = []
    for t in range(cfg.n_frames):
        if t > 0:
            target.advance(rng)
            for shape in distractors:
                shape.advance(rng)
            if occluder is not None:
                occluder.advance(rng)
        frame = background.copy()
        for shape in distractors:
            shape.draw(frame)
        target.draw(frame)
        if occluder is not None:
            occluder.draw(frame)
        if cfg.illum_drift > 0:
            gain = 1.0 + cfg.illum_drift * math.sin(2.0 * math.pi * t / 40.0 + illum_phase)
            frame = np.clip(frame * np.float32(gain), 0.0, 1.0)
        if cfg.sensor_noise > 0:
            noise = rng.normal(0.0, cfg.sensor_noise, size=frame.shape).astype(np.float32)
            frame = np.clip(frame + noise, 0.0, 1.0)
        frames.append(frame.astype(np.float32))
        gt.append(target.box())
    return Sequence(frames=frames, gt=gt, name=name or f"synthetic-{seed}")


def make_dataset(
    cfg: SyntheticConfig, n_sequences: int, seed: int = 0, name_prefix: str = "synthetic"
) -> list[Sequence]:
    """A list of sequences with per-sequence seeds derived from `seed`."""
    return [
        gen_synthetic_sequence(cfg, seed=seed + i, name=f"{name_prefix}-{seed + i:03d}")
        for i in range(n_sequences)
    ]


# ---------------------------------------------------------------------------
# OTB-format directories


def _frame_sort_key(path: Path):
    digits = re.sub(r"\D", "", path.stem)
    return (int(digits) if digits else 0, path.name)


def load_otb_sequence(directory) -> Sequence:
    """Load `img/` frames and `groundtruth_rect.txt` annotations.

    Annotation lines are "x,y,w,h" (comma, tab, or space separated) with a
    1-based pixel origin, converted to this package's 0-based convention.
    """
    directory = Path(directory)
    img_dir = directory / "img"
    gt_file = directory / "groundtruth_rect.txt"
    if not img_dir.is_dir():
        raise DataFormatError(f"{directory} has no img/ subdirectory")
    if not gt_file.is_file():
        raise DataFormatError(f"{directory} has no groundtruth_rect.txt")
    paths = sorted(
        (p for p in img_dir.iterdir() if p.suffix.lower() in _IMG_EXTENSIONS),
        key=_frame_sort_key,
    )
    boxes: list[Box] = []
    for lineno, line in enumerate(gt_file.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = [p for p in re.split(r"[,\t ]+", line.strip()) if p]
        try:
            x, y, w, h = (float(p) for p in parts)
        except ValueError as exc:
            raise DataFormatError(
                f"{gt_file}:{lineno}: cannot parse annotation line {line!r}"
            ) from exc
        boxes.append(Box(x - 1.0, y - 1.0, w, h))
    if len(paths) != len(boxes):
        raise DataFormatError(
            f"{directory}: {len(paths)} frames but {len(boxes)} annotation lines"
        )
    frames = []
    for p in paths:
        img = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise DataFormatError(f"cannot decode image {p}")
        if img.ndim == 2:
            img = cv2.cvtColor(img, cv2.COLOR_GRAY2BGR)
        img = cv2.cvtColor(img[:, :, :3], cv2.COLOR_BGR2RGB)
        scale = 65535.0 if img.dtype == np.uint16 else 255.0
        frames.append((img.astype(np.float32) / scale))
    return Sequence(frames=frames, gt=boxes, name=directory.name)


def save_otb_sequence(seq: Sequence, directory) -> None:
    """Write a sequence as an OTB-format directory with lossless 16-bit frames."""
    directory = Path(directory)
    (directory / "img").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (frame, box) in enumerate(zip(seq.frames, seq.gt), start=1):
        bgr = cv2.cvtColor(
            np.round(np.asarray(frame, dtype=np.float64) * 65535.0).astype(np.uint16),
            cv2.COLOR_RGB2BGR,
        )
        cv2.imwrite(str(directory / "img" / f"{i:04d}.png"), bgr)
        lines.append(f"{box.x + 1.0},{box.y + 1.0},{box.w},{box.h}")
    (directory / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# training pairs


@dataclass
class TrainingPair:
    """One clean template/search pair with labels in search-patch coordinates."""

    template: np.ndarray
    search: np.ndarray
    labels: LabelSet
    gt_in_patch: Box


def sample_training_pairs(
    sequences: list[Sequence],
    batch_size: int,
    frame_gap: int,
    rng,
    tracker_cfg: TrackerConfig = TrackerConfig(),
    shift_jitter: float = 0.12,
    scale_jitter: float = 0.18,
    max_retries: int = 20,
) -> list[TrainingPair]:
    """Draw template/search pairs within a bounded frame gap.

    The search crop center and scale are jittered so targets are not always
    patch-centered; pairs whose target leaves the crop are resampled, with a
    bounded retry budget.
    """
    if not sequences or all(len(s) < 1 for s in sequences):
        raise ValueError("need at least one non-empty sequence")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    grid = make_anchor_grid(tracker_cfg.anchor_config())
    pairs: list[TrainingPair] = []
    attempts = 0
    while len(pairs) < batch_size:
        if attempts > max_retries * batch_size + batch_size:
            raise DataFormatError("could not sample enough valid training pairs")
        attempts += 1
        seq = sequences[int(rng.integers(len(sequences)))]
        i = int(rng.integers(len(seq)))
        lo, hi = max(0, i - frame_gap), min(len(seq) - 1, i + frame_gap)
        j = int(rng.integers(lo, hi + 1))
        gt_j = seq.gt[j]

        side = context_side(gt_j) * (tracker_cfg.search_size / tracker_cfg.template_size)
        side *= math.exp(rng.uniform(-scale_jitter, scale_jitter))
        cx = gt_j.cx + rng.uniform(-shift_jitter, shift_jitter) * side
        cy = gt_j.cy + rng.uniform(-shift_jitter, shift_jitter) * side
        search, mapping = crop_window(seq.frames[j], cx, cy, side, tracker_cfg.search_size)
        gt_in_patch = mapping.to_patch_box(gt_j)
        s = tracker_cfg.search_size
        if not gt_in_patch.intersects(Box(0, 0, s, s)) or min(gt_in_patch.w, gt_in_patch.h) < 2.0:
            continue
        template = crop_template(seq.frames[i], seq.gt[i], tracker_cfg.template_size)
        labels = make_label_set(grid, gt_in_patch, tracker_cfg.pos_iou, tracker_cfg.neg_iou)
        pairs.append(
            TrainingPair(template=template, search=search, labels=labels, gt_in_patch=gt_in_patch)
        )
    return pairs


def pairs_to_tensors(
    pairs: list[TrainingPair], dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor, list[LabelSet]]:
    z = to_bchw([p.template for p in pairs], dtype)
    x = to_bchw([p.search for p in pairs], dtype)
    return z, x, [p.labels for p in pairs]
