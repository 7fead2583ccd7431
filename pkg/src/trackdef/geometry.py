"""Boxes, anchor grids, and label/target encoding shared by the tracker, losses,
attacks, and evaluation.

Coordinates are pixel units with the origin at the top-left image corner.
Boxes are stored in corner form (x, y, w, h); centers are computed on demand,
which matches the annotation format of OTB-style ground-truth files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# per-anchor classification labels
POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# |dw|, |dh| are clamped here before exp() so decoding stays finite even when
# the regression head is fed adversarially corrupted inputs
MAX_SIZE_DELTA = 4.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle located by its top-left corner and size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(float(v)) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"box fields must be finite, got {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def intersects(self, other: "Box") -> bool:
        return (
            self.x < other.x2
            and other.x < self.x2
            and self.y < other.y2
            and other.y < self.y2
        )


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def center_error(a: Box, b: Box) -> float:
    """Euclidean distance between box centers, in pixels."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def norm_center_error(a: Box, b: Box) -> float:
    """Center distance with (dx, dy) divided elementwise by (b.w, b.h).

    `b` is conventionally the ground-truth box, so the error is expressed in
    units of the target's own size.
    """
    return math.hypot((a.cx - b.cx) / b.w, (a.cy - b.cy) / b.h)


@dataclass(frozen=True)
class AnchorConfig:
    """Layout of the per-cell anchor set on a score map.

    `scales` are anchor side lengths in pixels (the geometric mean of width
    and height); `ratios` are height/width aspect ratios. The grid is centered
    inside the search patch of side `search_size`.
    """

    stride: int = 8
    scales: tuple[float, ...] = (32.0,)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    grid_h: int = 9
    grid_w: int = 9
    search_size: int = 128

    def __post_init__(self) -> None:
        if not self.scales or not self.ratios:
            raise ValueError("anchor scales and ratios must be non-empty")
        if min(self.stride, self.grid_h, self.grid_w, self.search_size) <= 0:
            raise ValueError("anchor grid dimensions must be positive")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("anchor scales and ratios must be positive")

    @property
    def num_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class AnchorGrid:
    """All anchors of a score map, flattened in (anchor-kind, row, col) order.

    `anchors` has shape (grid_h * grid_w * K, 4) in corner form. The flat
    index of anchor kind k at cell (i, j) is ``(k * grid_h + i) * grid_w + j``,
    matching the channel layout of the tracker head's output maps.
    """

    cfg: AnchorConfig
    anchors: np.ndarray

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.cfg.num_per_cell, self.cfg.grid_h, self.cfg.grid_w)

    def centers(self) -> np.ndarray:
        return self.anchors[:, :2] + 0.5 * self.anchors[:, 2:]

    def sizes(self) -> np.ndarray:
        return self.anchors[:, 2:]

    def anchor_box(self, flat_index: int) -> Box:
        x, y, w, h = self.anchors[flat_index]
        return Box(float(x), float(y), float(w), float(h))


def make_anchor_grid(cfg: AnchorConfig) -> AnchorGrid:
    """Build the deterministic anchor grid described by `cfg`."""
    k = cfg.num_per_cell
    wh = np.empty((k, 2), dtype=np.float64)
    idx = 0
    for scale in cfg.scales:
        for ratio in cfg.ratios:
            wh[idx, 0] = scale / math.sqrt(ratio)
            wh[idx, 1] = scale * math.sqrt(ratio)
            idx += 1

    jj = np.arange(cfg.grid_w, dtype=np.float64)
    ii = np.arange(cfg.grid_h, dtype=np.float64)
    cx = cfg.search_size / 2.0 + (jj - (cfg.grid_w - 1) / 2.0) * cfg.stride
    cy = cfg.search_size / 2.0 + (ii - (cfg.grid_h - 1) / 2.0) * cfg.stride

    n = k * cfg.grid_h * cfg.grid_w
    anchors = np.empty((n, 4), dtype=np.float64)
    cxg, cyg = np.meshgrid(cx, cy)  # (grid_h, grid_w)
    for ki in range(k):
        base = ki * cfg.grid_h * cfg.grid_w
        w, h = wh[ki]
        anchors[base : base + cfg.grid_h * cfg.grid_w, 0] = (cxg - w / 2).ravel()
        anchors[base : base + cfg.grid_h * cfg.grid_w, 1] = (cyg - h / 2).ravel()
        anchors[base : base + cfg.grid_h * cfg.grid_w, 2] = w
        anchors[base : base + cfg.grid_h * cfg.grid_w, 3] = h
    return AnchorGrid(cfg=cfg, anchors=anchors)


def iou_with_box(anchors: np.ndarray, box: Box) -> np.ndarray:
    """Vectorized IoU of an (N, 4) corner-form anchor array against one box."""
    ax, ay, aw, ah = anchors[:, 0], anchors[:, 1], anchors[:, 2], anchors[:, 3]
    iw = np.minimum(ax + aw, box.x2) - np.maximum(ax, box.x)
    ih = np.minimum(ay + ah, box.y2) - np.maximum(ay, box.y)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = aw * ah + box.area - inter
    return inter / union


def assign_cls_labels(
    grid: AnchorGrid, gt: Box, pos_thr: float = 0.6, neg_thr: float = 0.3
) -> np.ndarray:
    """Per-anchor fore/background labels from IoU against the ground truth.

    Anchors with IoU strictly above `pos_thr` are positive, strictly below
    `neg_thr` negative, anything between is ignored. If no anchor clears
    `pos_thr`, the single max-IoU anchor is forced positive so every target
    has at least one positive anchor.
    """
    if not (0.0 <= neg_thr < pos_thr <= 1.0):
        raise ValueError(f"need 0 <= neg_thr < pos_thr <= 1, got {neg_thr}, {pos_thr}")
    overlap = iou_with_box(grid.anchors, gt)
    labels = np.full(grid.n_anchors, IGNORE, dtype=np.int8)
    labels[overlap < neg_thr] = NEGATIVE
    labels[overlap > pos_thr] = POSITIVE
    if not (labels == POSITIVE).any():
        labels[int(np.argmax(overlap))] = POSITIVE
    return labels


def encode_reg_targets(grid: AnchorGrid, gt: Box) -> np.ndarray:
    """Anchor-relative regression targets (dx, dy, dw, dh) for every anchor.

    dx, dy are center offsets in units of the anchor size; dw, dh are log
    size ratios.
    """
    centers = grid.centers()
    sizes = grid.sizes()
    out = np.empty((grid.n_anchors, 4), dtype=np.float64)
    out[:, 0] = (gt.cx - centers[:, 0]) / sizes[:, 0]
    out[:, 1] = (gt.cy - centers[:, 1]) / sizes[:, 1]
    out[:, 2] = np.log(gt.w / sizes[:, 0])
    out[:, 3] = np.log(gt.h / sizes[:, 1])
    return out


def decode_box(anchor: Box, deltas: np.ndarray) -> Box:
    """Inverse of `encode_reg_targets` for a single anchor."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != (4,):
        raise ValueError(f"expected 4 deltas, got shape {deltas.shape}")
    if not np.isfinite(deltas).all():
        raise ValueError("deltas must be finite")
    dx, dy, dw, dh = deltas
    dw = float(np.clip(dw, -MAX_SIZE_DELTA, MAX_SIZE_DELTA))
    dh = float(np.clip(dh, -MAX_SIZE_DELTA, MAX_SIZE_DELTA))
    cx = anchor.cx + dx * anchor.w
    cy = anchor.cy + dy * anchor.h
    return Box.from_center(cx, cy, anchor.w * math.exp(dw), anchor.h * math.exp(dh))


@dataclass
class LabelSet:
    """Per-anchor classification labels and regression targets for one pair.

    `reg` rows are meaningful only where `cls == POSITIVE`; other rows are
    zero-filled. Construction requires at least one positive anchor, which
    the assignment fallback guarantees for any target.
    """

    cls: np.ndarray
    reg: np.ndarray

    def __post_init__(self) -> None:
        self.cls = np.asarray(self.cls, dtype=np.int8)
        self.reg = np.asarray(self.reg, dtype=np.float64)
        if self.cls.ndim != 1 or self.reg.shape != (self.cls.shape[0], 4):
            raise ValueError(
                f"inconsistent label shapes {self.cls.shape} / {self.reg.shape}"
            )
        pos = self.cls == POSITIVE
        if not pos.any():
            raise ValueError("label set must contain at least one positive anchor")
        if not np.isfinite(self.reg[pos]).all():
            raise ValueError("regression targets at positive anchors must be finite")

    @property
    def num_positive(self) -> int:
        return int((self.cls == POSITIVE).sum())


def make_label_set(
    grid: AnchorGrid, gt: Box, pos_thr: float = 0.6, neg_thr: float = 0.3
) -> LabelSet:
    """Assign labels and encode targets for a ground-truth box in patch coordinates."""
    cls = assign_cls_labels(grid, gt, pos_thr, neg_thr)
    reg = encode_reg_targets(grid, gt)
    reg[cls != POSITIVE] = 0.0
    return LabelSet(cls=cls, reg=reg)
