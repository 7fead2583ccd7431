"""Anchor-based siamese tracker with frozen-parameter inference.

A small strided convolutional backbone feeds a depthwise cross-correlation
head with classification and regression branches. Two size presets exist:
"toy" (template 64, search 128) and "paper" (template 127, search 255).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import TrainingDiverged
from .geometry import AnchorConfig, AnchorGrid, Box, make_anchor_grid
from .losses import DuaLossConfig, batch_dua_loss
from .patches import to_bchw, to_hwc, validate_patch

_NUM_BLOCKS = 3  # stride-2 blocks; total stride 8


@dataclass(frozen=True)
class TrackerConfig:
    template_size: int = 64
    search_size: int = 128
    base_width: int = 16
    head_width: int = 48
    scales: tuple[float, ...] = (32.0,)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pos_iou: float = 0.6
    neg_iou: float = 0.3
    window_weight: float = 0.3
    size_damping: float = 0.5
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.template_size >= self.search_size:
            raise ValueError("search patch must be larger than the template patch")
        if self.base_width < 1 or self.head_width < 1:
            raise ValueError("widths must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def toy(cls, **kwargs) -> "TrackerConfig":
        return cls(**kwargs)

    @classmethod
    def paper(cls, **kwargs) -> "TrackerConfig":
        kwargs.setdefault("template_size", 127)
        kwargs.setdefault("search_size", 255)
        return cls(**kwargs)

    @property
    def stride(self) -> int:
        return 2**_NUM_BLOCKS

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def feature_size(self, n: int) -> int:
        for _ in range(_NUM_BLOCKS):
            n = (n + 1) // 2  # conv k3 s2 p1
        return n

    @property
    def grid_size(self) -> int:
        return self.feature_size(self.search_size) - self.feature_size(self.template_size) + 1

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(
            stride=self.stride,
            scales=self.scales,
            ratios=self.ratios,
            grid_h=self.grid_size,
            grid_w=self.grid_size,
            search_size=self.search_size,
        )


@dataclass
class ScoreMaps:
    """Head output for one template/search pair.

    cls: (2K, H, W) fore/background logits, channel 2k = background and
    2k + 1 = foreground of anchor kind k. reg: (4K, H, W) box deltas.
    """

    cls: torch.Tensor
    reg: torch.Tensor

    def validate(self) -> "ScoreMaps":
        if self.cls.shape[1:] != self.reg.shape[1:]:
            raise ValueError("classification / regression spatial sizes differ")
        if not (torch.isfinite(self.cls).all() and torch.isfinite(self.reg).all()):
            raise ValueError("score maps contain non-finite values")
        return self


def _xcorr_depthwise(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Per-channel correlation of search features with template features."""
    b, c, h, w = x.shape
    out = F.conv2d(x.reshape(1, b * c, h, w), kernel.reshape(b * c, 1, *kernel.shape[2:]), groups=b * c)
    return out.reshape(b, c, out.shape[2], out.shape[3])


class SiamTracker(nn.Module):
    """Shared-backbone siamese network with depthwise-correlation head."""

    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width

        def gn(c: int) -> nn.GroupNorm:
            groups = next(g for g in (4, 2, 1) if c % g == 0)
            return nn.GroupNorm(groups, c)

        # group norm keeps the stack trainable without batch statistics,
        # so train/eval behavior is identical
        self.backbone = nn.Sequential(
            nn.Conv2d(3, w, 3, 2, 1), gn(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, 1, 1), gn(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, 2, 1), gn(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 2 * w, 3, 1, 1), gn(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1), gn(4 * w), nn.ReLU(inplace=True),
            nn.Conv2d(4 * w, 4 * w, 3, 1, 1),
        )
        c, hw = 4 * w, cfg.head_width
        k = len(cfg.scales) * len(cfg.ratios)
        self.cls_z = nn.Conv2d(c, hw, 3, 1, 1)
        self.cls_x = nn.Conv2d(c, hw, 3, 1, 1)
        self.reg_z = nn.Conv2d(c, hw, 3, 1, 1)
        self.reg_x = nn.Conv2d(c, hw, 3, 1, 1)
        self.cls_head = nn.Sequential(
            nn.Conv2d(hw, hw, 1), nn.ReLU(inplace=True), nn.Conv2d(hw, 2 * k, 1)
        )
        self.reg_head = nn.Sequential(
            nn.Conv2d(hw, hw, 1), nn.ReLU(inplace=True), nn.Conv2d(hw, 4 * k, 1)
        )
        self.anchor_grid: AnchorGrid = make_anchor_grid(cfg.anchor_config())
        self.forward_calls = 0
        self.to(cfg.torch_dtype)

    def template_features(self, z: torch.Tensor) -> dict[str, torch.Tensor]:
        f = self.backbone(z)
        return {"cls": self.cls_z(f), "reg": self.reg_z(f)}

    def search_maps(
        self, zfeat: dict[str, torch.Tensor], x: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.backbone(x)
        cls = self.cls_head(_xcorr_depthwise(self.cls_x(f), zfeat["cls"]))
        reg = self.reg_head(_xcorr_depthwise(self.reg_x(f), zfeat["reg"]))
        return cls, reg

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 3, T, T), (B, 3, S, S) -> cls (B, 2K, G, G), reg (B, 4K, G, G)."""
        if z.shape[-1] != self.cfg.template_size or x.shape[-1] != self.cfg.search_size:
            raise ValueError(
                f"patch sizes {z.shape[-1]}/{x.shape[-1]} do not match the model "
                f"config {self.cfg.template_size}/{self.cfg.search_size}"
            )
        self.forward_calls += 1
        return self.search_maps(self.template_features(z), x)

    def state_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.state_dict()):
            h.update(name.encode())
            h.update(self.state_dict()[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def forward_pair(model: SiamTracker, z_patch: np.ndarray, x_patch: np.ndarray) -> ScoreMaps:
    """Inference on one numpy patch pair; returns detached, validated maps."""
    validate_patch(z_patch, model.cfg.template_size, "template patch")
    validate_patch(x_patch, model.cfg.search_size, "search patch")
    with torch.no_grad():
        cls, reg = model(
            to_bchw(z_patch, model.cfg.torch_dtype), to_bchw(x_patch, model.cfg.torch_dtype)
        )
    return ScoreMaps(cls=cls[0], reg=reg[0]).validate()


# ---------------------------------------------------------------------------
# patch cropping


@dataclass(frozen=True)
class PatchMapping:
    """Affine mapping between patch pixels and frame pixels.

    patch = (frame - origin) * scale, applied per axis.
    """

    scale: float
    ox: float
    oy: float
    out_size: int
    frame_h: int
    frame_w: int

    def to_frame_xy(self, px: float, py: float) -> tuple[float, float]:
        return px / self.scale + self.ox, py / self.scale + self.oy

    def to_patch_xy(self, fx: float, fy: float) -> tuple[float, float]:
        return (fx - self.ox) * self.scale, (fy - self.oy) * self.scale

    def to_frame_box(self, box: Box) -> Box:
        cx, cy = self.to_frame_xy(box.cx, box.cy)
        return Box.from_center(cx, cy, box.w / self.scale, box.h / self.scale)

    def to_patch_box(self, box: Box) -> Box:
        cx, cy = self.to_patch_xy(box.cx, box.cy)
        return Box.from_center(cx, cy, box.w * self.scale, box.h * self.scale)


def context_side(box: Box) -> float:
    """Side of the square context window around a target box."""
    pad = (box.w + box.h) / 2.0
    return math.sqrt((box.w + pad) * (box.h + pad))


def crop_window(
    frame: np.ndarray, cx: float, cy: float, side: float, out_size: int
) -> tuple[np.ndarray, PatchMapping]:
    """Resample a square window to `out_size`; outside pixels take the frame's
    channel-mean color."""
    frame = np.asarray(frame, dtype=np.float32)
    scale = out_size / side
    ox, oy = cx - side / 2.0, cy - side / 2.0
    m = np.array([[scale, 0.0, -ox * scale], [0.0, scale, -oy * scale]], dtype=np.float64)
    mean = frame.reshape(-1, frame.shape[2]).mean(axis=0)
    patch = cv2.warpAffine(
        frame,
        m,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=tuple(float(v) for v in mean),
    )
    mapping = PatchMapping(
        scale=scale, ox=ox, oy=oy, out_size=out_size,
        frame_h=frame.shape[0], frame_w=frame.shape[1],
    )
    return np.clip(patch, 0.0, 1.0), mapping


def crop_template(frame: np.ndarray, gt: Box, out_size: int) -> np.ndarray:
    """Context crop around the annotated target, resized to the template size."""
    frame_box = Box(0, 0, frame.shape[1], frame.shape[0])
    if not gt.intersects(frame_box):
        raise ValueError(f"target box {gt} does not intersect the frame")
    patch, _ = crop_window(frame, gt.cx, gt.cy, context_side(gt), out_size)
    return patch


def crop_search(
    frame: np.ndarray, prev: Box, out_size: int, template_size: int
) -> tuple[np.ndarray, PatchMapping]:
    """Search-region crop around the previous box, plus the patch-to-frame mapping."""
    side = context_side(prev) * (out_size / template_size)
    return crop_window(frame, prev.cx, prev.cy, side, out_size)


# ---------------------------------------------------------------------------
# post-processing and sequence tracking


@dataclass
class TrackState:
    """Per-sequence state: last box plus the output-smoothing constants."""

    prev_box: Box
    window_weight: float = 0.3
    size_damping: float = 0.5


def _cosine_window(grid: AnchorGrid) -> np.ndarray:
    gh, gw = grid.cfg.grid_h, grid.cfg.grid_w
    win = np.outer(np.hanning(gh), np.hanning(gw))
    return np.tile(win.ravel(), grid.cfg.num_per_cell)


def _foreground_scores(cls_map: np.ndarray) -> np.ndarray:
    """(2K, H, W) logits -> flat (N,) foreground softmax scores."""
    two_k, h, w = cls_map.shape
    logits = cls_map.reshape(two_k // 2, 2, h, w)
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    fg = e[:, 1] / (e[:, 0] + e[:, 1])
    return fg.reshape(-1)


def select_box(
    maps: ScoreMaps, grid: AnchorGrid, state: TrackState, mapping: PatchMapping
) -> Box:
    """Pick the best anchor, decode it, and smooth/clip the frame-space box.

    Scores are foreground softmax probabilities blended with a cosine window;
    ties at the argmax resolve to the lowest flat anchor index. The output
    size is damped toward the previous box and the result is clipped to the
    frame.
    """
    cls = maps.cls.detach().cpu().numpy()
    reg = maps.reg.detach().cpu().numpy()
    scores = _foreground_scores(cls)
    lam = state.window_weight
    blended = (1.0 - lam) * scores + lam * _cosine_window(grid)
    best = int(np.argmax(blended))

    k, h, w = grid.shape
    deltas = reg.reshape(k, 4, h, w).transpose(0, 2, 3, 1).reshape(-1, 4)[best]
    patch_box = _decode_clipped(grid, best, deltas)
    raw = mapping.to_frame_box(patch_box)

    damp = state.size_damping
    new_w = damp * state.prev_box.w + (1.0 - damp) * raw.w
    new_h = damp * state.prev_box.h + (1.0 - damp) * raw.h
    return _clip_to_frame(
        Box.from_center(raw.cx, raw.cy, new_w, new_h), mapping.frame_h, mapping.frame_w
    )


def _decode_clipped(grid: AnchorGrid, index: int, deltas: np.ndarray) -> Box:
    from .geometry import decode_box

    deltas = np.where(np.isfinite(deltas), deltas, 0.0)
    return decode_box(grid.anchor_box(index), deltas)


def _clip_to_frame(box: Box, frame_h: int, frame_w: int) -> Box:
    w = float(np.clip(box.w, 2.0, frame_w))
    h = float(np.clip(box.h, 2.0, frame_h))
    x = float(np.clip(box.x, 0.0, frame_w - w))
    y = float(np.clip(box.y, 0.0, frame_h - h))
    return Box(x, y, w, h)


@dataclass
class FrameContext:
    """What a per-frame pre-processing hook gets to see."""

    index: int
    frame: np.ndarray
    prev_box: Box
    mapping: PatchMapping


class StageTimer:
    """Collects per-frame wall-clock milliseconds per pipeline stage."""

    def __init__(self) -> None:
        self.frames: list[dict[str, float]] = []

    def start_frame(self) -> None:
        self.frames.append({})

    def add(self, stage: str, ms: float) -> None:
        self.frames[-1][stage] = self.frames[-1].get(stage, 0.0) + ms

    def stage_array(self, stage: str) -> np.ndarray:
        return np.array([f.get(stage, 0.0) for f in self.frames], dtype=np.float64)


class TrackRun:
    """Incremental tracking of one sequence with optional pre-processing hooks.

    `template_pre(patch) -> patch` runs once on the template crop;
    `search_pre(patch, ctx) -> patch` runs on every search crop. Both default
    to identity. All per-frame timing lands in `timer` when given.
    """

    def __init__(
        self,
        model: SiamTracker,
        frame: np.ndarray,
        init_box: Box,
        template_pre=None,
        timer: StageTimer | None = None,
    ):
        self.model = model
        self.timer = timer
        self.index = 0
        if timer is not None:
            timer.start_frame()
        z = crop_template(frame, init_box, model.cfg.template_size)
        if template_pre is not None:
            z = template_pre(z)
        validate_patch(z, model.cfg.template_size, "template patch")
        t0 = time.perf_counter()
        with torch.no_grad():
            self.zfeat = model.template_features(to_bchw(z, model.cfg.torch_dtype))
        if timer is not None:
            timer.add("tracker", (time.perf_counter() - t0) * 1000.0)
        self.state = TrackState(
            prev_box=init_box,
            window_weight=model.cfg.window_weight,
            size_damping=model.cfg.size_damping,
        )
        self.template_patch = z

    def predict(self, x_patch: np.ndarray, mapping: PatchMapping) -> Box:
        """Score a candidate search patch against the cached template without
        touching the run's state."""
        with torch.no_grad():
            cls, reg = self.model.search_maps(
                self.zfeat, to_bchw(x_patch, self.model.cfg.torch_dtype)
            )
        maps = ScoreMaps(cls=cls[0], reg=reg[0])
        return select_box(maps, self.model.anchor_grid, self.state, mapping)

    def step(self, frame: np.ndarray, search_pre=None) -> Box:
        self.index += 1
        if self.timer is not None:
            self.timer.start_frame()
        x, mapping = crop_search(
            frame, self.state.prev_box, self.model.cfg.search_size, self.model.cfg.template_size
        )
        if search_pre is not None:
            ctx = FrameContext(
                index=self.index, frame=frame, prev_box=self.state.prev_box, mapping=mapping
            )
            x = search_pre(x, ctx)
            validate_patch(x, self.model.cfg.search_size, "search patch")
        t0 = time.perf_counter()
        box = self.predict(x, mapping)
        if self.timer is not None:
            self.timer.add("tracker", (time.perf_counter() - t0) * 1000.0)
        self.state.prev_box = box
        return box


def track_sequence(
    model: SiamTracker,
    frames: list[np.ndarray],
    init_box: Box,
    template_pre=None,
    search_pre=None,
    timer: StageTimer | None = None,
) -> list[Box]:
    """Track a full sequence from the given initial box.

    The first frame returns `init_box` unchanged; later frames run crop ->
    hooks -> forward -> box selection. Hooks that are `None` behave exactly
    like identity functions.
    """
    if len(frames) == 0:
        raise ValueError("cannot track an empty sequence")
    run = TrackRun(model, frames[0], init_box, template_pre=template_pre, timer=timer)
    boxes = [init_box]
    for frame in frames[1:]:
        boxes.append(run.step(frame, search_pre=search_pre))
    return boxes


# ---------------------------------------------------------------------------
# baseline training


@dataclass(frozen=True)
class TrackerTrainConfig:
    model: TrackerConfig = field(default_factory=TrackerConfig)
    loss: DuaLossConfig = field(default_factory=DuaLossConfig)
    epochs: int = 5
    batches_per_epoch: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    frame_gap: int = 30
    shift_jitter: float = 0.12
    scale_jitter: float = 0.18
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.epochs, self.batches_per_epoch, self.batch_size) < 1:
            raise ValueError("training sizes must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def train_baseline_tracker(
    cfg: TrackerTrainConfig, sequences, log_path=None
) -> tuple[SiamTracker, list[dict]]:
    """Train a tracker on clean pairs sampled from `sequences`.

    Returns the trained model in eval mode together with per-batch log rows.
    Aborts with TrainingDiverged if the loss goes non-finite.
    """
    from .data import pairs_to_tensors, sample_training_pairs

    torch.manual_seed(cfg.seed)
    model = SiamTracker(cfg.model)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        for batch in range(cfg.batches_per_epoch):
            t0 = time.perf_counter()
            pairs = sample_training_pairs(
                sequences,
                cfg.batch_size,
                cfg.frame_gap,
                rng,
                cfg.model,
                shift_jitter=cfg.shift_jitter,
                scale_jitter=cfg.scale_jitter,
            )
            z, x, labels = pairs_to_tensors(pairs, cfg.model.torch_dtype)
            cls, reg = model(z, x)
            loss = batch_dua_loss(cls, reg, labels, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"tracker loss became non-finite at epoch {epoch} batch {batch}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            rows.append(
                {
                    "epoch": epoch,
                    "batch": batch,
                    "loss": float(loss.detach()),
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
            )
    model.eval()
    if log_path is not None:
        _write_log(log_path, rows, ("epoch", "batch", "loss", "wall_ms"))
    return model, rows


def _write_log(path, rows: list[dict], columns: tuple[str, ...]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in columns})


# ---------------------------------------------------------------------------
# checkpoints


def save_tracker_checkpoint(model: SiamTracker, path) -> None:
    from . import checkpoint
    from dataclasses import asdict

    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    checkpoint.save_state(path, kind="tracker", config=asdict(model.cfg), arrays=arrays)


def load_tracker_checkpoint(path) -> SiamTracker:
    from . import checkpoint

    config, arrays = checkpoint.load_state(path, expect_kind="tracker")
    cfg = TrackerConfig(
        **{**config, "scales": tuple(config["scales"]), "ratios": tuple(config["ratios"])}
    )
    model = SiamTracker(cfg)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model
