"""Tracking loss: fore/background cross-entropy plus SmoothL1 box regression.

The combined loss scores how well a pair of score maps matches the labels of
a training pair. It is differentiable through the maps, so the same function
both trains networks and guides gradient-based perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import NEGATIVE, POSITIVE, LabelSet


@dataclass(frozen=True)
class DuaLossConfig:
    """Weights and sampling caps for the combined classification/regression loss.

    `reg_norm` selects the denominator of the regression term: "pos" averages
    over positive anchors (keeps the scale stable across target sizes),
    "total" averages over all sampled anchors.
    """

    sigma: float = 1.0
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    reg_norm: str = "pos"
    max_positive: int = 16
    max_total: int = 48
    sample_seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.reg_weight < 0 or self.cls_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reg_norm not in ("pos", "total"):
            raise ValueError(f"unknown reg_norm {self.reg_norm!r}")
        if self.max_positive < 1 or self.max_total < self.max_positive:
            raise ValueError("need max_total >= max_positive >= 1")

    @classmethod
    def for_mode(cls, mode: str, **kwargs) -> "DuaLossConfig":
        """Ablation presets: "dua" keeps both terms, "cls"/"reg" keep one."""
        base = cls(**kwargs)
        if mode == "dua":
            return base
        if mode == "cls":
            return replace(base, reg_weight=0.0)
        if mode == "reg":
            return replace(base, cls_weight=0.0)
        raise ValueError(f"unknown loss mode {mode!r}")


def smooth_l1(d, sigma: float = 1.0) -> torch.Tensor:
    """Piecewise quadratic/linear penalty with shape parameter sigma.

    0.5 * sigma^2 * d^2 where |d| < 1/sigma^2, else |d| - 0.5/sigma^2.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = torch.as_tensor(d, dtype=torch.float64 if not torch.is_tensor(d) else None)
    turn = 1.0 / (sigma * sigma)
    ad = d.abs()
    return torch.where(ad < turn, 0.5 * sigma * sigma * d * d, ad - 0.5 * turn)


def _anchor_logits(cls_map: torch.Tensor) -> torch.Tensor:
    """(2K, H, W) map -> (N, 2) per-anchor [background, foreground] logits."""
    two_k, h, w = cls_map.shape
    k = two_k // 2
    if two_k != 2 * k:
        raise ValueError(f"classification map needs an even channel count, got {two_k}")
    return cls_map.reshape(k, 2, h, w).permute(0, 2, 3, 1).reshape(-1, 2)


def _anchor_deltas(reg_map: torch.Tensor) -> torch.Tensor:
    """(4K, H, W) map -> (N, 4) per-anchor regression deltas."""
    four_k, h, w = reg_map.shape
    k = four_k // 4
    if four_k != 4 * k:
        raise ValueError(f"regression map channels must be a multiple of 4, got {four_k}")
    return reg_map.reshape(k, 4, h, w).permute(0, 2, 3, 1).reshape(-1, 4)


def _sample_anchor_indices(cls_labels: np.ndarray, cfg: DuaLossConfig) -> np.ndarray:
    """Deterministically subsample anchors: up to `max_positive` positives plus
    negatives up to `max_total` in total. Ignored anchors are never selected."""
    rng = np.random.default_rng(cfg.sample_seed)
    pos = np.flatnonzero(cls_labels == POSITIVE)
    neg = np.flatnonzero(cls_labels == NEGATIVE)
    if len(pos) == 0 and len(neg) == 0:
        raise ValueError("all anchors are ignore-labeled")
    if len(pos) > cfg.max_positive:
        pos = np.sort(rng.choice(pos, cfg.max_positive, replace=False))
    n_neg = min(len(neg), cfg.max_total - len(pos))
    if n_neg < len(neg):
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    return np.concatenate([pos, neg])


def cls_loss(
    cls_map: torch.Tensor, labels: LabelSet, cfg: DuaLossConfig = DuaLossConfig()
) -> torch.Tensor:
    """Mean cross-entropy over the sampled anchor subset."""
    cls_map = torch.as_tensor(cls_map)
    logits = _anchor_logits(cls_map)
    if logits.shape[0] != labels.cls.shape[0]:
        raise ValueError(
            f"map has {logits.shape[0]} anchors but labels have {labels.cls.shape[0]}"
        )
    sel = _sample_anchor_indices(labels.cls, cfg)
    target = torch.from_numpy((labels.cls[sel] == POSITIVE).astype(np.int64))
    return F.cross_entropy(logits[torch.from_numpy(sel)], target)


def reg_loss(
    reg_map: torch.Tensor, labels: LabelSet, cfg: DuaLossConfig = DuaLossConfig()
) -> torch.Tensor:
    """SmoothL1 over the four delta coordinates, reduced over positive anchors."""
    reg_map = torch.as_tensor(reg_map)
    deltas = _anchor_deltas(reg_map)
    if deltas.shape[0] != labels.cls.shape[0]:
        raise ValueError(
            f"map has {deltas.shape[0]} anchors but labels have {labels.cls.shape[0]}"
        )
    pos = np.flatnonzero(labels.cls == POSITIVE)
    if len(pos) == 0:
        raise ValueError("regression loss needs at least one positive anchor")
    if len(pos) > cfg.max_positive:
        rng = np.random.default_rng(cfg.sample_seed)
        pos = np.sort(rng.choice(pos, cfg.max_positive, replace=False))
    idx = torch.from_numpy(pos)
    target = torch.from_numpy(labels.reg[pos]).to(deltas.dtype)
    per_anchor = smooth_l1(deltas[idx] - target, cfg.sigma).sum(dim=1)
    if cfg.reg_norm == "pos":
        return per_anchor.mean()
    return per_anchor.sum() / labels.cls.shape[0]


def dua_loss(maps, labels: LabelSet, cfg: DuaLossConfig = DuaLossConfig()) -> torch.Tensor:
    """Weighted sum of the classification and regression terms.

    `maps` is anything with `.cls` and `.reg` attributes (score-map pair) or a
    (cls_map, reg_map) tuple. Zero-weighted terms are skipped entirely, which
    is also how the single-loss ablation modes are realized.
    """
    if isinstance(maps, tuple):
        cls_map, reg_map = maps
    else:
        cls_map, reg_map = maps.cls, maps.reg
    terms = []
    if cfg.cls_weight != 0.0:
        term = cls_loss(cls_map, labels, cfg)
        terms.append(term if cfg.cls_weight == 1.0 else cfg.cls_weight * term)
    if cfg.reg_weight != 0.0:
        term = reg_loss(reg_map, labels, cfg)
        terms.append(term if cfg.reg_weight == 1.0 else cfg.reg_weight * term)
    if not terms:
        raise ValueError("both loss terms are weighted zero")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def batch_dua_loss(
    cls_maps: torch.Tensor,
    reg_maps: torch.Tensor,
    labels: list[LabelSet],
    cfg: DuaLossConfig = DuaLossConfig(),
) -> torch.Tensor:
    """Mean loss over a batch of (B, 2K, H, W) / (B, 4K, H, W) maps."""
    if cls_maps.shape[0] != len(labels) or reg_maps.shape[0] != len(labels):
        raise ValueError("batch size mismatch between maps and labels")
    losses = [dua_loss((cls_maps[i], reg_maps[i]), labels[i], cfg) for i in range(len(labels))]
    return torch.stack(losses).mean()
