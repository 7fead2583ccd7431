"""Evaluation-time perturbation generators.

White-box attacks run signed-gradient ascent on the tracking loss, either
against the bare tracker (non-adaptive) or through the defense-plus-tracker
composition (adaptive). The black-box attack drives the predicted box's
overlap down by random search over bounded perturbations, using only forward
queries.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import TrainingDiverged
from .geometry import Box, LabelSet, iou
from .losses import DuaLossConfig, dua_loss
from .patches import to_chw, to_hwc, validate_patch

GRADIENT_KINDS = ("fgsm", "pgd")
BLACKBOX_KINDS = ("iou_blackbox",)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 8.0 / 255.0
    steps: int = 10
    alpha: float | None = None  # step size; defaults to epsilon / 4
    adaptive: bool = False
    query_budget: int = 200
    proposal_scale: float = 0.5  # black-box step size as a fraction of epsilon
    iou_threshold: float = 0.4
    target_branch: str = "search"
    seed: int = 0
    loss: DuaLossConfig = DuaLossConfig()

    def __post_init__(self) -> None:
        if self.kind not in GRADIENT_KINDS + BLACKBOX_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not (0.0 <= self.epsilon < 0.5):
            raise ValueError(f"perturbation budget must lie in [0, 0.5), got {self.epsilon}")
        if self.steps < 1 or self.query_budget < 1:
            raise ValueError("steps and query budget must be positive")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("step size must be positive")
        if self.target_branch not in ("template", "search", "both"):
            raise ValueError(f"unknown target branch {self.target_branch!r}")

    def resolved_steps(self) -> tuple[int, float]:
        """Effective (steps, alpha): single full-budget step for "fgsm"."""
        if self.kind == "fgsm":
            return 1, self.epsilon
        return self.steps, self.alpha if self.alpha is not None else self.epsilon / 4.0


def gradient_attack(
    tracker,
    defense,
    z_patch: np.ndarray,
    x_patch: np.ndarray,
    labels: LabelSet,
    cfg: AttackConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Iterated signed-gradient ascent on the tracking loss of one pair.

    Returns perturbed (template, search) patches; branches not in
    `cfg.target_branch` come back untouched. In adaptive mode the gradient
    flows through the defense nets given by `defense` (a DefenseStack plus
    pattern tuple); in non-adaptive mode the defense is invisible and the
    output does not depend on it at all.
    """
    validate_patch(z_patch, name="template patch")
    validate_patch(x_patch, name="search patch")
    if cfg.kind not in GRADIENT_KINDS:
        raise ValueError(f"gradient_attack cannot run attack kind {cfg.kind!r}")
    stack = pattern = None
    if cfg.adaptive:
        if defense is None:
            raise ValueError("an adaptive attack needs a defense to adapt to")
        stack, pattern = defense

    if cfg.epsilon == 0.0:
        return z_patch.copy(), x_patch.copy()

    dtype = tracker.cfg.torch_dtype
    z = to_chw(z_patch, dtype)
    x = to_chw(x_patch, dtype)
    attack_z = cfg.target_branch in ("template", "both")
    attack_x = cfg.target_branch in ("search", "both")

    gen = torch.Generator().manual_seed(cfg.seed)
    steps, alpha = cfg.resolved_steps()
    deltas = {}
    if attack_z:
        deltas["z"] = _init_delta(z, cfg.epsilon, gen)
    if attack_x:
        deltas["x"] = _init_delta(x, cfg.epsilon, gen)

    for _ in range(steps):
        for d in deltas.values():
            d.requires_grad_(True)
        z_in = (z + deltas["z"]).clamp(0.0, 1.0) if attack_z else z
        x_in = (x + deltas["x"]).clamp(0.0, 1.0) if attack_x else x
        if stack is not None:
            if pattern.uses_template:
                z_in = stack.template(z_in.unsqueeze(0))[0]
            if pattern.uses_search:
                x_in = stack.search(x_in.unsqueeze(0))[0]
        cls, reg = tracker(z_in.unsqueeze(0), x_in.unsqueeze(0))
        loss = dua_loss((cls[0], reg[0]), labels, cfg.loss)
        grads = torch.autograd.grad(loss, list(deltas.values()))
        for d, g in zip(deltas.values(), grads):
            if not torch.isfinite(g).all():
                raise TrainingDiverged("attack gradient became non-finite")
        new = {}
        for (name, d), g in zip(deltas.items(), grads):
            ref = z if name == "z" else x
            step = (d.detach() + alpha * torch.sign(g)).clamp(-cfg.epsilon, cfg.epsilon)
            step = (ref + step).clamp(0.0, 1.0) - ref
            new[name] = step.clamp(-cfg.epsilon, cfg.epsilon)
        deltas = new

    z_out = to_hwc((z + deltas["z"]).clamp(0.0, 1.0)) if attack_z else z_patch.copy()
    x_out = to_hwc((x + deltas["x"]).clamp(0.0, 1.0)) if attack_x else x_patch.copy()
    return z_out, x_out


def _init_delta(ref: torch.Tensor, epsilon: float, gen: torch.Generator) -> torch.Tensor:
    noise = (torch.rand(ref.shape, generator=gen, dtype=ref.dtype) * 2.0 - 1.0) * epsilon
    return (ref + noise).clamp(0.0, 1.0) - ref


@dataclass
class IoUAttackCarry:
    """Perturbation carried between consecutive frames of one sequence."""

    delta: np.ndarray
    best_iou: float


def iou_blackbox_attack(
    tracker_step,
    x_patch: np.ndarray,
    prev_box: Box,
    cfg: AttackConfig,
    rng,
    carry: IoUAttackCarry | None = None,
) -> tuple[np.ndarray, IoUAttackCarry]:
    """Query-only random search for the perturbation minimizing box overlap.

    `tracker_step` maps a search patch to the predicted frame box; it is the
    attack's only window into the tracker, so no gradients are ever taken.
    Candidates are scored by IoU against `prev_box` with ties broken toward
    smaller l1 noise. When the previous frame's attack already pushed the
    overlap below `cfg.iou_threshold`, its perturbation seeds this frame's
    search; otherwise the search restarts from zero.
    """
    validate_patch(x_patch, name="search patch")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    eps = cfg.epsilon
    x = np.asarray(x_patch, dtype=np.float32)

    if carry is not None and carry.best_iou < cfg.iou_threshold:
        delta = np.clip(carry.delta, -eps, eps).astype(np.float32)
    else:
        delta = np.zeros_like(x)

    def clipped(d: np.ndarray) -> np.ndarray:
        return np.clip(x + d, 0.0, 1.0)

    def evaluate(d: np.ndarray) -> tuple[float, float]:
        pred = tracker_step(clipped(d))
        return iou(pred, prev_box), float(np.abs(d).sum())

    best_delta = clipped(delta) - x
    best_iou, best_l1 = evaluate(best_delta)
    queries = 1
    step = cfg.proposal_scale * eps
    while queries < cfg.query_budget:
        proposal = best_delta + rng.uniform(-step, step, size=x.shape).astype(np.float32)
        proposal = np.clip(proposal, -eps, eps)
        proposal = clipped(proposal) - x
        cand_iou, cand_l1 = evaluate(proposal)
        queries += 1
        if cand_iou < best_iou or (cand_iou == best_iou and cand_l1 < best_l1):
            best_delta, best_iou, best_l1 = proposal, cand_iou, cand_l1
    return clipped(best_delta), IoUAttackCarry(delta=best_delta, best_iou=best_iou)
