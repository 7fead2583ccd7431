"""Adversarial training of the defense network against a frozen tracker.

Each batch runs two forward passes. The first pass feeds noise-perturbed
patches through defense and tracker to obtain the loss gradient at the input,
which upgrades the noise to a signed-gradient adversarial perturbation. The
second pass feeds the adversarial patches and its loss drives the single
parameter update of the batch. The tracker itself is never updated.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import checkpoint
from .data import Sequence, pairs_to_tensors, sample_training_pairs
from .defense import DefenseConfig, DefenseNet
from .errors import CheckpointError, TrainingDiverged
from .losses import DuaLossConfig, batch_dua_loss
from .tracker import SiamTracker

LOG_COLUMNS = ("epoch", "batch", "loss_pass1", "loss_pass2", "grad_norm", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.005
    betas: tuple[float, float] = (0.5, 0.999)
    epsilon: float = 8.0 / 255.0
    branch: str = "search"
    seed: int = 0
    batches_per_epoch: int = 50
    init_dist: str = "uniform"  # or "gaussian"
    loss: DuaLossConfig = field(default_factory=DuaLossConfig)
    frame_gap: int = 30
    shift_jitter: float = 0.12
    scale_jitter: float = 0.18

    def __post_init__(self) -> None:
        if min(self.epochs, self.batch_size, self.batches_per_epoch) < 1:
            raise ValueError("training sizes must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.epsilon < 0.5):
            raise ValueError(f"perturbation budget must lie in [0, 0.5), got {self.epsilon}")
        if self.branch not in ("template", "search"):
            raise ValueError(f"branch must be 'template' or 'search', got {self.branch!r}")
        if self.init_dist not in ("uniform", "gaussian"):
            raise ValueError(f"unknown init distribution {self.init_dist!r}")


def init_perturbation(
    shape, epsilon: float, seed, dist: str = "uniform", dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Draw the starting perturbation for a training batch.

    "uniform" samples i.i.d. on [-epsilon, epsilon]; "gaussian" samples with
    standard deviation epsilon / 2 and truncates to the same interval.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    if dist == "uniform":
        noise = (torch.rand(shape, generator=gen, dtype=dtype) * 2.0 - 1.0) * epsilon
    elif dist == "gaussian":
        noise = torch.randn(shape, generator=gen, dtype=dtype) * (epsilon / 2.0)
        noise = noise.clamp(-epsilon, epsilon)
    else:
        raise ValueError(f"unknown init distribution {dist!r}")
    return noise


def fgsm_step(
    delta: torch.Tensor, grad: torch.Tensor, epsilon: float, x: torch.Tensor
) -> torch.Tensor:
    """One signed-gradient ascent step, kept inside the budget and pixel range.

    The raw step can leave the epsilon-ball (it adds epsilon on top of the
    existing perturbation), so the result is projected back, then shifted so
    x + delta stays in [0, 1].
    """
    if delta.shape != grad.shape:
        raise ValueError(f"delta/gradient shape mismatch: {delta.shape} vs {grad.shape}")
    if not torch.isfinite(grad).all():
        raise TrainingDiverged("input gradient became non-finite")
    adv = delta.detach() + epsilon * torch.sign(grad)
    adv = (x + adv.clamp(-epsilon, epsilon)).clamp(0.0, 1.0) - x
    # the range adjustment can overshoot the budget by one float ulp; the final
    # projection keeps the budget bound exact, range is re-clipped at net entry
    return adv.clamp(-epsilon, epsilon)


@dataclass
class TrainingLog:
    rows: list[dict]
    tracker_forward_calls: int = 0
    optimizer_steps: int = 0
    max_delta_inf: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row[c] for c in LOG_COLUMNS})


def train_defense(
    tracker: SiamTracker,
    net: DefenseNet,
    sequences: list[Sequence],
    cfg: TrainConfig,
    log_path=None,
) -> TrainingLog:
    """Run the two-pass adversarial training loop, updating `net` in place.

    The tracker is frozen for the duration; a parameter checksum taken before
    and after training guards the contract. Training aborts on any non-finite
    loss or input gradient.
    """
    if net.variant != cfg.branch:
        raise ValueError(
            f"net is a {net.variant!r}-branch defense but training targets {cfg.branch!r}"
        )
    expected = tracker.cfg.search_size if cfg.branch == "search" else tracker.cfg.template_size
    if net.cfg.input_size != expected:
        raise ValueError(
            f"defense input size {net.cfg.input_size} does not match the tracker's "
            f"{cfg.branch} patch size {expected}"
        )

    frozen = [p.requires_grad for p in tracker.parameters()]
    for p in tracker.parameters():
        p.requires_grad_(False)
    tracker.eval()
    checksum_before = tracker.state_checksum()
    forwards_before = tracker.forward_calls

    dtype = net.cfg.torch_dtype
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    log = TrainingLog(rows=[])
    net.train()
    try:
        for epoch in range(cfg.epochs):
            for batch in range(cfg.batches_per_epoch):
                t0 = time.perf_counter()
                pairs = sample_training_pairs(
                    sequences,
                    cfg.batch_size,
                    cfg.frame_gap,
                    rng,
                    tracker.cfg,
                    shift_jitter=cfg.shift_jitter,
                    scale_jitter=cfg.scale_jitter,
                )
                z, x, labels = pairs_to_tensors(pairs, dtype)
                attacked = x if cfg.branch == "search" else z

                delta_g = init_perturbation(
                    attacked.shape, cfg.epsilon, gen, cfg.init_dist, dtype
                )
                delta = delta_g.clone().requires_grad_(True)
                loss1 = _defended_loss(tracker, net, z, x, attacked, delta, labels, cfg)
                if not torch.isfinite(loss1):
                    raise TrainingDiverged(
                        f"first-pass loss non-finite at epoch {epoch} batch {batch}"
                    )
                (grad,) = torch.autograd.grad(loss1, delta)
                grad_norm = float(grad.norm())

                delta_adv = fgsm_step(delta_g, grad, cfg.epsilon, attacked)
                delta_inf = float(delta_adv.abs().max())
                eps_t = float(torch.as_tensor(cfg.epsilon, dtype=delta_adv.dtype))
                if delta_inf > eps_t:
                    raise AssertionError("adversarial perturbation left the budget ball")
                log.max_delta_inf = max(log.max_delta_inf, delta_inf)

                loss2 = _defended_loss(tracker, net, z, x, attacked, delta_adv, labels, cfg)
                if not torch.isfinite(loss2):
                    raise TrainingDiverged(
                        f"second-pass loss non-finite at epoch {epoch} batch {batch}"
                    )
                opt.zero_grad()
                loss2.backward()
                opt.step()
                log.optimizer_steps += 1
                log.rows.append(
                    {
                        "epoch": epoch,
                        "batch": batch,
                        "loss_pass1": float(loss1.detach()),
                        "loss_pass2": float(loss2.detach()),
                        "grad_norm": grad_norm,
                        "wall_ms": (time.perf_counter() - t0) * 1000.0,
                    }
                )
    finally:
        net.eval()
        for p, r in zip(tracker.parameters(), frozen):
            p.requires_grad_(r)

    if tracker.state_checksum() != checksum_before:
        raise AssertionError("tracker parameters changed during defense training")
    log.tracker_forward_calls = tracker.forward_calls - forwards_before
    if log_path is not None:
        log.write_csv(log_path)
    return log


def _defended_loss(tracker, net, z, x, attacked, delta, labels, cfg):
    """Loss of the defended perturbed branch against clean opposite-branch input."""
    perturbed = (attacked + delta).clamp(0.0, 1.0)
    defended = net(perturbed)
    if cfg.branch == "search":
        cls, reg = tracker(z, defended)
    else:
        cls, reg = tracker(defended, x)
    return batch_dua_loss(cls, reg, labels, cfg.loss)


# ---------------------------------------------------------------------------
# defense checkpoints


def save_defense_checkpoint(net: DefenseNet, cfg: TrainConfig | None, path) -> None:
    """Write net parameters plus config echo in the shared container format."""
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    train_echo = None
    if cfg is not None:
        train_echo = asdict(cfg)
        train_echo["betas"] = list(cfg.betas)
        train_echo["loss"] = asdict(cfg.loss)
    config = {"net": asdict(net.cfg), "train": train_echo}
    checkpoint.save_state(path, kind="defense", config=config, arrays=arrays)


def load_defense_checkpoint(path, expected_variant: str | None = None) -> DefenseNet:
    config, arrays = checkpoint.load_state(path, expect_kind="defense")
    net_cfg = DefenseConfig(**config["net"])
    if expected_variant is not None and net_cfg.variant != expected_variant:
        raise CheckpointError(
            f"checkpoint {path} holds a {net_cfg.variant!r}-branch defense, "
            f"expected {expected_variant!r}"
        )
    net = DefenseNet(net_cfg)
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    net.eval()
    return net
