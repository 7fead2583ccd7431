"""Pre-processing defense network: a U-Net that removes adversarial noise.

The network predicts a residual that is added to its input and clipped back
to [0, 1]. The residual head is zero-initialized, so a freshly built net is
exactly the identity; training only ever moves it away from that point. One
net serves one branch (template or search); the two branches never share
parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patches import to_bchw, to_hwc, validate_patch


class DeploymentPattern(enum.Enum):
    """Which tracker branches receive the defense transformation."""

    TEMPLATE_ONLY = "template"
    SEARCH_ONLY = "search"
    BOTH = "both"

    @classmethod
    def parse(cls, value) -> "DeploymentPattern":
        if isinstance(value, cls):
            return value
        for member in cls:
            if member.value == value:
                return member
        raise ValueError(f"unknown deployment pattern {value!r}")

    @property
    def uses_template(self) -> bool:
        return self in (DeploymentPattern.TEMPLATE_ONLY, DeploymentPattern.BOTH)

    @property
    def uses_search(self) -> bool:
        return self in (DeploymentPattern.SEARCH_ONLY, DeploymentPattern.BOTH)


@dataclass(frozen=True)
class DefenseConfig:
    input_size: int = 128
    depth: int = 3
    base_width: int = 16
    variant: str = "search"  # or "template"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.variant not in ("template", "search"):
            raise ValueError(f"variant must be 'template' or 'search', got {self.variant!r}")
        if self.depth < 1 or self.base_width < 1 or self.input_size < 2:
            raise ValueError("invalid network dimensions")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        factor = 2**self.depth
        padded = ((self.input_size + factor - 1) // factor) * factor
        if padded - self.input_size >= self.input_size:
            raise ValueError(
                f"input size {self.input_size} is incompatible with depth {self.depth}"
            )

    @property
    def padded_size(self) -> int:
        factor = 2**self.depth
        return ((self.input_size + factor - 1) // factor) * factor

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, 1, 1), nn.ReLU(inplace=True),
    )


class DefenseNet(nn.Module):
    """Residual U-Net; output = clip(input + residual, 0, 1)."""

    def __init__(self, cfg: DefenseConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * (2**d) for d in range(cfg.depth)]
        enc, down = [], []
        cin = 3
        for wd in widths:
            enc.append(_block(cin, wd))
            down.append(nn.Conv2d(wd, wd, 3, 2, 1))
            cin = wd
        self.enc = nn.ModuleList(enc)
        self.down = nn.ModuleList(down)
        self.mid = _block(widths[-1], widths[-1] * 2)
        up, dec = [], []
        cin = widths[-1] * 2
        for wd in reversed(widths):
            up.append(nn.Conv2d(cin, wd, 3, 1, 1))
            dec.append(_block(2 * wd, wd))
            cin = wd
        self.up = nn.ModuleList(up)
        self.dec = nn.ModuleList(dec)
        self.out = nn.Conv2d(widths[0], 3, 3, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.to(cfg.torch_dtype)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        size = self.cfg.input_size
        pad = self.cfg.padded_size - size
        left, top = pad // 2, pad // 2
        if pad:
            x = F.pad(x, (left, pad - left, top, pad - top), mode="reflect")
        skips = []
        for enc, down in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.mid(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = F.interpolate(x, scale_factor=2.0, mode="nearest")
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        x = self.out(x)
        if pad:
            x = x[:, :, top : top + size, left : left + size]
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(
                f"{self.variant} defense net expects {self.cfg.input_size}px inputs, "
                f"got {tuple(x.shape[-2:])}"
            )
        return torch.clamp(x + self.residual(x), 0.0, 1.0)

    def state_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.state_dict()):
            h.update(name.encode())
            h.update(self.state_dict()[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def build_defense_net(
    variant: str, input_size: int, depth: int | None = None, base_width: int = 16,
    seed: int = 0, dtype: str = "float32",
) -> DefenseNet:
    """Build an identity-initialized defense net for one branch.

    Depth defaults to 3 for inputs up to 128 px and 4 above, mirroring the
    two size presets.
    """
    if depth is None:
        depth = 3 if input_size <= 128 else 4
    cfg = DefenseConfig(
        input_size=input_size, depth=depth, base_width=base_width, variant=variant, dtype=dtype
    )
    torch.manual_seed(seed)
    return DefenseNet(cfg)


def defend(net: DefenseNet, patch):
    """Apply the defensive transformation to one patch.

    Accepts an HxWx3 numpy patch (returns numpy) or an HxWx3 torch tensor
    (returns a tensor and keeps the autograd graph, so the operation is
    differentiable with respect to both the input and the parameters).
    """
    if isinstance(patch, torch.Tensor):
        if patch.dim() != 3 or patch.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 patch, got shape {tuple(patch.shape)}")
        if not torch.isfinite(patch).all() or patch.min() < 0 or patch.max() > 1:
            raise ValueError("patch values must be finite and in [0, 1]")
        out = net(patch.permute(2, 0, 1).unsqueeze(0))
        return out[0].permute(1, 2, 0)
    validate_patch(patch, net.cfg.input_size, f"{net.variant} patch")
    with torch.no_grad():
        out = net(to_bchw(patch, net.cfg.torch_dtype))
    return to_hwc(out)


@dataclass
class DefenseStack:
    """The defense nets deployed in front of a tracker, at most one per branch."""

    template: DefenseNet | None = None
    search: DefenseNet | None = None

    def require(self, pattern: DeploymentPattern) -> None:
        if pattern.uses_template and self.template is None:
            raise ValueError(f"pattern {pattern.value} needs a template-branch net")
        if pattern.uses_search and self.search is None:
            raise ValueError(f"pattern {pattern.value} needs a search-branch net")


def apply_pattern(pattern, stack: DefenseStack, z: np.ndarray, x: np.ndarray):
    """Run the defended branches; pass the others through untouched."""
    pattern = DeploymentPattern.parse(pattern)
    stack.require(pattern)
    z_out = defend(stack.template, z) if pattern.uses_template else z
    x_out = defend(stack.search, x) if pattern.uses_search else x
    return z_out, x_out
