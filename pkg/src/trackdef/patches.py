"""Image-patch conventions and numpy/torch conversion helpers.

Patches and frames are H x W x 3 float arrays with values in [0, 1]. Torch
modules consume the channel-first layout; these helpers keep the conversion
in one place.
"""

from __future__ import annotations

import numpy as np
import torch


def validate_patch(patch: np.ndarray, size: int | None = None, name: str = "patch") -> np.ndarray:
    """Check the H x W x 3, [0, 1] patch contract and return the array."""
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"{name} must be HxWx3, got shape {patch.shape}")
    if size is not None and patch.shape[:2] != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {patch.shape[:2]}")
    if not np.isfinite(patch).all():
        raise ValueError(f"{name} contains non-finite values")
    if patch.min() < 0.0 or patch.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return patch


def to_chw(patch: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HWC numpy patch -> (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(patch)).permute(2, 0, 1).to(dtype)


def to_bchw(patches, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """List of HWC patches (or a single one) -> (B, 3, H, W) tensor."""
    if isinstance(patches, np.ndarray) and patches.ndim == 3:
        patches = [patches]
    return torch.stack([to_chw(p, dtype) for p in patches])


def to_hwc(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) tensor -> HWC float32 numpy patch."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise ValueError(f"expected a single patch, got batch {tensor.shape[0]}")
        tensor = tensor[0]
    return tensor.detach().permute(1, 2, 0).to(torch.float32).cpu().numpy()
