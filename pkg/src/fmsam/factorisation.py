"""Dynamic masks that split the bottleneck embedding into subject, task and auxiliary parts."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F_

SEGMENTS = ("sub", "task", "aux")


class FactorisationError(ValueError):
    pass


def fixed_masks(F: int, K: int = 1, dtype=None) -> torch.Tensor:
    """Hard-coded band masks, shape ``(3, K, F)``: 0.5 inside each F/3 band, 0 elsewhere."""
    if F % 3 != 0 or F <= 0:
        raise FactorisationError(f"feature width {F} is not divisible by 3")
    band = F // 3
    masks = torch.zeros(3, K, F, dtype=dtype)
    for i in range(3):
        masks[i, :, i * band:(i + 1) * band] = 0.5
    return masks


class MaskGenerator(nn.Module):
    """Two-layer map from the flattened embedding to three residual masks.

    The output layer starts at zero so the residuals vanish at initialisation.
    """

    def __init__(self, K: int, F: int, hidden: int = 128):
        super().__init__()
        self.K, self.F = K, F
        self.hidden = nn.Linear(K * F, hidden)
        self.out = nn.Linear(hidden, 3 * K * F)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z):
        lead = z.shape[:-2]
        h = torch.tanh(self.hidden(z.reshape(*lead, self.K * self.F)))
        return self.out(h).reshape(*lead, 3, self.K, self.F)


def normalize_masks(fixed: torch.Tensor, residuals: torch.Tensor | None, tau: float,
                    stochastic: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
    """Gumbel-softmax across the three mask channels at every coordinate.

    ``fixed`` is ``(3, K, F)``; ``residuals`` is ``(..., 3, K, F)`` or None.
    The channel axis is ``-3`` and the result sums to one along it.
    """
    if tau <= 0:
        raise FactorisationError(f"temperature must be positive, got {tau}")
    logits = fixed if residuals is None else fixed + residuals
    if stochastic:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        g = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
        logits = logits + g
    return torch.softmax(logits / tau, dim=-3)


def factorise(z: torch.Tensor, masks: torch.Tensor):
    """Return ``(z_sub, z_task, z_aux)`` with ``z_seg = z * m_seg``."""
    if masks.shape[-3] != 3 or masks.shape[-2:] != z.shape[-2:]:
        raise FactorisationError(f"mask shape {tuple(masks.shape)} does not match embedding {tuple(z.shape)}")
    return tuple(z * masks[..., i, :, :] for i in range(3))


def pool_summary(steps) -> torch.Tensor:
    """Concatenate per-step embeddings and global-average them back to ``(..., K, F)``.

    ``steps`` is a sequence of equally shaped tensors; one step is returned unchanged.
    """
    steps = list(steps)
    if len(steps) == 1:
        return steps[0]
    return torch.stack(steps, dim=0).mean(dim=0)


def subject_contrastive_loss(za: torch.Tensor, zb: torch.Tensor, same_subject, margin: float = 1.0):
    """Margin contrastive loss on flattened summaries, one value per pair.

    ``za``/``zb`` carry a leading batch axis or are single summaries.
    """
    if margin <= 0:
        raise FactorisationError("margin must be positive")
    single = za.dim() <= 2
    if single:
        za, zb = za.unsqueeze(0), zb.unsqueeze(0)
    diff = (za - zb).reshape(za.shape[0], -1)
    d2 = (diff ** 2).sum(-1)
    # keeps the sqrt gradient finite at zero distance
    positive = d2 > 0
    d = torch.where(positive, torch.sqrt(torch.where(positive, d2, torch.ones_like(d2))), torch.zeros_like(d2))
    same = torch.as_tensor(same_subject, dtype=za.dtype).reshape(-1)
    loss = same * d2 + (1 - same) * torch.clamp(margin - d, min=0.0) ** 2
    return loss[0] if single else loss


class TaskHead(nn.Module):
    def __init__(self, K: int, F: int, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.linear = nn.Linear(K * F, n_classes)

    def forward(self, z_task):
        return self.linear(z_task.reshape(*z_task.shape[:-2], -1))


def task_head_loss(logits: torch.Tensor, label, n_classes: int | None = None) -> torch.Tensor:
    """Cross-entropy ``-log softmax(logits)[label]``; mean over a batch."""
    label = torch.as_tensor(label)
    n_classes = logits.shape[-1] if n_classes is None else n_classes
    if torch.any(label < 0) or torch.any(label >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    if logits.dim() == 1:
        return -F_.log_softmax(logits, dim=-1)[label]
    return F_.cross_entropy(logits, label)


class SubjectEmbedding(nn.Module):
    """Projects the subject summary into the space where the contrastive margin applies."""

    def __init__(self, K: int, F: int, dim: int = 16):
        super().__init__()
        self.linear = nn.Linear(K * F, dim)

    def forward(self, z_sub):
        return self.linear(z_sub.reshape(*z_sub.shape[:-2], -1))


def export_mask_grids(masks: torch.Tensor, out_dir, prefix: str = "mask") -> list[Path]:
    """Write one ``K x F`` CSV heat-grid per segment from masks ``(3, K, F)``."""
    masks = masks.detach().cpu().numpy()
    if masks.ndim != 3 or masks.shape[0] != 3:
        raise FactorisationError(f"expected masks of shape (3, K, F), got {masks.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, grid in zip(SEGMENTS, masks):
        path = out_dir / f"{prefix}_{name}.csv"
        np.savetxt(path, grid, delimiter=",", fmt="%.6f")
        paths.append(path)
    return paths
