"""Auxiliary slot memory with multi-head masked retrieval and stabilisation losses.

Slots are flat vectors of length ``d = K * F``; embeddings and masks are
flattened into the same geometry before querying.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import csv
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


class MemoryAccessError(ValueError):
    pass


class MemoryUpdateError(ValueError):
    pass


@dataclass
class MemoryState:
    M: torch.Tensor  # (s, d)
    step: int = 0
    history: list[torch.Tensor] = field(default_factory=list)  # past slot-update weights, oldest first
    capacity: int = 120

    @property
    def n_slots(self) -> int:
        return self.M.shape[0]

    def push_history(self, beta_update: torch.Tensor) -> None:
        self.history.append(beta_update.detach().clone())
        if len(self.history) > self.capacity:
            del self.history[: len(self.history) - self.capacity]

    def history_tensor(self) -> torch.Tensor:
        if not self.history:
            return self.M.new_zeros(0, self.n_slots)
        return torch.stack(self.history)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "memory/M": self.M.detach().cpu().numpy(),
            "memory/step": np.array(self.step),
            "memory/history": self.history_tensor().detach().cpu().numpy(),
            "memory/capacity": np.array(self.capacity),
        }

    @classmethod
    def from_arrays(cls, arrays, dtype=None) -> "MemoryState":
        M = torch.as_tensor(arrays["memory/M"], dtype=dtype)
        hist = torch.as_tensor(arrays["memory/history"], dtype=dtype)
        return cls(M, int(arrays["memory/step"]), list(hist), int(arrays["memory/capacity"]))


def save_snapshot(state: MemoryState, path) -> None:
    """Slot matrix, iteration counter and update history as one ``.npz`` archive."""
    np.savez(path, **state.to_arrays())


def load_snapshot(path, dtype=None) -> MemoryState:
    with np.load(path) as z:
        return MemoryState.from_arrays(dict(z), dtype=dtype)


class BetaLog:
    """Appends one row per committed update: ``step, beta_0 .. beta_{s-1}``."""

    def __init__(self, path, n_slots: int):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step"] + [f"beta_{i}" for i in range(n_slots)])

    def __call__(self, step: int, beta_update: torch.Tensor) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step] + [repr(float(v)) for v in beta_update.detach().flatten()])


def init_memory(s: int, d: int, seed: int = 0, capacity: int = 120, dtype=None) -> MemoryState:
    if s < 2 or d < 1:
        raise MemoryAccessError(f"need s >= 2 and d >= 1, got s={s}, d={d}")
    rng = np.random.default_rng(seed)
    M = torch.as_tensor(rng.uniform(-0.1, 0.1, size=(s, d)), dtype=dtype or torch.get_default_dtype())
    return MemoryState(M, 0, [], capacity)


class QueryHeads(nn.Module):
    """Independent affine query maps for the overall, subject and task embeddings."""

    def __init__(self, d: int, heads=("dn3", "sub", "task")):
        super().__init__()
        self.maps = nn.ModuleDict({h: nn.Linear(d, d) for h in heads})

    def forward(self, head: str, z):
        return self.maps[head](z.reshape(*z.shape[:-2], -1) if z.dim() >= 2 else z)


def attend(q: torch.Tensor, M: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over slots of ``<q, M[i] * mask>``. ``q`` and ``mask`` are ``(..., d)``."""
    if q.shape[-1] != M.shape[-1] or (mask is not None and mask.shape[-1] != M.shape[-1]):
        raise MemoryAccessError(f"query/mask width does not match slot width {M.shape[-1]}")
    key = q if mask is None else q * mask
    return torch.softmax(key @ M.transpose(-1, -2), dim=-1)


def read(beta: torch.Tensor, M: torch.Tensor, mask: torch.Tensor | None = None, shape=None) -> torch.Tensor:
    """``sum_i beta_i * (M[i] * mask)``, optionally reshaped to ``(..., *shape)``."""
    if beta.shape[-1] != M.shape[0]:
        raise MemoryAccessError(f"{beta.shape[-1]} weights for {M.shape[0]} slots")
    out = beta @ M
    if mask is not None:
        out = out * mask
    if shape is not None:
        out = out.reshape(*out.shape[:-1], *shape)
    return out


def aggregate(z: torch.Tensor, *retrieved: torch.Tensor) -> torch.Tensor:
    """Average pool of ``[z, mu, mu_sub, mu_task]`` concatenated on the feature axis.

    Pooling the 4F-wide concatenation in groups of four aligned entries is the
    elementwise mean of the parts.
    """
    return torch.stack((z,) + retrieved, dim=0).mean(dim=0)


class WriteHead(nn.Module):
    """Affine map plus tanh from the concatenated retrievals to a slot-sized write vector."""

    def __init__(self, in_features: int, d: int):
        super().__init__()
        self.linear = nn.Linear(in_features, d)

    def forward(self, mu_cat):
        return torch.tanh(self.linear(mu_cat.reshape(*mu_cat.shape[:-2], -1)))


def combine_beta(*betas: torch.Tensor) -> torch.Tensor:
    """Mean of the head weights, so the combined weight stays on the simplex."""
    return torch.stack(betas, dim=0).mean(dim=0)


def memory_update(M: torch.Tensor, beta: torch.Tensor, write: torch.Tensor) -> torch.Tensor:
    """Erase-then-add: ``M'[i] = (1 - beta_i) M[i] + beta_i * write``."""
    if torch.any(beta < 0) or torch.any(beta > 1):
        raise MemoryUpdateError("slot weights must lie in [0, 1]")
    if beta.shape != (M.shape[0],) or write.shape != (M.shape[1],):
        raise MemoryUpdateError(f"shapes do not conform: M {tuple(M.shape)}, beta {tuple(beta.shape)}, "
                                f"write {tuple(write.shape)}")
    b = beta[:, None]
    return (1 - b) * M + b * write[None, :]


class SlotPredictor(nn.Module):
    """Predicts which slots need updating from the write vector and combined weights."""

    def __init__(self, d: int, s: int):
        super().__init__()
        self.linear = nn.Linear(d + s, s)

    def forward(self, write, beta):
        return torch.softmax(self.linear(torch.cat([write, beta], dim=-1)), dim=-1)


def diversity_loss(M: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Sum of pairwise slot cosines over ``i < j``, divided by ``s(s-1)``.

    Zero-norm slots have cosine 0 with everything.
    """
    s = M.shape[0]
    if s < 2:
        raise MemoryAccessError("diversity needs at least two slots")
    unit = M / M.norm(dim=1, keepdim=True).clamp_min(eps)
    cos = unit @ unit.T
    iu = torch.triu_indices(s, s, offset=1)
    return cos[iu[0], iu[1]].sum() / (s * (s - 1))


def consolidation_loss(history: torch.Tensor, w: int, C: int, eps: float = 1e-8) -> torch.Tensor:
    """Exponentially weighted mean log-changes of the slot-update weights.

    ``history`` is ``(H, s)``, oldest first. Consecutive log-differences are
    split into contiguous windows of ``w`` counted back from the newest; at
    most ``C`` complete windows are kept. Window ``c`` (1 = oldest kept) is
    weighted ``2**c`` so late changes cost most.
    """
    if w < 2 or eps <= 0:
        raise ValueError("need w >= 2 and eps > 0")
    H, s = history.shape
    n_win = min(C, (H - 1) // w) if H > 1 else 0
    if n_win == 0:
        return history.new_zeros(())
    logs = torch.log(history + eps)
    deltas = (logs[1:] - logs[:-1]).abs()  # (H-1, s)
    recent = deltas[deltas.shape[0] - n_win * w:]
    window_means = recent.reshape(n_win, w, s).mean(dim=1)  # (n_win, s), oldest first
    weights = 2.0 ** torch.arange(1, n_win + 1, dtype=history.dtype)
    return (window_means * weights[:, None]).sum() / s


def beta_entropy(beta: torch.Tensor) -> torch.Tensor:
    return -(beta * torch.log(beta.clamp_min(1e-30))).sum(-1)
