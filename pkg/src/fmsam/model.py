"""The full predictor: encoder, factorised masking, auxiliary memory and decoder."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbone import Decoder, Encoder
from .config import TrainingConfig
from .data import PoolingHierarchy
from .factorisation import (MaskGenerator, SubjectEmbedding, TaskHead, factorise, fixed_masks,
                            normalize_masks, pool_summary)
from .memory import (MemoryState, QueryHeads, SlotPredictor, WriteHead, aggregate, attend, combine_beta,
                     consolidation_loss, diversity_loss, init_memory, memory_update, read)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def frames_to_rows(frames: torch.Tensor) -> torch.Tensor:
    """``(..., T, J, 3) -> (..., 3J, T)``."""
    *lead, T, J, D = frames.shape
    return frames.reshape(*lead, T, J * D).transpose(-1, -2)


def rows_to_frames(rows: torch.Tensor, dim: int = 3) -> torch.Tensor:
    """``(..., 3J, T) -> (..., T, J, 3)``."""
    *lead, K, T = rows.shape
    return rows.transpose(-1, -2).reshape(*lead, T, K // dim, dim)


class FMSAM(nn.Module):
    def __init__(self, config: TrainingConfig, hierarchy: PoolingHierarchy, n_tasks: int):
        super().__init__()
        self.config = config
        self.toggles = config.ablation.effective()
        self.hierarchy = hierarchy
        self.n_tasks = n_tasks
        dtype = DTYPES[config.dtype]
        F = config.feature_dim
        n_frames = config.t_obs + config.t_pred
        self.K3 = K3 = hierarchy.level_sizes[-1]
        self.d = d = K3 * F
        act, depth, res = config.activation, config.layers_per_block, config.residual_blocks

        self.encoder = Encoder(hierarchy, n_frames, F, depth, act, res)
        self.decoder = Decoder(hierarchy, n_frames, F, depth, act, res)
        for l in range(len(hierarchy.level_sizes) - 1):
            self.register_buffer(f"pool{l}", torch.as_tensor(hierarchy.pool_matrix(l)))

        t = self.toggles
        if t.factorisation:
            self.register_buffer("fixed", fixed_masks(F, K3))
            if t.dynamic_mask:
                self.mask_gen = MaskGenerator(K3, F, config.mask_hidden)
            self.task_head = TaskHead(K3, F, n_tasks)
            self.subject_embed = SubjectEmbedding(K3, F, config.subject_dim)
        if t.memory:
            self.heads = ("dn3", "sub", "task") if t.multi_head else ("dn3",)
            self.queries = QueryHeads(d, self.heads)
            self.write_head = WriteHead(len(self.heads) * d, d)
            self.slot_predictor = SlotPredictor(d, config.n_slots)
            self.memory = init_memory(config.n_slots, d, config.seed,
                                      capacity=config.n_windows * config.window, dtype=dtype)
        else:
            self.memory = None
        self.beta_log = None  # optional BetaLog, called on every commit
        self.to(dtype)

    @property
    def dtype(self):
        return self.encoder.blocks[0].layers[0].W.dtype

    def pooled(self, rows: torch.Tensor) -> list[torch.Tensor]:
        """Rows at every scale, finest first."""
        out = [rows]
        for l in range(len(self.hierarchy.level_sizes) - 1):
            out.append(getattr(self, f"pool{l}") @ out[-1])
        return out

    def forward(self, x: torch.Tensor, write: bool = False, stochastic: bool = False,
                generator: torch.Generator | None = None) -> dict:
        """Run one batch ``x`` of padded inputs ``(B, K0, T_obs + T)``.

        With ``write`` the memory update for this batch is computed (inside the
        graph) but not committed; call :meth:`commit_memory` after the step.
        """
        cfg, t = self.config, self.toggles
        feats = self.encoder(x)
        z = feats[-1]
        B = z.shape[0]
        out = {"z": z}

        if t.factorisation:
            residuals = self.mask_gen(z) if t.dynamic_mask else None
            masks = normalize_masks(self.fixed, residuals, cfg.tau, stochastic and t.dynamic_mask, generator)
            masks = masks.expand(B, *masks.shape[-3:])
            z_sub, z_task, z_aux = factorise(z, masks)
            summary_sub = pool_summary([z_sub])
            summary_task = pool_summary([z_task])
            out.update(masks=masks, residuals=residuals, z_sub=z_sub, z_task=z_task, z_aux=z_aux,
                       task_logits=self.task_head(summary_task), subject_embedding=self.subject_embed(summary_sub))

        z_agg = z
        if t.memory:
            M = self.memory.M
            shape = z.shape[-2:]
            beta = attend(self.queries("dn3", z), M)
            betas = [beta]
            retrieved = [read(beta, M, shape=shape)]
            if t.multi_head:
                for i, (head, zs) in enumerate((("sub", z_sub), ("task", z_task))):
                    mask = masks[:, i].reshape(B, -1)
                    b = attend(self.queries(head, zs), M, mask)
                    betas.append(b)
                    retrieved.append(read(b, M, mask, shape=shape))
            z_agg = aggregate(z, *retrieved)
            write_vec = self.write_head(torch.cat(retrieved, dim=-1))
            beta_comb = combine_beta(*betas)
            out.update(betas=betas, beta=beta_comb, write_vec=write_vec)
            hist = self.memory.history_tensor()
            if write:
                beta_mean, write_mean = beta_comb.mean(0), write_vec.mean(0)
                M_new = memory_update(M, beta_mean, write_mean)
                beta_update = self.slot_predictor(write_mean, beta_mean)
                out.update(M_new=M_new, beta_update=beta_update,
                           div=diversity_loss(M_new),
                           cons=consolidation_loss(torch.cat([hist, beta_update[None]]), cfg.window,
                                                   cfg.n_windows, cfg.cons_eps))
            else:
                out.update(div=diversity_loss(M), cons=consolidation_loss(hist, cfg.window, cfg.n_windows,
                                                                          cfg.cons_eps))
        out["z_agg"] = z_agg
        decoded = self.decoder(z_agg)
        out["preds"] = [p + base for p, base in zip(decoded, self.pooled(x))]
        return out

    @torch.no_grad()
    def commit_memory(self, out: dict) -> None:
        if self.memory is None or "M_new" not in out:
            return
        self.memory.M = out["M_new"].detach().clone()
        self.memory.push_history(out["beta_update"])
        self.memory.step += 1
        if self.beta_log is not None:
            self.beta_log(self.memory.step, out["beta_update"])

    # -- checkpoint arrays -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        if self.memory is not None:
            arrays.update(self.memory.to_arrays())
        return arrays

    def load_arrays(self, arrays) -> None:
        state = {k[len("param/"):]: torch.as_tensor(arrays[k]) for k in arrays if k.startswith("param/")}
        self.load_state_dict(state)
        if self.memory is not None:
            self.memory = MemoryState.from_arrays(arrays, dtype=self.dtype)
