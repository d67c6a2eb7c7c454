"""Multi-scale graph-convolutional encoder and decoder."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .data import PoolingHierarchy


class LayerError(ValueError):
    pass


ACTIVATIONS = {"tanh": torch.tanh, "identity": lambda x: x, "relu": torch.relu}


def gcn_layer(A: torch.Tensor, H: torch.Tensor, W: torch.Tensor, bias: torch.Tensor | None = None,
              activation: str = "tanh") -> torch.Tensor:
    """``act(A @ H @ W + bias)`` for ``H`` of shape ``(..., K, F_in)``."""
    K = A.shape[0]
    if A.shape != (K, K) or H.shape[-2] != K or H.shape[-1] != W.shape[0]:
        raise LayerError(f"shapes do not conform: A {tuple(A.shape)}, H {tuple(H.shape)}, W {tuple(W.shape)}")
    out = A @ H @ W
    if bias is not None:
        out = out + bias
    return ACTIVATIONS[activation](out)


class GraphConv(nn.Module):
    """Graph convolution over a fully connected graph with learned adjacency."""

    def __init__(self, n_nodes: int, in_features: int, out_features: int, activation: str = "tanh"):
        super().__init__()
        self.activation = activation
        self.A = nn.Parameter(torch.eye(n_nodes) + torch.empty(n_nodes, n_nodes).uniform_(-0.05, 0.05))
        # unit-gain uniform init keeps activations from vanishing through deep stacks
        bound = math.sqrt(3.0 / in_features)
        self.W = nn.Parameter(torch.empty(in_features, out_features).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, H):
        return gcn_layer(self.A, H, self.W, self.bias, self.activation)


class GcnBlock(nn.Module):
    def __init__(self, n_nodes, in_features, out_features, n_layers=2, activation="tanh", residual=False):
        super().__init__()
        dims = [in_features] + [out_features] * n_layers
        self.layers = nn.ModuleList(GraphConv(n_nodes, a, b, activation) for a, b in zip(dims[:-1], dims[1:]))
        self.residual = residual

    def forward(self, H):
        out = H
        for layer in self.layers:
            y = layer(out)
            out = y + out if self.residual and y.shape == out.shape else y
        return out


class Encoder(nn.Module):
    """Descending blocks DN0..DN3; rows are pooled between blocks.

    The first layer maps the temporal axis (``n_frames`` columns) to ``F``.
    """

    def __init__(self, hierarchy: PoolingHierarchy, n_frames: int, F: int, n_layers: int = 2,
                 activation: str = "tanh", residual: bool = False):
        super().__init__()
        self.hierarchy = hierarchy
        sizes = hierarchy.level_sizes
        self.blocks = nn.ModuleList(
            GcnBlock(K, n_frames if l == 0 else F, F, n_layers, activation, residual) for l, K in enumerate(sizes))
        for l in range(len(sizes) - 1):
            self.register_buffer(f"pool{l}", torch.as_tensor(hierarchy.pool_matrix(l), dtype=torch.get_default_dtype()))

    def pool(self, x, level):
        return getattr(self, f"pool{level}") @ x

    def forward(self, x):
        if x.shape[-2] != self.hierarchy.level_sizes[0]:
            raise LayerError(f"encoder expects {self.hierarchy.level_sizes[0]} rows, got {x.shape[-2]}")
        feats = []
        h = x
        for l, block in enumerate(self.blocks):
            if l > 0:
                h = self.pool(h, l - 1)
            h = block(h)
            feats.append(h)
        return feats


class Decoder(nn.Module):
    """Ascending blocks AN3..AN0 with one end-GCN per scale.

    Returns per-scale predictions ordered finest first, each ``(..., K_l, n_frames)``.
    """

    def __init__(self, hierarchy: PoolingHierarchy, n_frames: int, F: int, n_layers: int = 2,
                 activation: str = "tanh", residual: bool = False):
        super().__init__()
        self.hierarchy = hierarchy
        self.F = F
        sizes = hierarchy.level_sizes
        self.blocks = nn.ModuleList(GcnBlock(K, F, F, n_layers, activation, residual) for K in sizes)
        self.heads = nn.ModuleList(
            nn.Sequential(GraphConv(K, F, F, activation), GraphConv(K, F, n_frames, "identity")) for K in sizes)
        for l in range(len(sizes) - 1):
            self.register_buffer(f"unpool{l}", torch.as_tensor(hierarchy.unpool_matrix(l), dtype=torch.get_default_dtype()))

    def unpool(self, x, level):
        return getattr(self, f"unpool{level}") @ x

    def forward(self, z):
        top = len(self.blocks) - 1
        if z.shape[-2:] != (self.hierarchy.level_sizes[top], self.F):
            raise LayerError(f"decoder expects ({self.hierarchy.level_sizes[top]}, {self.F}), got {tuple(z.shape[-2:])}")
        outputs = [None] * len(self.blocks)
        h = z
        for l in range(top, -1, -1):
            if l < top:
                h = self.unpool(h, l)
            h = self.blocks[l](h)
            outputs[l] = self.heads[l](h)
        return outputs
