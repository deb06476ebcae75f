"""Vision transformer with a foveated per-fixation path and a full-resolution path.

Both paths share one set of parameters and one architecture:

* ``depth`` standard pre-norm encoder blocks,
* a penultimate block whose class-token attention drives the fixation policy,
* a final block that aggregates class-token outputs across fixations,
* a layer-norm + linear classification head.

The foveated path feeds ``capacity + 1`` tokens per fixation (class token plus
pooled features).  The full-resolution path feeds all 196 patch embeddings
plus the class token through every block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import numeric as nc
from .geometry import FoveaLayout, build_canonical_layout, foveation_tables


@dataclass
class ModelConfig:
    image_side: int = 112
    patch_side: int = 8
    dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    n_classes: int = 10
    channels: int = 3
    capacity: int = 29

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError("image_side must be divisible by patch_side")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side**2

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: torch.Tensor, patch_side: int) -> torch.Tensor:
    """``(B, H, W, C)`` images to ``(B, N, C * p * p)`` row-major patches.

    Values inside a patch are ordered channel-major, then row, then column.
    """
    if images.dim() == 3:
        return patchify(images.unsqueeze(0), patch_side)[0]
    b, h, w, c = images.shape
    if h != w or h % patch_side:
        raise ValueError(f"image shape {(h, w)} is not a square multiple of {patch_side}")
    g = h // patch_side
    x = images.reshape(b, g, patch_side, g, patch_side, c)
    x = x.permute(0, 1, 3, 5, 2, 4)  # b, gy, gx, c, py, px
    return x.reshape(b, g * g, c * patch_side * patch_side)


def unpatchify(patches: torch.Tensor, patch_side: int, channels: int = 3) -> torch.Tensor:
    b, n, _ = patches.shape
    g = math.isqrt(n)
    x = patches.reshape(b, g, g, channels, patch_side, patch_side)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, g * patch_side, g * patch_side, channels)


class Block(nn.Module):
    """Pre-norm encoder block: masked multi-head self-attention then an MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        hidden = dim * mlp_ratio
        self.ln1_g = nn.Parameter(torch.ones(dim))
        self.ln1_b = nn.Parameter(torch.zeros(dim))
        self.qkv_w = nn.Parameter(torch.empty(3 * dim, dim))
        self.qkv_b = nn.Parameter(torch.zeros(3 * dim))
        self.proj_w = nn.Parameter(torch.empty(dim, dim))
        self.proj_b = nn.Parameter(torch.zeros(dim))
        self.ln2_g = nn.Parameter(torch.ones(dim))
        self.ln2_b = nn.Parameter(torch.zeros(dim))
        self.fc1_w = nn.Parameter(torch.empty(hidden, dim))
        self.fc1_b = nn.Parameter(torch.zeros(hidden))
        self.fc2_w = nn.Parameter(torch.empty(dim, hidden))
        self.fc2_b = nn.Parameter(torch.zeros(dim))
        for w in (self.qkv_w, self.proj_w, self.fc1_w, self.fc2_w):
            nn.init.trunc_normal_(w, std=0.02)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, return_attn: bool = False):
        b, n, d = x.shape
        h = self.heads
        y = nc.layer_norm(x, self.ln1_g, self.ln1_b)
        qkv = nc.linear(y, self.qkv_w, self.qkv_b).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nc.matmul(q * (d // h) ** -0.5, nc.transpose(k))
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = nc.softmax(scores, dim=-1)
        y = nc.matmul(attn, v).transpose(1, 2).reshape(b, n, d)
        x = x + nc.linear(y, self.proj_w, self.proj_b)
        y = nc.layer_norm(x, self.ln2_g, self.ln2_b)
        x = x + nc.linear(nc.gelu(nc.linear(y, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)
        if return_attn:
            return x, attn
        return x


class VisionTransformer(nn.Module):
    def __init__(self, config: ModelConfig, layout: FoveaLayout | None = None):
        super().__init__()
        layout = layout or build_canonical_layout()
        if config.grid_side != layout.image_side:
            raise ValueError(f"patch grid {config.grid_side} does not match layout image side {layout.image_side}")
        if config.capacity != layout.capacity:
            raise ValueError(f"config capacity {config.capacity} != layout capacity {layout.capacity}")
        self.config = config
        self.layout = layout
        d, g = config.dim, config.grid_side
        self.patch_w = nn.Parameter(torch.empty(d, config.patch_dim))
        self.patch_b = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.empty(g, g, d))
        self.cls_token = nn.Parameter(torch.empty(d))
        self.fix_token = nn.Parameter(torch.empty(d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.penultimate = Block(d, config.heads, config.mlp_ratio)
        self.final = Block(d, config.heads, config.mlp_ratio)
        self.norm_g = nn.Parameter(torch.ones(d))
        self.norm_b = nn.Parameter(torch.zeros(d))
        self.head_w = nn.Parameter(torch.empty(config.n_classes, d))
        self.head_b = nn.Parameter(torch.zeros(config.n_classes))
        nn.init.xavier_uniform_(self.patch_w)
        for p in (self.pos_embed, self.cls_token, self.fix_token, self.head_w):
            nn.init.trunc_normal_(p, std=0.02)

        tables = foveation_tables(layout)
        self.register_buffer("pool_mats", torch.from_numpy(tables.matrices).float(), persistent=False)
        self.register_buffer("pool_mask", torch.from_numpy(tables.mask), persistent=False)
        self.pool_centers = tables.centers
        self.pool_counts = tables.counts

    @property
    def cost_per_fixation(self) -> int:
        return self.config.capacity + 1

    @property
    def cost_unfoveated(self) -> int:
        return self.config.grid_side**2 + 1

    # -- embedding ---------------------------------------------------------

    def embed_with_positions(self, images: torch.Tensor) -> torch.Tensor:
        """Images ``(B, H, W, C)`` to position-added features ``(B, 14, 14, dim)``."""
        patches = patchify(images, self.config.patch_side)
        g = self.config.grid_side
        e = nc.linear(patches, self.patch_w, self.patch_b)
        return e.reshape(e.shape[0], g, g, -1) + self.pos_embed

    # -- foveated path -----------------------------------------------------

    def foveate(self, features: torch.Tensor, fixations) -> tuple[torch.Tensor, torch.Tensor]:
        """Pool ``(B, 14, 14, dim)`` features at per-image fixations ``(B, 2)`` of ``(x, y)``.

        Returns padded tokens ``(B, capacity, dim)`` and the validity mask.
        """
        fixations = np.asarray(fixations, dtype=np.int64).reshape(-1, 2)
        g = self.config.grid_side
        idx = torch.from_numpy(fixations[:, 1] * g + fixations[:, 0])
        b = features.shape[0]
        mats = self.pool_mats[idx].to(features.dtype)
        pooled = torch.bmm(mats, features.reshape(b, g * g, -1))
        return pooled, self.pool_mask[idx]

    def with_class_token(self, tokens: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b = tokens.shape[0]
        cls = self.cls_token.expand(b, 1, -1)
        seq = torch.cat([cls, tokens], dim=1)
        full_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        return seq, full_mask

    def encoder_forward(self, seq: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        for blk in self.blocks:
            seq = blk(seq, mask)
        return seq

    def penultimate_forward(self, seq: torch.Tensor, mask: torch.Tensor | None = None):
        """Run the penultimate block; also return class-token attention over feature keys.

        Attention is averaged over heads, the class token's self-weight is
        dropped and the remainder renormalized, so each row sums to 1.
        """
        seq, attn = self.penultimate(seq, mask, return_attn=True)
        weights = attn[:, :, 0, 1:].mean(dim=1)
        weights = weights / weights.sum(dim=-1, keepdim=True)
        return seq, weights

    def fixation_step(self, features: torch.Tensor, fixations):
        """One fixation for a batch: returns class output, feature attention and mask."""
        tokens, mask = self.foveate(features, fixations)
        seq, full_mask = self.with_class_token(tokens, mask)
        seq = self.encoder_forward(seq, full_mask)
        seq, weights = self.penultimate_forward(seq, full_mask)
        return seq[:, 0], weights, mask

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        return nc.linear(nc.layer_norm(x, self.norm_g, self.norm_b), self.head_w, self.head_b)

    def aggregate_fixations(self, class_outputs: torch.Tensor) -> torch.Tensor:
        """Final block over ``[fixation_token, class outputs...]``; logits from the fixation token.

        ``class_outputs`` is ``(B, k, dim)`` with ``k >= 1``.  No positional
        terms are added, so the result does not depend on fixation order.
        """
        if class_outputs.dim() == 2:
            class_outputs = class_outputs.unsqueeze(0)
        if class_outputs.shape[1] == 0:
            raise ValueError("aggregate_fixations needs at least one class output")
        b = class_outputs.shape[0]
        seq = torch.cat([self.fix_token.expand(b, 1, -1), class_outputs], dim=1)
        seq = self.final(seq)
        return self.classify(seq[:, 0])

    # -- full-resolution path ---------------------------------------------

    def forward_unfoveated_features(self, features: torch.Tensor) -> torch.Tensor:
        b = features.shape[0]
        tokens = features.reshape(b, -1, features.shape[-1])
        seq = torch.cat([self.cls_token.expand(b, 1, -1), tokens], dim=1)
        seq = self.encoder_forward(seq)
        seq = self.penultimate(seq)
        seq = self.final(seq)
        return self.classify(seq[:, 0])

    def forward_unfoveated(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_unfoveated_features(self.embed_with_positions(images))

    # -- checkpoints -------------------------------------------------------

    def checkpoint_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.load_state_dict({k: v.to(self.patch_w.dtype) for k, v in tensors.items()})


def save_model(model: VisionTransformer, path, meta: dict | None = None) -> None:
    info = {"model_config": model.config.to_dict(), "layout_capacity": model.layout.capacity}
    info.update(meta or {})
    nc.save_checkpoint(path, model.checkpoint_tensors(), info)


def load_model(path, layout: FoveaLayout | None = None) -> tuple[VisionTransformer, dict]:
    tensors, meta = nc.load_checkpoint(path)
    model = VisionTransformer(ModelConfig(**meta["model_config"]), layout)
    model.load_tensors(tensors)
    model.eval()
    return model, meta
