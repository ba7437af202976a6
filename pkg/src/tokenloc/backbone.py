"""Patch embedding and the transformer backbone with attention capture.

The backbone runs blocks 1..L-1 and records every block's per-head
attention matrix; the final (L-th) block lives in the token-refinement
classification head. Blocks are pre-norm with a GELU MLP; attention
scores are scaled by sqrt(head_dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError

PARAM_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by every stage of the pipeline.

    Images are square (height = width = image_size); tokens form a
    grid_size x grid_size grid with grid_size = image_size // patch_size.
    """

    image_size: int
    patch_size: int
    embed_dim: int
    num_blocks: int
    num_heads: int
    num_classes: int
    mlp_ratio: int = 4
    selection_mass: float = 0.65

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1:
            raise DimensionError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise DimensionError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise DimensionError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_blocks < 2:
            raise DimensionError("num_blocks must be at least 2 (backbone plus final block)")
        if self.num_classes < 1:
            raise DimensionError("num_classes must be positive")
        if self.mlp_ratio < 1:
            raise DimensionError("mlp_ratio must be at least 1")
        if not 0.0 < self.selection_mass <= 1.0:
            raise DimensionError(f"selection_mass must be in (0, 1], got {self.selection_mass}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def _block_shapes(cfg: ModelConfig, prefix: str) -> dict:
    d, hidden = cfg.embed_dim, cfg.mlp_hidden
    shapes = {
        f"{prefix}.ln1.gamma": (d,),
        f"{prefix}.ln1.beta": (d,),
        f"{prefix}.ln2.gamma": (d,),
        f"{prefix}.ln2.beta": (d,),
        f"{prefix}.mlp.fc1.weight": (d, hidden),
        f"{prefix}.mlp.fc1.bias": (hidden,),
        f"{prefix}.mlp.fc2.weight": (hidden, d),
        f"{prefix}.mlp.fc2.bias": (d,),
    }
    for name in ("q", "k", "v", "out"):
        shapes[f"{prefix}.attn.{name}.weight"] = (d, d)
        shapes[f"{prefix}.attn.{name}.bias"] = (d,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape map of every learnable parameter for this config."""
    d, n, k = cfg.embed_dim, cfg.num_tokens, cfg.num_classes
    shapes = {
        "embed.patch.weight": (cfg.patch_dim, d),
        "embed.cls": (1, d),
        "embed.pos": (n + 1, d),
        "refine.score.weight": (d, 1),
        "refine.score.bias": (1,),
        "refine.head.weight": (d, k),
        "refine.head.bias": (k,),
        "cam.conv.weight": (k, d, 3, 3),
        "cam.conv.bias": (k,),
    }
    for i in range(cfg.num_blocks - 1):
        shapes.update(_block_shapes(cfg, f"backbone.block{i}"))
    shapes.update(_block_shapes(cfg, "refine.mask_block"))
    shapes.update(_block_shapes(cfg, "refine.final_block"))
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    for _ in range(32):
        bad = np.abs(x) > 2.0 * std
        if not bad.any():
            break
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(x, -2.0 * std, 2.0 * std).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Seeded initial weights: truncated-normal projections, zero biases
    and class token, normal position embeddings, identity layer norms."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "embed.pos":
            params[name] = rng.normal(0.0, PARAM_STD, size=shape).astype(np.float32)
        elif name.endswith("gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(("bias", "beta")) or name == "embed.cls":
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = _trunc_normal(rng, shape, PARAM_STD)
    return params


def patchify(image, patch_size: int) -> np.ndarray:
    """Split a 3xHxW image into rows of flattened non-overlapping patches.

    Row n holds patch n (raster order over the patch grid) flattened
    channel-major, then row, then column.
    """
    img = nm.as_f32(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a 3xHxW image, got shape {img.shape}")
    _, h, w = img.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    tiles = img.reshape(3, gh, patch_size, gw, patch_size)
    return np.ascontiguousarray(
        tiles.transpose(1, 3, 0, 2, 4).reshape(gh * gw, 3 * patch_size * patch_size)
    )


def unpatchify(patches: np.ndarray, patch_size: int, h: int, w: int) -> np.ndarray:
    """Inverse of patchify, reassembling the 3xHxW image."""
    gh, gw = h // patch_size, w // patch_size
    tiles = nm.as_f32(patches).reshape(gh, gw, 3, patch_size, patch_size)
    return np.ascontiguousarray(tiles.transpose(2, 0, 3, 1, 4).reshape(3, h, w))


def embed(patches, params, cfg: ModelConfig):
    """Project patches, prepend the class token, add position embeddings."""
    projected = nm.matmul(patches, params["embed.patch.weight"])
    tokens = nm.concat([params["embed.cls"], projected], axis=0)
    return nm.add(tokens, params["embed.pos"])


def mhsa(z, params, prefix: str, num_heads: int):
    """Multi-head self-attention returning the output and per-head attention.

    Each head computes softmax(Q K^T / sqrt(head_dim)); heads are
    concatenated then output-projected.
    """
    d = nm.value_of(z).shape[-1]
    if d % num_heads != 0:
        raise DimensionError(f"embedding size {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    n = nm.value_of(z).shape[0]
    q = nm.add(nm.matmul(z, params[f"{prefix}.attn.q.weight"]), params[f"{prefix}.attn.q.bias"])
    k = nm.add(nm.matmul(z, params[f"{prefix}.attn.k.weight"]), params[f"{prefix}.attn.k.bias"])
    v = nm.add(nm.matmul(z, params[f"{prefix}.attn.v.weight"]), params[f"{prefix}.attn.v.bias"])
    contexts, attn = [], []
    for head in range(num_heads):
        qh = nm.crop(q, (0, head * hd), (n, hd))
        kh = nm.crop(k, (0, head * hd), (n, hd))
        vh = nm.crop(v, (0, head * hd), (n, hd))
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(hd))
        a = nm.softmax(scores)
        attn.append(a)
        contexts.append(nm.matmul(a, vh))
    merged = nm.concat(contexts, axis=1)
    out = nm.add(nm.matmul(merged, params[f"{prefix}.attn.out.weight"]),
                 params[f"{prefix}.attn.out.bias"])
    return out, attn


def block_forward(z, params, prefix: str, num_heads: int):
    """Pre-norm transformer block: attention residual then GELU MLP residual."""
    attn_out, attn = mhsa(
        nm.layer_norm(z, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]),
        params, prefix, num_heads,
    )
    z = nm.add(z, attn_out)
    hidden = nm.gelu(nm.add(
        nm.matmul(nm.layer_norm(z, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"]),
                  params[f"{prefix}.mlp.fc1.weight"]),
        params[f"{prefix}.mlp.fc1.bias"],
    ))
    mlp_out = nm.add(nm.matmul(hidden, params[f"{prefix}.mlp.fc2.weight"]),
                     params[f"{prefix}.mlp.fc2.bias"])
    return nm.add(z, mlp_out), attn


def backbone_forward(z0, params, cfg: ModelConfig):
    """Run blocks 1..L-1 and capture each block's per-head attention."""
    z = z0
    stack = []
    for i in range(cfg.num_blocks - 1):
        z, attn = block_forward(z, params, f"backbone.block{i}", cfg.num_heads)
        stack.append(attn)
    return z, stack
