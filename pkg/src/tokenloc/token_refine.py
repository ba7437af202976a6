"""Token priority scoring and re-attention.

Aggregates the class-token attention rows into a preliminary priority
vector, selects tokens adaptively by cumulative attention mass, runs a
masked transformer block over the selected set to learn importance
weights, and redistributes the selected attention mass accordingly.
The discrete selection (threshold, mask, selection matrix) is a constant
for gradient purposes; gradients flow through the importance weights,
the masked attention values and the fused embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import ModelConfig, block_forward
from .errors import ContractError, DegenerateInputError, DimensionError


@dataclass
class TokenSelection:
    """Everything the selection step derives from the priority vector m.

    mask[k] = 1 iff priorities[k] >= threshold (inclusive, so the token
    defining the threshold is always kept); weights is zero off the
    selected support and sums to 1; refined redistributes the selected
    mass while conserving the total.
    """

    priorities: np.ndarray
    threshold: float
    mask: np.ndarray
    matrix: np.ndarray
    weights: object = None   # lambda, possibly a tape Node during training
    refined: object = None   # m', possibly a tape Node during training


def preliminary_attention(stack):
    """Sum the head-averaged class-token attention rows over all blocks.

    Returns the length-N priority vector (class column excluded).
    """
    if not stack:
        raise ContractError("attention stack is empty")
    total = None
    for heads in stack:
        mean = heads[0]
        for a in heads[1:]:
            mean = nm.add(mean, a)
        mean = nm.scale(mean, 1.0 / len(heads))
        n_plus_1 = nm.value_of(mean).shape[0]
        row = nm.reshape(nm.crop(mean, (0, 1), (1, n_plus_1 - 1)), (n_plus_1 - 1,))
        total = row if total is None else nm.add(total, row)
    return total


def adaptive_select(priorities, mass: float):
    """Threshold by cumulative attention mass: keep the smallest sorted
    prefix reaching fraction `mass` of the total, plus all ties.

    Sorting is stable descending (lower index first on ties); the
    threshold is the raw priority at the last prefix position and the
    mask is inclusive (p >= threshold).
    """
    if not 0.0 < mass <= 1.0:
        raise ContractError(f"mass fraction must be in (0, 1], got {mass}")
    m = nm.value_of(priorities)
    if m.ndim != 1 or m.size == 0:
        raise DimensionError(f"priorities must be a non-empty vector, got shape {m.shape}")
    if np.any(m < 0):
        raise ContractError("priorities must be nonnegative")
    order = np.argsort(-m, kind="stable")
    cum = np.cumsum(m[order].astype(np.float64))
    total = cum[-1]
    if total <= 0.0:
        raise DegenerateInputError("priority vector has zero total mass")
    k_star = int(np.searchsorted(cum, mass * total, side="left"))
    k_star = min(k_star, m.size - 1)
    tau = float(m[order[k_star]])
    mask = (m >= tau).astype(np.float32)
    return tau, mask


def selection_matrix(mask) -> np.ndarray:
    """N x N attention mask: every token sees all selected tokens plus itself."""
    b = nm.value_of(mask)
    if b.ndim != 1:
        raise DimensionError(f"mask must be a vector, got shape {b.shape}")
    matrix = np.tile(b, (b.size, 1)).astype(np.float32)
    np.fill_diagonal(matrix, 1.0)
    return matrix


def masked_mhsa(z_p, matrix, params, prefix: str, num_heads: int):
    """Self-attention over patch tokens restricted row-wise by the selection matrix."""
    n, d = nm.value_of(z_p).shape
    if d % num_heads != 0:
        raise DimensionError(f"embedding size {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    q = nm.add(nm.matmul(z_p, params[f"{prefix}.attn.q.weight"]), params[f"{prefix}.attn.q.bias"])
    k = nm.add(nm.matmul(z_p, params[f"{prefix}.attn.k.weight"]), params[f"{prefix}.attn.k.bias"])
    v = nm.add(nm.matmul(z_p, params[f"{prefix}.attn.v.weight"]), params[f"{prefix}.attn.v.bias"])
    contexts, attn = [], []
    for head in range(num_heads):
        qh = nm.crop(q, (0, head * hd), (n, hd))
        kh = nm.crop(k, (0, head * hd), (n, hd))
        vh = nm.crop(v, (0, head * hd), (n, hd))
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(hd))
        a = nm.masked_softmax(scores, matrix)
        attn.append(a)
        contexts.append(nm.matmul(a, vh))
    merged = nm.concat(contexts, axis=1)
    out = nm.add(nm.matmul(merged, params[f"{prefix}.attn.out.weight"]),
                 params[f"{prefix}.attn.out.bias"])
    return out, attn


def _masked_block_forward(z_p, matrix, params, prefix: str, num_heads: int):
    """Pre-norm block identical to the backbone's but with masked attention."""
    attn_out, attn = masked_mhsa(
        nm.layer_norm(z_p, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"]),
        matrix, params, prefix, num_heads,
    )
    z = nm.add(z_p, attn_out)
    hidden = nm.gelu(nm.add(
        nm.matmul(nm.layer_norm(z, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"]),
                  params[f"{prefix}.mlp.fc1.weight"]),
        params[f"{prefix}.mlp.fc1.bias"],
    ))
    mlp_out = nm.add(nm.matmul(hidden, params[f"{prefix}.mlp.fc2.weight"]),
                     params[f"{prefix}.mlp.fc2.bias"])
    return nm.add(z, mlp_out), attn


def importance_weights(z_p, selection: TokenSelection, params, num_heads: int):
    """Masked transformer block, per-token scalar score, masked softmax
    over the selected tokens. Zero off-support, sums to 1."""
    if float(nm.value_of(selection.mask).sum()) < 1.0:
        raise ContractError("selection mask must keep at least one token")
    n = nm.value_of(z_p).shape[0]
    z, _ = _masked_block_forward(z_p, selection.matrix, params, "refine.mask_block", num_heads)
    scores = nm.add(nm.matmul(z, params["refine.score.weight"]), params["refine.score.bias"])
    return nm.masked_softmax(nm.reshape(scores, (n,)), selection.mask)


def reattention(priorities, mask, weights):
    """Redistribute the selected tokens' mass by the importance weights.

    r = sum(m * b) / sum(lambda); m' = m * (1 - b) + lambda * r.
    Total mass is conserved; an all-zero mask passes m through unchanged.
    """
    b = nm.value_of(mask)
    if float(b.sum()) == 0.0:
        return nm.scale(priorities, 1.0)
    lam_total = float(nm.value_of(weights).astype(np.float64).sum())
    if lam_total == 0.0:
        raise ContractError("importance weights sum to zero over a non-empty selection")
    ratio = nm.div(nm.reduce_sum(nm.mul(priorities, b)), nm.reduce_sum(weights))
    kept = nm.mul(priorities, (1.0 - b).astype(np.float32))
    return nm.add(kept, nm.mul(weights, ratio))


def spatial_map(refined):
    """Reshape a length-N vector to its sqrt(N) x sqrt(N) spatial grid."""
    v = nm.value_of(refined)
    side = math.isqrt(v.size)
    if side * side != v.size:
        raise DimensionError(f"vector length {v.size} is not a perfect square")
    return nm.reshape(refined, (side, side))


def refine_classify(z_cls, z_p, weights, params, cfg: ModelConfig):
    """Classification head of the scoring branch.

    Fuses patch tokens by the importance weights, runs the final
    transformer block over [class token; fusion], projects the class row
    to logits and normalises.
    """
    n = nm.value_of(z_p).shape[0]
    fusion = nm.matmul(nm.reshape(weights, (1, n)), z_p)
    seq = nm.concat([z_cls, fusion], axis=0)
    out, _ = block_forward(seq, params, "refine.final_block", cfg.num_heads)
    cls_row = nm.crop(out, (0, 0), (1, cfg.embed_dim))
    logits = nm.add(nm.matmul(cls_row, params["refine.head.weight"]), params["refine.head.bias"])
    return nm.softmax(nm.reshape(logits, (cfg.num_classes,)))
