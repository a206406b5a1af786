"""Small transformer substrate shared by the AR and NAR codec models.

Everything here runs on CPU in float32 (or float64 for gradient checks).
Causal masking, key padding and incremental decoding with a key/value
cache share one attention code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


class MaskKind(str, Enum):
    CAUSAL = "causal"
    FULL = "full"


def embedding_lookup(table: torch.Tensor, ids) -> torch.Tensor:
    """Select rows of ``table`` by index; out-of-range ids raise ``IndexError``."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel():
        bad = (ids < 0) | (ids >= table.shape[0])
        if bool(bad.any()):
            pos = int(torch.nonzero(bad.flatten())[0])
            raise IndexError(
                f"embedding id {int(ids.flatten()[pos])} at position {pos} "
                f"outside [0, {table.shape[0]})"
            )
    return table[ids]


def cross_entropy(
    logits: torch.Tensor,
    targets: torch.Tensor,
    weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean negative log-likelihood over unmasked rows of ``logits`` [N, V]."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexError(f"target outside [0, {logits.shape[-1]})")
    nll = F.cross_entropy(logits, targets, reduction="none")
    if weights is None:
        if nll.numel() == 0:
            raise ValueError("empty loss")
        return nll.mean()
    weights = weights.to(nll.dtype)
    total = weights.sum()
    if float(total) == 0.0:
        raise ValueError("empty loss")
    return (nll * weights).sum() / total


class KVCache:
    """Per-block key/value history for incremental decoding (batch size 1)."""

    def __init__(self, n_blocks: int):
        self.keys: list[Optional[torch.Tensor]] = [None] * n_blocks
        self.values: list[Optional[torch.Tensor]] = [None] * n_blocks

    def __len__(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[-2]

    def update(self, idx: int, k: torch.Tensor, v: torch.Tensor):
        if self.keys[idx] is not None:
            k = torch.cat([self.keys[idx], k], dim=-2)
            v = torch.cat([self.values[idx], v], dim=-2)
        self.keys[idx] = k
        self.values[idx] = v
        return k, v


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(
        self,
        x: torch.Tensor,
        mask: MaskKind,
        key_padding: Optional[torch.Tensor] = None,
        cache: Optional[KVCache] = None,
        block_idx: int = 0,
    ) -> torch.Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        past = 0
        if cache is not None:
            past = 0 if cache.keys[block_idx] is None else cache.keys[block_idx].shape[-2]
            k, v = cache.update(block_idx, k, v)
        allowed = None
        causal = mask is MaskKind.CAUSAL
        if causal and (past or key_padding is not None):
            qpos = torch.arange(past, past + L).unsqueeze(1)
            allowed = torch.arange(k.shape[-2]).unsqueeze(0) <= qpos
            causal = False
        if key_padding is not None:
            keep = ~key_padding[:, None, None, :]
            allowed = keep if allowed is None else allowed & keep
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed, is_causal=causal and L > 1)
        y = att.transpose(1, 2).reshape(B, L, D)
        return self.out(y)


class TransformerBlock(nn.Module):
    """Pre-norm attention + GELU feed-forward, both with residual connections."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model),
        )

    def forward(self, x, mask: MaskKind, key_padding=None, cache=None, block_idx=0):
        if not bool(torch.isfinite(x).all()):
            raise FloatingPointError("non-finite input to transformer block")
        x = x + self.attn(self.norm1(x), mask, key_padding, cache, block_idx)
        return x + self.ff(self.norm2(x))


class TransformerStack(nn.Module):
    def __init__(self, d_model: int, n_heads: int, n_blocks: int, mask: MaskKind):
        super().__init__()
        self.mask = MaskKind(mask)
        self.blocks = nn.ModuleList(TransformerBlock(d_model, n_heads) for _ in range(n_blocks))
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, key_padding=None, cache: Optional[KVCache] = None):
        for i, block in enumerate(self.blocks):
            x = block(x, self.mask, key_padding, cache, i)
        return self.norm(x)

    def new_cache(self) -> KVCache:
        return KVCache(len(self.blocks))


def init_weights(module: nn.Module) -> None:
    """normal(0, 0.02) for weight matrices and free vectors, zeros for biases."""
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        with torch.no_grad():
            if isinstance(owner, nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                p.normal_(0.0, INIT_STD)


# -- optimisation -----------------------------------------------------------


@dataclass
class OptimizerState:
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    total_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at_step(step: int, state: OptimizerState) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    step = min(max(step, 0), state.total_steps)
    if step < state.warmup_steps:
        return state.peak_lr * step / state.warmup_steps
    span = state.total_steps - state.warmup_steps
    return state.peak_lr * (state.total_steps - step) / span


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    state: OptimizerState,
) -> None:
    """One decoupled-weight-decay Adam update, in place, at ``lr_at_step(state.step)``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    lr = lr_at_step(state.step, state)
    t = state.step + 1
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)} (index {i})")
        m, v = state.exp_avg[i], state.exp_avg_sq[i]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.mul_(1 - lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    state.step += 1
