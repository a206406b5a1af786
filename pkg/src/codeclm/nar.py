"""Non-autoregressive model for quantizer streams 1..7.

Input for target stream j (text length L, T frames, condition length T')::

    [ text | <eos> | frame_0 .. frame_{T-1} | <eos> | id_j ]

Condition frames (t < T') sum the embeddings of all eight codes; target
frames sum only streams 0..j-1. Each stream has its own embedding block and
the prediction for stream j is scored against block j.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

from .config import ModelConfig
from .nn import MaskKind, TransformerStack, cross_entropy, init_weights
from .sampling import RngStream
from .world import WorldConfig

log = logging.getLogger(__name__)


class NARModel(nn.Module):
    kind = "nar"

    def __init__(self, world: WorldConfig, cfg: ModelConfig):
        super().__init__()
        self.world = world
        self.cfg = cfg
        d, J = cfg.d_model, world.quantizers
        self.text_emb = nn.Parameter(torch.empty(world.text_vocab + 1, d))
        self.code_emb = nn.Parameter(torch.empty(J, world.code_vocab + 1, d))
        self.id_emb = nn.Parameter(torch.empty(J, d))
        self.eos_emb = nn.Parameter(torch.empty(d))
        self.pos_text = nn.Parameter(torch.empty(cfg.max_text_len, d))
        self.pos_code = nn.Parameter(torch.empty(cfg.max_code_len, d))
        self.transformer = TransformerStack(d, cfg.n_heads, cfg.n_blocks, MaskKind.FULL)
        init_weights(self)

    def frame_embeddings(self, codes: torch.Tensor, cond_len: int, j: int) -> torch.Tensor:
        """Per-frame sums over quantizer streams: all 8 before ``cond_len``, the first j after."""
        T, J = codes.shape
        per_stream = self.code_emb[torch.arange(J)[None, :], codes]  # [T, J, d]
        t = torch.arange(T)[:, None]
        k = torch.arange(J)[None, :]
        use = (t < cond_len) | (k < j)
        return (per_stream * use[..., None].to(per_stream.dtype)).sum(dim=1)

    def assemble_input(self, text, codes, cond_len: int, j: int) -> torch.Tensor:
        if not 1 <= j < self.world.quantizers:
            raise ValueError(f"code id j={j} outside [1, {self.world.quantizers - 1}]")
        text = torch.as_tensor(text, dtype=torch.long)
        codes = torch.as_tensor(np.asarray(codes), dtype=torch.long)
        T = codes.shape[0]
        if text.numel() > self.cfg.max_text_len or T > self.cfg.max_code_len:
            raise ValueError(f"input ({text.numel()} tokens, {T} frames) exceeds position tables")
        if codes.numel() and (codes.min() < 0 or codes.max() > self.world.code_vocab):
            raise IndexError("code id out of range")
        if text.numel() and (text.min() < 0 or text.max() > self.world.text_vocab):
            raise IndexError("text id out of range")
        ex = self.text_emb[text] + self.pos_text[: text.numel()]
        ec = self.frame_embeddings(codes, cond_len, j) + self.pos_code[:T]
        tail = torch.stack([self.eos_emb, self.id_emb[j]])
        return torch.cat([ex, self.eos_emb[None], ec, tail])

    def stream_logits(self, hidden: torch.Tensor, j: int) -> torch.Tensor:
        return hidden @ self.code_emb[j].T

    def logits(self, text, codes, cond_len: int, j: int) -> torch.Tensor:
        """Stream-j logits [T, V_c + 1] for every frame of one utterance."""
        x = self.assemble_input(text, codes, cond_len, j)
        h = self.transformer(x[None])[0]
        L = len(text)
        return self.stream_logits(h[L + 1:L + 1 + len(codes)], j)


def split_condition_length(T: int, rng: RngStream, frame_range: tuple[int, int] = (4, 32)) -> int:
    """Random condition length, never more than half the utterance and at least one frame."""
    lo, hi = frame_range
    drawn = rng.integers(lo, hi + 1)
    return max(1, min(drawn, T // 2))


def nar_loss(model: NARModel, batch: Sequence[tuple], rng: RngStream,
             frame_range: tuple[int, int] = (4, 32)) -> torch.Tensor:
    """Random-stream loss over ``(text, codes)`` pairs; only target frames are scored."""
    if not batch:
        raise ValueError("empty batch")
    inputs, picks = [], []
    for text, codes in batch:
        codes = np.asarray(codes)
        T = codes.shape[0]
        if T < 2:
            log.warning("skipping utterance with %d frames", T)
            continue
        cond = split_condition_length(T, rng, frame_range)
        j = rng.integers(1, model.world.quantizers)
        inputs.append(model.assemble_input(text, codes, cond, j))
        picks.append((len(text), T, cond, j, codes))
    if not inputs:
        raise ValueError("empty loss")
    lengths = torch.tensor([x.shape[0] for x in inputs])
    padded = pad_sequence(inputs, batch_first=True)
    pad_mask = torch.arange(padded.shape[1])[None, :] >= lengths[:, None]
    hidden = model.transformer(padded, key_padding=pad_mask)
    all_logits, all_targets = [], []
    for b, (L, T, cond, j, codes) in enumerate(picks):
        h = hidden[b, L + 1 + cond:L + 1 + T]
        all_logits.append(model.stream_logits(h, j))
        all_targets.append(torch.as_tensor(codes[cond:, j], dtype=torch.long))
    return cross_entropy(torch.cat(all_logits), torch.cat(all_targets))


@torch.no_grad()
def nar_greedy_infer(model: NARModel, text, prompt: np.ndarray, c0_target: Sequence[int]) -> np.ndarray:
    """Fill streams 1..7 of the target frames, one greedy pass per stream."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1, model.world.quantizers)
    c0_target = np.asarray(c0_target, dtype=np.int64)
    if c0_target.size == 0:
        return prompt.copy()
    cond = prompt.shape[0]
    codes = np.zeros((cond + c0_target.size, model.world.quantizers), dtype=np.int64)
    codes[:cond] = prompt
    codes[cond:, 0] = c0_target
    V = model.world.code_vocab
    for j in range(1, model.world.quantizers):
        logits = model.logits(text, codes, cond, j)[cond:, :V].numpy()
        codes[cond:, j] = np.argmax(logits, axis=-1)  # first maximum wins ties
    return codes
