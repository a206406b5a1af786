"""Grouped autoregressive model over the first quantizer stream.

Input layout for one utterance (text length L, n groups of size G)::

    [ text_0 .. text_{L-1} | <eos> | <bos> | group_0 .. group_{n-1} ]

The hidden state at <bos> predicts group 0 and the hidden state at group
t predicts group t+1. Codes inside a group are predicted in parallel from
one hidden state: a d -> G*d projection is split into G slices and every
slice is scored against the (tied) code embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

from .config import ModelConfig
from .grouping import check_group_size
from .nn import MaskKind, TransformerStack, cross_entropy, embedding_lookup, init_weights
from .sampling import RngStream, SamplingConfig, ras_sample
from .world import WorldConfig


class ARModel(nn.Module):
    kind = "ar"

    def __init__(self, world: WorldConfig, cfg: ModelConfig, group_size: int):
        super().__init__()
        self.world = world
        self.cfg = cfg
        self.group_size = G = check_group_size(group_size)
        d = cfg.d_model
        self.text_emb = nn.Parameter(torch.empty(world.text_vocab + 1, d))
        self.code_emb = nn.Parameter(torch.empty(world.code_vocab + 1, d))
        self.group_embed = nn.Linear(G * d, d)
        self.group_predict = nn.Linear(d, G * d)
        self.eos_emb = nn.Parameter(torch.empty(d))
        self.bos_emb = nn.Parameter(torch.empty(d))
        self.pos_text = nn.Parameter(torch.empty(cfg.max_text_len, d))
        self.pos_code = nn.Parameter(torch.empty(cfg.max_code_len, d))
        self.transformer = TransformerStack(d, cfg.n_heads, cfg.n_blocks, MaskKind.CAUSAL)
        init_weights(self)

    @property
    def eos_code(self) -> int:
        return self.world.code_vocab

    def embed_groups(self, c0, start: int = 0) -> torch.Tensor:
        """Group embeddings [n, d] of a flat code sequence, with positions from ``start``."""
        c0 = torch.as_tensor(c0, dtype=torch.long)
        G, d = self.group_size, self.cfg.d_model
        if c0.numel() % G:
            raise ValueError(f"{c0.numel()} codes is not a multiple of group size {G}")
        n = c0.numel() // G
        if start + n > self.cfg.max_code_len:
            raise ValueError(f"code span of {start + n} groups exceeds max_code_len={self.cfg.max_code_len}")
        e = embedding_lookup(self.code_emb, c0).reshape(n, G * d)
        return self.group_embed(e) + self.pos_code[start:start + n]

    def assemble_input(self, text, c0) -> torch.Tensor:
        """E^x || [eos, bos] || E^g with separate text and group position tables."""
        text = torch.as_tensor(text, dtype=torch.long)
        if text.numel() > self.cfg.max_text_len:
            raise ValueError(f"text of {text.numel()} tokens exceeds max_text_len={self.cfg.max_text_len}")
        ex = embedding_lookup(self.text_emb, text) + self.pos_text[: text.numel()]
        ctrl = torch.stack([self.eos_emb, self.bos_emb])
        return torch.cat([ex, ctrl, self.embed_groups(c0)])

    def group_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        """[..., d] -> [..., G, V_c + 1]; slices never see each other's samples."""
        slices = self.group_predict(hidden).unflatten(-1, (self.group_size, self.cfg.d_model))
        return slices @ self.code_emb.T

    def forward_hidden(self, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
        # right padding: the causal mask already hides pads from real positions
        return self.transformer(pad_sequence(list(inputs), batch_first=True))


def clip_to_groups(text: Sequence[int], c0: Sequence[int], G: int, expansion: int):
    """Drop ``len(c0) % G`` leading codes, plus the text tokens they fully cover."""
    clip = len(c0) % G
    return list(text)[clip // expansion:], list(c0)[clip:]


@dataclass
class ARExample:
    text: list[int]
    inputs: list[int]   # codes fed to the group embedding (whole groups)
    targets: list[int]  # codes ++ EOS, padded with EOS to a group boundary


def prepare_ar_example(text, c0, G: int, world: WorldConfig) -> ARExample:
    text, c0 = clip_to_groups(text, [int(c) for c in c0], G, world.expansion)
    targets = c0 + [world.eos_code]
    targets += [world.eos_code] * (-len(targets) % G)
    n_groups = len(targets) // G
    return ARExample(text, targets[: (n_groups - 1) * G], targets)


def ar_loss(model: ARModel, batch: Sequence[tuple]) -> torch.Tensor:
    """Mean code-level NLL over a batch of ``(text, c0)`` pairs."""
    if not batch:
        raise ValueError("empty batch")
    G = model.group_size
    examples = [prepare_ar_example(t, c, G, model.world) for t, c in batch]
    hidden = model.forward_hidden([model.assemble_input(e.text, e.inputs) for e in examples])
    rows, cols, targets = [], [], []
    for b, e in enumerate(examples):
        n = len(e.targets) // G
        first = len(e.text) + 1  # the <bos> position
        rows += [b] * n
        cols += range(first, first + n)
        targets += e.targets
    logits = model.group_logits(hidden[rows, cols])  # [N, G, V]
    return cross_entropy(logits.reshape(-1, logits.shape[-1]), torch.tensor(targets))


# -- decoding -----------------------------------------------------------------


class GroupSource(Protocol):
    """Anything that yields per-slice distributions for the next group."""

    def start(self) -> np.ndarray: ...

    def feed(self, group: Sequence[int]) -> np.ndarray: ...


def _probs(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits.double(), dim=-1).numpy()


class ARDecodeState:
    """Incremental decoder for one utterance; owns its KV cache."""

    def __init__(self, model: ARModel, text, prompt_c0):
        self.model = model
        self.text = list(text)
        self.prompt = [int(c) for c in prompt_c0]
        if len(self.prompt) % model.group_size:
            raise ValueError("prompt length must be a multiple of the group size")
        self.cache = model.transformer.new_cache()
        self.n_groups = len(self.prompt) // model.group_size
        self.forward_passes = 0

    @property
    def capacity(self) -> int:
        """Groups that can still be fed before the position table runs out."""
        return self.model.cfg.max_code_len - self.n_groups

    @torch.no_grad()
    def start(self) -> np.ndarray:
        x = self.model.assemble_input(self.text, self.prompt)[None]
        h = self.model.transformer(x, cache=self.cache)
        self.forward_passes += 1
        return _probs(self.model.group_logits(h[0, -1]))

    @torch.no_grad()
    def feed(self, group: Sequence[int]) -> np.ndarray:
        x = self.model.embed_groups(group, start=self.n_groups)[None]
        self.n_groups += 1
        h = self.model.transformer(x, cache=self.cache)
        self.forward_passes += 1
        return _probs(self.model.group_logits(h[0, -1]))

    @torch.no_grad()
    def full_logits(self, generated: Sequence[int]) -> torch.Tensor:
        """Group logits after ``generated`` codes, recomputed without the cache."""
        x = self.model.assemble_input(self.text, self.prompt + list(generated))[None]
        return self.model.group_logits(self.model.transformer(x)[0, -1])


@dataclass
class GenerationResult:
    codes: list[int]
    hit_cutoff: bool
    ar_steps: int  # group predictions that emitted at least one code
    history: list[int] = field(default_factory=list, repr=False)


def decode_groups(
    source: GroupSource,
    G: int,
    eos: int,
    cfg: SamplingConfig,
    rng: RngStream,
    max_groups: int,
    history: Sequence[int] = (),
) -> GenerationResult:
    """Sample group after group until EOS or ``max_groups``.

    Slices inside a group are sampled in order so the repetition window sees
    every code drawn so far, prompt codes included.
    """
    if max_groups < 1:
        raise ValueError("max_groups must be >= 1")
    history = list(history)
    codes: list[int] = []
    steps = 0
    probs = source.start()
    for n in range(max_groups):
        group = []
        for g in range(G):
            tok = ras_sample(probs[g], history, cfg, rng)
            if tok == eos:
                break
            group.append(tok)
            history.append(tok)
        if group:
            steps += 1
            codes += group
        if len(group) < G:
            return GenerationResult(codes, False, steps, history)
        if n + 1 < max_groups:
            probs = source.feed(group)
    return GenerationResult(codes, True, steps, history)


def ar_generate(
    model: ARModel,
    text,
    prompt_c0,
    cfg: SamplingConfig,
    max_groups: int,
    rng: Optional[RngStream] = None,
) -> GenerationResult:
    """First-quantizer continuation of ``prompt_c0`` (already group-aligned), excluding EOS."""
    rng = rng or RngStream(cfg.seed)
    state = ARDecodeState(model, text, prompt_c0)
    max_groups = min(max_groups, state.capacity + 1)
    return decode_groups(state, model.group_size, model.eos_code, cfg, rng, max_groups, state.prompt)
