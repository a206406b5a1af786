"""Training loops for the AR and NAR models."""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .ar import ARModel, ar_generate, ar_loss, clip_to_groups
from .config import RunConfig
from .nar import NARModel, nar_greedy_infer, nar_loss
from .nn import OptimizerState, adamw_step, lr_at_step
from .sampling import RngStream, SamplingConfig
from .world import Utterance, WorldConfig, decode_text, speaker_offset, token_error_rate

log = logging.getLogger(__name__)


def make_optimizer_state(cfg: RunConfig) -> OptimizerState:
    o = cfg.optim
    return OptimizerState(
        peak_lr=o.peak_lr, warmup_steps=o.warmup_steps, total_steps=o.total_steps,
        beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay,
    )


def _batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator):
    """Endless shuffled mini-batches of indices, bucketed by length to cut padding."""
    lengths = np.asarray(lengths)
    n = lengths.size
    chunk = batch_size * 16
    while True:
        order = rng.permutation(n)
        batches = []
        for c in range(0, n, chunk):
            part = order[c:c + chunk]
            part = part[np.argsort(lengths[part], kind="stable")]
            batches += [part[i:i + batch_size] for i in range(0, part.size - batch_size + 1, batch_size)]
        for b in rng.permutation(len(batches)):
            yield batches[b]


def _run(
    model: torch.nn.Module,
    loss_fn: Callable[[Sequence[int]], torch.Tensor],
    lengths: Sequence[int],
    cfg: RunConfig,
    seed: int,
    validate: Optional[Callable[[], float]] = None,
    log_path=None,
) -> OptimizerState:
    state = make_optimizer_state(cfg)
    params = [p for p in model.parameters()]
    batches = _batches(lengths, min(cfg.optim.batch_size, len(lengths)), np.random.default_rng(seed))
    writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "val_ter", "lr", "elapsed_s"])
    t0 = time.time()
    running = []
    model.train()
    for step in range(1, cfg.optim.total_steps + 1):
        loss = loss_fn(next(batches))
        model.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.optim.grad_clip)
        adamw_step(params, [p.grad for p in params], state)
        running.append(loss.item())
        if step % cfg.optim.log_every == 0 or step == cfg.optim.total_steps:
            model.eval()
            val = validate() if validate else float("nan")
            model.train()
            mean_loss = float(np.mean(running))
            running.clear()
            log.info("step %d loss %.4f val_ter %.4f (%.0fs)", step, mean_loss, val, time.time() - t0)
            if writer:
                writer.writerow([step, f"{mean_loss:.6f}", f"{val:.6f}",
                                 f"{lr_at_step(step - 1, state):.6g}",
                                 f"{time.time() - t0:.1f}"])
                fh.flush()
    model.eval()
    if writer:
        fh.close()
    return state


def _continuation_split(u: Utterance, prompt_frames: int, expansion: int):
    n = min(prompt_frames, u.codes.shape[0]) // expansion * expansion
    return n


def ar_validation_ter(model: ARModel, utts: Sequence[Utterance], prompt_frames: int) -> float:
    """Greedy continuation TER judged on the first stream only."""
    world = model.world
    ters = []
    for u in utts:
        n = _continuation_split(u, prompt_frames, world.expansion)
        text, prompt = clip_to_groups(u.text, u.codes[:n, 0], model.group_size, world.expansion)
        n_ref = -(-(u.codes.shape[0] - n) // model.group_size)
        res = ar_generate(model, text, prompt, SamplingConfig(top_p=0.0), max_groups=4 * n_ref + 4)
        col = np.concatenate([u.codes[:n, 0], np.asarray(res.codes, dtype=np.int64)])[:, None]
        hyp = decode_text(col, speaker_offset(u.speaker, world), world)
        ters.append(token_error_rate(hyp, u.text))
    return float(np.mean(ters)) if ters else float("nan")


def nar_validation_ter(model: NARModel, utts: Sequence[Utterance], prompt_frames: int) -> float:
    world = model.world
    ters = []
    for u in utts:
        n = _continuation_split(u, prompt_frames, world.expansion)
        full = nar_greedy_infer(model, u.text, u.codes[:n], u.codes[n:, 0])
        hyp = decode_text(full, speaker_offset(u.speaker, world), world)
        ters.append(token_error_rate(hyp, u.text))
    return float(np.mean(ters)) if ters else float("nan")


def augment_offsets(world: WorldConfig) -> np.ndarray:
    """Offsets a training utterance may be shifted to: everything a held-out speaker does not use."""
    held = {speaker_offset(s, world) for s in world.held_out_speakers}
    return np.array([o for o in range(world.code_vocab) if o not in held])


def shift_codes(codes: np.ndarray, shift: int, world: WorldConfig) -> np.ndarray:
    """Same text, another voice: adding a constant to every code changes only the speaker offset."""
    return (np.asarray(codes) + shift) % world.code_vocab


def train_ar(corpus: Sequence[Utterance], cfg: RunConfig, group_size: int, seed: int,
             val: Sequence[Utterance] = (), log_path=None) -> tuple[ARModel, int]:
    torch.manual_seed(seed)
    model = ARModel(cfg.world, cfg.model, group_size)
    pairs = [(u.text, u.codes[:, 0]) for u in corpus]
    offsets = [speaker_offset(u.speaker, cfg.world) for u in corpus]
    targets = augment_offsets(cfg.world)
    aug_rng = np.random.default_rng([seed, 2])

    def loss_fn(idx):
        if not cfg.data.offset_augment:
            return ar_loss(model, [pairs[i] for i in idx])
        new = aug_rng.choice(targets, size=len(idx))
        return ar_loss(model, [(pairs[i][0], shift_codes(pairs[i][1], int(o) - offsets[i], cfg.world))
                               for i, o in zip(idx, new)])

    validate = (lambda: ar_validation_ter(model, val, cfg.data.prompt_frames)) if val else None
    state = _run(model, loss_fn, [len(c) for _, c in pairs], cfg, seed, validate, log_path)
    return model, state.step


def train_nar(corpus: Sequence[Utterance], cfg: RunConfig, seed: int,
              val: Sequence[Utterance] = (), log_path=None) -> tuple[NARModel, int]:
    torch.manual_seed(seed)
    model = NARModel(cfg.world, cfg.model)
    pairs = [(u.text, u.codes) for u in corpus]
    rng = RngStream(seed, 1)

    def loss_fn(idx):
        return nar_loss(model, [pairs[i] for i in idx], rng, cfg.data.cond_frames)

    validate = (lambda: nar_validation_ter(model, val, cfg.data.prompt_frames)) if val else None
    state = _run(model, loss_fn, [len(c) for _, c in pairs], cfg, seed, validate, log_path)
    return model, state.step
