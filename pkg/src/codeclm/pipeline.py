"""Zero-shot synthesis: prompt assembly, AR -> NAR composition, candidate selection."""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .ar import ARModel, ar_generate, clip_to_groups
from .nar import NARModel, nar_greedy_infer
from .sampling import RngStream, SamplingConfig
from .world import (
    Utterance,
    WorldConfig,
    decode_text,
    infer_speaker_offset,
    surrogate_sim,
    token_error_rate,
)

SIM_CLAMP = 0.3
CUTOFF_FACTOR = 4


class PromptMode(str, Enum):
    CONTINUATION = "continuation"
    REFERENCE = "reference"


@dataclass
class PromptSpec:
    mode: PromptMode
    prompt_text: list[int]
    prompt_codes: np.ndarray  # [T', J]
    target_text: list[int]


@dataclass
class Candidate:
    codes: np.ndarray       # prompt ++ generated, [T, J]
    generated: np.ndarray   # generated frames only, [T_gen, J]
    sim: float
    ter: float
    hit_cutoff: bool
    ar_steps: int
    ar_seconds: float = 0.0


def continuation_prompt(utt: Utterance, prompt_frames: int, world: WorldConfig) -> PromptSpec:
    """Prefix of the utterance itself as the prompt, full transcript as text."""
    n_tokens = min(prompt_frames, utt.codes.shape[0]) // world.expansion
    n = n_tokens * world.expansion
    return PromptSpec(PromptMode.CONTINUATION, list(utt.text[:n_tokens]),
                      utt.codes[:n].copy(), list(utt.text[n_tokens:]))


def reference_prompt(prompt_utt: Utterance, target_utt: Utterance) -> PromptSpec:
    """Another utterance of the same speaker as the prompt."""
    if prompt_utt.speaker != target_utt.speaker:
        raise ValueError("reference prompt must come from the target's speaker")
    return PromptSpec(PromptMode.REFERENCE, list(prompt_utt.text),
                      prompt_utt.codes.copy(), list(target_utt.text))


def default_max_groups(spec: PromptSpec, G: int, world: WorldConfig) -> int:
    ref_groups = -(-world.expansion * len(spec.target_text) // G)
    return max(1, CUTOFF_FACTOR * ref_groups)


def check_compatible(ar: ARModel, nar: NARModel, G: Optional[int] = None) -> None:
    if ar.world != nar.world:
        raise ValueError(f"world config mismatch: AR {ar.world} vs NAR {nar.world}")
    if G is not None and G != ar.group_size:
        raise ValueError(f"requested group size {G} but AR checkpoint has {ar.group_size}")


def synthesize(
    spec: PromptSpec,
    ar: ARModel,
    nar: NARModel,
    sampling: SamplingConfig,
    max_groups: Optional[int] = None,
    rng: Optional[RngStream] = None,
    group_size: Optional[int] = None,
) -> Candidate:
    """Generate one candidate and score it with the surrogate metrics.

    Continuation candidates are scored over the whole utterance (prompt and
    continuation); reference candidates over the generated speech only.
    """
    check_compatible(ar, nar, group_size)
    world = ar.world
    G = ar.group_size
    rng = rng or RngStream(sampling.seed)
    text = list(spec.prompt_text) + list(spec.target_text)
    prompt = np.asarray(spec.prompt_codes, dtype=np.int64)
    ar_text, ar_prompt = clip_to_groups(text, prompt[:, 0], G, world.expansion)
    if max_groups is None:
        max_groups = default_max_groups(spec, G, world)
    t0 = time.perf_counter()
    res = ar_generate(ar, ar_text, ar_prompt, sampling, max_groups, rng)
    ar_seconds = time.perf_counter() - t0
    full = nar_greedy_infer(nar, text, prompt, res.codes)
    generated = full[prompt.shape[0]:]
    offset = infer_speaker_offset(prompt, spec.prompt_text, world)
    if spec.mode is PromptMode.CONTINUATION:
        scored, ref = full, text
    else:
        scored, ref = generated, list(spec.target_text)
    hyp = decode_text(scored, offset, world)
    return Candidate(
        codes=full, generated=generated,
        sim=surrogate_sim(scored, hyp, offset, world),
        ter=token_error_rate(hyp, ref),
        hit_cutoff=res.hit_cutoff, ar_steps=res.ar_steps, ar_seconds=ar_seconds,
    )


def synthesize_many(spec: PromptSpec, ar: ARModel, nar: NARModel, sampling: SamplingConfig,
                    n: int, max_groups: Optional[int] = None) -> list[Candidate]:
    """``n`` candidates; candidate i draws from stream ``seed ^ i``."""
    return [synthesize(spec, ar, nar, sampling, max_groups, RngStream(sampling.seed, i))
            for i in range(n)]


def selection_key(c: Candidate) -> tuple[float, float]:
    return (min(c.sim, SIM_CLAMP), 1.0 - c.ter)


def sort_candidates(cands: Sequence[Candidate]) -> Candidate:
    """Lexicographic best of [min(sim, 0.3), 1 - ter]; the earliest candidate wins ties."""
    if not cands:
        raise ValueError("no candidates")
    best = 0
    for i in range(1, len(cands)):
        if selection_key(cands[i]) > selection_key(cands[best]):
            best = i
    return cands[best]


def metric_wise_max(cands: Sequence[Candidate]) -> tuple[float, float]:
    """(best sim, best ter), each chosen independently."""
    if not cands:
        raise ValueError("no candidates")
    return max(c.sim for c in cands), min(c.ter for c in cands)
