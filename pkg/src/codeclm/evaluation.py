"""Experiment harness: top-p sweeps plus stability and throughput reports."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .ar import ARModel, ar_generate, clip_to_groups
from .nar import NARModel
from .pipeline import (
    Candidate,
    PromptMode,
    PromptSpec,
    continuation_prompt,
    default_max_groups,
    metric_wise_max,
    reference_prompt,
    sort_candidates,
    synthesize,
)
from .sampling import RngStream, SamplingConfig
from .world import Utterance, WorldConfig

CSV_HEADER = ["v", "G", "ras", "mean_ter", "mean_sim", "cutoff_rate", "ar_steps", "wall_ms"]
RAS_OFF = float("inf")


def build_prompts(utts: Sequence[Utterance], mode: PromptMode, world: WorldConfig,
                  prompt_frames: int = 12) -> list[PromptSpec]:
    """One prompt per utterance.

    Reference mode walks each speaker's utterances in order and prompts
    utterance i with utterance i-1 (the first one with the last).
    """
    mode = PromptMode(mode)
    if mode is PromptMode.CONTINUATION:
        return [continuation_prompt(u, prompt_frames, world) for u in utts]
    by_speaker: dict[int, list[int]] = {}
    for i, u in enumerate(utts):
        by_speaker.setdefault(u.speaker, []).append(i)
    specs: list[Optional[PromptSpec]] = [None] * len(utts)
    for idx in by_speaker.values():
        if len(idx) < 2:
            raise ValueError("reference mode needs at least two utterances per speaker")
        for k, i in enumerate(idx):
            specs[i] = reference_prompt(utts[idx[k - 1]], utts[i])
    return specs


def utterance_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) & 0xFFFFFFFF


def sampling_for(v: float, ras: bool, window: int = 10, threshold: float = 0.1, seed: int = 0) -> SamplingConfig:
    return SamplingConfig(top_p=v, window=window, threshold=threshold if ras else RAS_OFF, seed=seed)


def run_specs(specs: Sequence[PromptSpec], ar: ARModel, nar: NARModel, sampling: SamplingConfig,
              seeds: Iterable[int], n_samples: int = 1) -> list[list[Candidate]]:
    """Candidates per (seed, spec): ``n_samples`` streams each."""
    out = []
    for seed in seeds:
        for i, spec in enumerate(specs):
            base = utterance_seed(seed, i)
            cfg = SamplingConfig(sampling.top_p, sampling.window, sampling.threshold, base)
            out.append([synthesize(spec, ar, nar, cfg, rng=RngStream(base, s)) for s in range(n_samples)])
    return out


@dataclass
class SweepRow:
    v: float
    G: int
    ras: bool
    mean_ter: float
    mean_sim: float
    cutoff_rate: float
    ar_steps: int
    wall_ms: float

    def csv_fields(self) -> list[str]:
        return [f"{self.v:.6f}", str(self.G), "1" if self.ras else "0", f"{self.mean_ter:.6f}",
                f"{self.mean_sim:.6f}", f"{self.cutoff_rate:.6f}", str(self.ar_steps), f"{self.wall_ms:.6f}"]


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    def select(self, G: int, ras: bool) -> list[SweepRow]:
        return sorted((r for r in self.rows if r.G == G and r.ras == ras), key=lambda r: r.v)


def sweep_top_p(
    specs: Sequence[PromptSpec],
    models: Mapping[int, tuple[ARModel, NARModel]],
    group_sizes: Sequence[int],
    top_ps: Sequence[float],
    ras_modes: Sequence[bool] = (True, False),
    seeds: Sequence[int] = (0,),
    timing: bool = True,
) -> SweepResult:
    """Full factorial sweep; each cell averages over seeds x prompts.

    With ``timing=False`` the wall-clock column is written as zero so the CSV
    is a pure function of the seeds.
    """
    missing = [G for G in group_sizes if G not in models]
    if missing:
        raise KeyError(f"no checkpoint for group sizes {missing}")
    result = SweepResult()
    for G in group_sizes:
        ar, nar = models[G]
        for ras in ras_modes:
            for v in top_ps:
                t0 = time.perf_counter()
                groups = run_specs(specs, ar, nar, sampling_for(v, ras), seeds)
                wall = (time.perf_counter() - t0) * 1000 if timing else 0.0
                cands = [c for g in groups for c in g]
                result.rows.append(SweepRow(
                    v=float(v), G=G, ras=bool(ras),
                    mean_ter=float(np.mean([c.ter for c in cands])),
                    mean_sim=float(np.mean([c.sim for c in cands])),
                    cutoff_rate=float(np.mean([c.hit_cutoff for c in cands])),
                    ar_steps=int(sum(c.ar_steps for c in cands)),
                    wall_ms=wall,
                ))
    return result


def parse_grid(spec: str) -> list[float]:
    """``"0.0:0.8:0.1"`` -> [0.0, 0.1, ..., 0.8]; a comma list is taken as-is."""
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",") if x]


GNUPLOT_TEMPLATE = """\
set datafile separator ','
set key autotitle columnhead
set xlabel 'top-p'
set ylabel 'mean TER'
plot for [G in "{groups}"] for [r in "0 1"] \\
    '{csv}' using (column("G") == G+0 && column("ras") == r+0 ? column("v") : 1/0):"mean_ter" \\
    with linespoints title sprintf("G=%s ras=%s", G, r)
"""


def write_gnuplot(csv_path, script_path, group_sizes: Sequence[int]) -> None:
    Path(script_path).write_text(
        GNUPLOT_TEMPLATE.format(groups=" ".join(map(str, group_sizes)), csv=Path(csv_path).name),
        encoding="utf-8",
    )


# -- stability ----------------------------------------------------------------


def longest_run(codes: Sequence[int]) -> int:
    best = run = 0
    prev = None
    for c in codes:
        run = run + 1 if c == prev else 1
        prev = c
        best = max(best, run)
    return best


def _first_stream(item) -> list[int]:
    if isinstance(item, Candidate):
        return item.generated[:, 0].tolist() if item.generated.size else []
    return list(item.codes)


@dataclass
class StabilityReport:
    cutoff_rate: float
    max_runs: list[int]
    mean_max_run: float
    worst_run: int


def stability_report(items: Sequence) -> StabilityReport:
    """Cutoff rate and longest identical-token runs over candidates or raw generations."""
    if not items:
        return StabilityReport(0.0, [], 0.0, 0)
    runs = [longest_run(_first_stream(x)) for x in items]
    return StabilityReport(
        cutoff_rate=float(np.mean([bool(x.hit_cutoff) for x in items])),
        max_runs=runs,
        mean_max_run=float(np.mean(runs)),
        worst_run=max(runs),
    )


class LoopingSource:
    """Fixed distribution every step: ``loop`` with p_loop, EOS with the rest."""

    def __init__(self, vocab: int, loop: int, eos: int, p_loop: float = 0.6, group_size: int = 1):
        p = np.zeros(vocab)
        p[loop] = p_loop
        p[eos] = 1.0 - p_loop
        self.probs = np.tile(p, (group_size, 1))

    def start(self) -> np.ndarray:
        return self.probs

    def feed(self, group) -> np.ndarray:
        return self.probs


# -- throughput ---------------------------------------------------------------


@dataclass
class ThroughputRow:
    G: int
    ar_steps: int
    codes: int
    wall_ms: float
    step_ratio: float = 1.0
    speedup: float = 1.0


def throughput_report(
    models: Mapping[int, ARModel],
    specs: Sequence[PromptSpec],
    group_sizes: Sequence[int],
    sampling: SamplingConfig,
    repeats: int = 1,
) -> list[ThroughputRow]:
    """AR-only step counts and wall time per group size, relative to the smallest G."""
    rows = []
    for G in group_sizes:
        ar = models[G]
        world = ar.world
        jobs = []
        for i, spec in enumerate(specs):
            text = list(spec.prompt_text) + list(spec.target_text)
            t, p = clip_to_groups(text, np.asarray(spec.prompt_codes)[:, 0], G, world.expansion)
            jobs.append((t, p, default_max_groups(spec, G, world), utterance_seed(sampling.seed, i)))
        ar_generate(ar, jobs[0][0], jobs[0][1], sampling, jobs[0][2])  # warm-up
        steps = codes = 0
        t0 = time.perf_counter()
        for _ in range(repeats):
            for t, p, mg, seed in jobs:
                res = ar_generate(ar, t, p, sampling, mg, RngStream(seed))
                steps += res.ar_steps
                codes += len(res.codes)
        rows.append(ThroughputRow(G, steps, codes, (time.perf_counter() - t0) * 1000))
    base = rows[0]
    for r in rows:
        r.step_ratio = r.ar_steps / base.ar_steps if base.ar_steps else float("nan")
        r.speedup = base.wall_ms / r.wall_ms if r.wall_ms else float("nan")
    return rows


def five_time_summary(groups: Sequence[Sequence[Candidate]]) -> dict:
    """Single-sample means versus sorted and metric-wise five-time selections."""
    singles = [c for g in groups for c in g]
    best = [sort_candidates(g) for g in groups]
    mwm = [metric_wise_max(g) for g in groups]
    return {
        "single_ter": float(np.mean([c.ter for c in singles])),
        "single_sim": float(np.mean([c.sim for c in singles])),
        "sorted_ter": float(np.mean([c.ter for c in best])),
        "sorted_sim": float(np.mean([c.sim for c in best])),
        "metricwise_ter": float(np.mean([m[1] for m in mwm])),
        "metricwise_sim": float(np.mean([m[0] for m in mwm])),
    }
