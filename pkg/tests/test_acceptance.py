"""Acceptance criteria A1-A7.

Each criterion records one or more checks; the terminal summary prints a
single PASS/FAIL line per criterion. The end-to-end criteria (A5, A6)
train the default-config models once and cache the checkpoints under
``$CODECLM_ACCEPT_CACHE`` (default ``.acceptance-cache/`` in the repo),
keyed by the config digest. Delete the directory to retrain from scratch.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from codeclm.ar import ar_loss, decode_groups
from codeclm.checkpoint import load_model, save_model
from codeclm.config import RunConfig
from codeclm.evaluation import (
    LoopingSource,
    build_prompts,
    five_time_summary,
    parse_grid,
    run_specs,
    sampling_for,
    sweep_top_p,
    throughput_report,
)
from codeclm.grouping import GROUP_SIZES, flatten_groups, partition_into_groups
from codeclm.nar import nar_loss
from codeclm.pipeline import PromptMode, PromptSpec, sort_candidates, synthesize
from codeclm.sampling import RngStream, SamplingConfig, nucleus_sample, nucleus_support, ras_sample, repetition_ratio
from codeclm.training import train_ar, train_nar
from codeclm.world import make_corpus, make_eval_set

from conftest import ReplaySource, make_ar, make_nar, record
from test_nn import REL_TOL, gradient_check
from test_pipeline import brute_best, cand
from test_sampling import brute_support, random_dist

REPO = Path(__file__).resolve().parents[1]
CFG = RunConfig()
EVAL_SEED = 1000

# tolerances
A1_BUDGET_S = 120.0
A2_L1 = 0.01
A4_ESCAPE_STEPS = 60
A4_ESCAPE_RATE = 0.99
A5_TER = 0.10
A5_SIM = 0.90
A5_V = 0.5
A5_FULL_PROMPT_EOS = 0.9
A6_SPEEDUP = 1.6
A6_TER_GAP = 0.05
TRAIN_BUDGET_S = 30 * 60


# -- A1 -------------------------------------------------------------------------


def test_a1_gradients():
    t0 = time.perf_counter()
    corpus = make_corpus(CFG.world, 3, (2, 4), seed=0)
    worst = {}
    for G in (1, 2):
        ar = make_ar(G, std=0.3)
        batch = [(u.text, u.codes[:, 0]) for u in corpus]
        worst[f"ar G={G}"] = max(gradient_check(ar, lambda: ar_loss(ar, batch)).values())
    nar = make_nar(std=0.3)
    nbatch = [(u.text, u.codes) for u in corpus]
    worst["nar"] = max(gradient_check(nar, lambda: nar_loss(nar, nbatch, RngStream(0, 1), (2, 8))).values())
    elapsed = time.perf_counter() - t0
    ok = record("A1", "grad", all(v <= REL_TOL for v in worst.values()),
                ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()))
    ok &= record("A1", "time", elapsed < A1_BUDGET_S, f"{elapsed:.1f}s")
    assert ok


# -- A2 -------------------------------------------------------------------------


def test_a2_sampler():
    rng = np.random.default_rng(20)
    mismatches = 0
    for _ in range(1000):
        p = random_dist(rng, int(rng.integers(1, 12)))
        v = float(rng.choice([0.0, 0.25, 0.5, 1.0, rng.random()]))
        mismatches += nucleus_support(p, v).tolist() != brute_support(p, v)
    ok = record("A2", "support oracle", mismatches == 0, f"{mismatches}/1000 mismatches")

    p = np.array([0.05, 0.35, 0.12, 0.25, 0.08, 0.15])
    l1s = {}
    for v in (0.3, 0.8, 1.0):
        keep = nucleus_support(p, v)
        law = np.zeros_like(p)
        law[keep] = p[keep] / p[keep].sum()
        r = RngStream(21, int(v * 10))
        counts = np.bincount([nucleus_sample(p, v, r) for _ in range(100_000)], minlength=p.size)
        l1s[v] = float(np.abs(counts / 1e5 - law).sum())
    ok &= record("A2", "L1", max(l1s.values()) <= A2_L1, ", ".join(f"v={v}: {d:.4f}" for v, d in l1s.items()))

    identical = 0
    for seq in range(100):
        gen = np.random.default_rng(seq)
        cfg = SamplingConfig(top_p=float(gen.choice([0.0, 0.3, 0.8, 1.0])), window=10, threshold=2.0)
        ra, rb, hist, a, b = RngStream(seq), RngStream(seq), [], [], []
        for _ in range(50):
            q = gen.dirichlet(np.full(8, 0.3))
            a.append(ras_sample(q, hist, cfg, ra))
            hist.append(a[-1])
            b.append(nucleus_sample(q, cfg.top_p, rb))
        identical += np.asarray(a, np.int64).tobytes() == np.asarray(b, np.int64).tobytes()
    ok &= record("A2", "ras t_r=2 == nucleus", identical == 100, f"{identical}/100 sequences byte-identical")
    assert ok


# -- A3 -------------------------------------------------------------------------


def test_a3_repetition_ratio():
    vals = {
        "fresh": (repetition_ratio(list(range(10)) + [99], 10), 0.1),
        "double": (repetition_ratio(list(range(10)) + [3], 10), 0.2),
        "11-run": (repetition_ratio([7] * 11, 10), 1.1),
    }
    ok = record("A3", "values", all(abs(a - b) < 1e-12 for a, b in vals.values()),
                ", ".join(f"{k} {a:.3f}" for k, (a, _) in vals.items()))
    # r = 0.1 exactly at t_r = 0.1: a one-hot distribution keeps its token and consumes a single uniform
    p = np.zeros(8)
    p[5] = 1.0
    r1, r2 = RngStream(0), RngStream(0)
    tok = ras_sample(p, [0, 1, 2, 3, 4, 6, 7, 0, 1, 2], SamplingConfig(top_p=0.0, window=10, threshold=0.1), r1)
    r2.uniform()
    no_trigger = tok == 5 and r1.uniform() == r2.uniform()
    ok &= record("A3", "strict boundary", no_trigger, "r=0.1 at t_r=0.1 keeps the nucleus draw")
    assert ok


# -- A4 -------------------------------------------------------------------------


def test_a4_loop_escape():
    eos = CFG.world.eos_code
    src = LoopingSource(eos + 1, 9, eos, p_loop=0.6)
    nucleus_only = sampling_for(0.0, ras=False)
    ras = sampling_for(0.0, ras=True)
    cut = sum(decode_groups(src, 1, eos, nucleus_only, RngStream(s), A4_ESCAPE_STEPS).hit_cutoff
              for s in range(1000))
    escaped = sum(not decode_groups(src, 1, eos, ras, RngStream(s), A4_ESCAPE_STEPS).hit_cutoff
                  for s in range(1000))
    ok = record("A4", "nucleus-only cutoff", cut == 1000, f"{cut}/1000 hit the {A4_ESCAPE_STEPS}-step cutoff")
    ok &= record("A4", "ras escape", escaped >= A4_ESCAPE_RATE * 1000,
                 f"{escaped}/1000 reached eos within {A4_ESCAPE_STEPS} steps")
    assert ok


# -- trained models -------------------------------------------------------------


def _cache_dir() -> Path:
    root = Path(os.environ.get("CODECLM_ACCEPT_CACHE", REPO / ".acceptance-cache"))
    d = root / CFG.digest()
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="module")
def trained():
    """AR models for every configured group size plus one NAR, trained or loaded from cache."""
    d = _cache_dir()
    timing_path = d / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    corpus = make_corpus(CFG.world, CFG.data.n_train, CFG.data.train_len, CFG.seed)
    per_speaker = -(-CFG.data.val_size // len(CFG.world.held_out_speakers))
    val = make_eval_set(CFG.world, per_speaker, CFG.data.eval_len, CFG.seed + 1)[: CFG.data.val_size]
    torch.set_num_threads(int(os.environ.get("CODEC_LM_THREADS", torch.get_num_threads())))

    def get(name, train):
        path = d / f"{name}.ckpt"
        if not path.exists():
            t0 = time.perf_counter()
            model, step = train()
            timing[name] = time.perf_counter() - t0
            save_model(model, path, step)
            timing_path.write_text(json.dumps(timing, indent=2, sort_keys=True))
        return load_model(path)[0]

    ars = {G: get(f"ar_g{G}", lambda G=G: train_ar(corpus, CFG, G, CFG.seed, val, d / f"ar_g{G}.csv"))
           for G in CFG.group_sizes}
    nar = get("nar", lambda: train_nar(corpus, CFG, CFG.seed, val, d / "nar.csv"))
    return ars, nar, timing


@pytest.fixture(scope="module")
def eval_set():
    return make_eval_set(CFG.world, CFG.data.eval_per_speaker, CFG.data.eval_len, EVAL_SEED)


@pytest.fixture(scope="module")
def five_time(trained, eval_set):
    """Five candidates per held-out utterance at v=0.5 with the repetition fallback on."""
    ars, nar, _ = trained
    out = {}
    for mode in PromptMode:
        specs = build_prompts(eval_set, mode, CFG.world, CFG.data.prompt_frames)
        for G, ar in ars.items():
            groups = run_specs(specs, ar, nar, sampling_for(A5_V, ras=True), [CFG.seed], n_samples=5)
            out[mode, G] = five_time_summary(groups)
    return out


# -- A5 -------------------------------------------------------------------------


def test_a5_end_to_end(trained, eval_set, five_time):
    ars, nar, timing = trained
    total = sum(timing.values())
    ok = record("A5", "train time", total <= TRAIN_BUDGET_S or not timing,
                f"{total / 60:.1f} min for {len(timing)} models" if timing else "loaded from cache")
    for mode in PromptMode:
        s = five_time[mode, 1]
        ok &= record("A5", f"{mode.value} TER", s["single_ter"] <= A5_TER,
                     f"single-sample {s['single_ter']:.4f} <= {A5_TER}")
        ok &= record("A5", f"{mode.value} SIM", s["single_sim"] >= A5_SIM,
                     f"single-sample {s['single_sim']:.4f} >= {A5_SIM}")
        ok &= record("A5", f"{mode.value} five-time", s["sorted_ter"] <= s["single_ter"],
                     f"sorted {s['sorted_ter']:.4f} vs single {s['single_ter']:.4f}")

    # a prompt that already covers the whole text should be followed by EOS
    stops = sum(
        synthesize(PromptSpec(PromptMode.CONTINUATION, u.text, u.codes, []), ars[1], nar,
                   sampling_for(A5_V, ras=True, seed=i)).generated.shape[0] == 0
        for i, u in enumerate(eval_set)
    )
    ok &= record("A5", "full-prompt eos", stops >= A5_FULL_PROMPT_EOS * len(eval_set),
                 f"{stops}/{len(eval_set)} stop immediately")

    specs = build_prompts(eval_set, PromptMode.CONTINUATION, CFG.world, CFG.data.prompt_frames)
    sweep = sweep_top_p(specs, {G: (ar, nar) for G, ar in ars.items()}, sorted(ars),
                        parse_grid("0.0:0.8:0.1"), seeds=(CFG.seed,), timing=False)
    sweep.write(_cache_dir() / "sweep.csv")
    for G in sorted(ars):
        on, off = sweep.select(G, True), sweep.select(G, False)
        worse = [f"v={a.v:.1f} {a.mean_ter:.4f}>{b.mean_ter:.4f}" for a, b in zip(on, off) if a.mean_ter > b.mean_ter]
        ok &= record("A5", f"ras<=off G={G}", not worse,
                     "holds at all 9 v" if not worse else "violated at " + ", ".join(worse))
    assert ok


# -- A6 -------------------------------------------------------------------------


def test_a6_grouping(trained, eval_set, five_time):
    ars, _, _ = trained
    # step accounting on the reference continuations, independent of model quality
    steps = {}
    for G in (1, 2, 4):
        total = 0
        for u in eval_set:
            target = u.codes[CFG.data.prompt_frames:, 0]
            total += decode_groups(ReplaySource(target, G), G, CFG.world.eos_code, SamplingConfig(),
                                   RngStream(0), 10_000).ar_steps
        steps[G] = total
    ok = record("A6", "step ratio", steps[2] * 2 == steps[1] and steps[4] * 4 == steps[1],
                f"G=2 {steps[2] / steps[1]:.4f}, G=4 {steps[4] / steps[1]:.4f}")

    specs = build_prompts(eval_set, PromptMode.CONTINUATION, CFG.world, CFG.data.prompt_frames)
    rows = throughput_report(ars, specs, sorted(ars), sampling_for(A5_V, ras=True, seed=CFG.seed), repeats=2)
    by_g = {r.G: r for r in rows}
    ok &= record("A6", "trained step ratio", True, f"G=2 {by_g[2].step_ratio:.4f} (informational)")
    ok &= record("A6", "speedup", by_g[2].speedup >= A6_SPEEDUP,
                 f"G=2 {by_g[2].speedup:.2f}x ({by_g[1].wall_ms:.0f} ms vs {by_g[2].wall_ms:.0f} ms)")
    t1 = five_time[PromptMode.CONTINUATION, 1]["single_ter"]
    t2 = five_time[PromptMode.CONTINUATION, 2]["single_ter"]
    ok &= record("A6", "TER gap", t2 - t1 <= A6_TER_GAP, f"G=1 {t1:.4f}, G=2 {t2:.4f}")
    assert ok


# -- A7 -------------------------------------------------------------------------


def test_a7_structure(trained, tmp_path):
    rng = np.random.default_rng(7)
    bad = 0
    for G in GROUP_SIZES:
        for _ in range(1000):
            n = int(rng.integers(G, 60))
            codes = rng.integers(0, 64, size=n).tolist()
            bad += flatten_groups(partition_into_groups(codes, G)) != codes[n % G:]
    ok = record("A7", "grouping", bad == 0, f"{bad} failures over 4000 sequences")

    ar = make_ar(2, std=0.2)
    a = list(range(16))
    b = a[:8] + [63 - c for c in a[8:]]
    ha = ar.forward_hidden([ar.assemble_input([1, 2], a)])[0]
    hb = ar.forward_hidden([ar.assemble_input([1, 2], b)])[0]
    ok &= record("A7", "causal", torch.equal(ha[:2 + 2 + 4], hb[:2 + 2 + 4]),
                 "prefix states unchanged by future groups")

    nar = make_nar(std=0.2)
    u = make_corpus(CFG.world, 1, (4, 4), seed=1)[0]
    same = True
    for j in range(1, 8):
        other = u.codes.copy()
        other[6:, j:] = rng.integers(0, 64, size=other[6:, j:].shape)
        same &= torch.equal(nar.assemble_input(u.text, u.codes, 6, j), nar.assemble_input(u.text, other, 6, j))
    ok &= record("A7", "nar masking", same, "streams >= j of target frames never reach pass j")

    ars, trained_nar, _ = trained
    exact = True
    for model in [*ars.values(), trained_nar]:
        save_model(model, tmp_path / "a.ckpt")
        back, _ = load_model(tmp_path / "a.ckpt")
        save_model(back, tmp_path / "b.ckpt")
        exact &= (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        exact &= all(torch.equal(x, y) for x, y in zip(model.state_dict().values(), back.state_dict().values()))
    ok &= record("A7", "checkpoint", exact, "trained models round-trip bit-exactly")

    wrong = 0
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        cands = [cand(float(s), float(t)) for s, t in
                 zip(rng.choice([0.0, 0.1, 0.3, 0.5, 1.0], n), rng.choice([0.0, 0.25, 0.5, 1.0], n))]
        wrong += sort_candidates(cands) is not brute_best(cands)
    ok &= record("A7", "selection", wrong == 0, f"{wrong}/1000 disagreements with the brute-force oracle")
    assert ok
