"""Deterministic synthetic codec world.

Stands in for the audio codec, the ASR system and the speaker verifier.
An utterance's code matrix is a fixed affine function of its text, the
frame phase inside each text token, the quantizer index and a per-speaker
offset, all modulo the code vocabulary size::

    codes[t, j] = (7 * text[t // E] + 5 * (t % E) + 11 * j + offset(s)) % V_c
    offset(s)   = (3 * s + 1) % V_c

Because the multipliers are units mod V_c the rule is exactly invertible,
which gives a surrogate ASR (``decode_text``) and a surrogate speaker
similarity (``surrogate_sim``).
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

TEXT_MUL = 7
PHASE_MUL = 5
QUANT_MUL = 11
SPEAKER_MUL = 3
N_HELD_OUT_SPEAKERS = 4


@dataclass(frozen=True)
class WorldConfig:
    text_vocab: int = 32
    code_vocab: int = 64
    quantizers: int = 8
    expansion: int = 4
    speakers: int = 16

    def __post_init__(self):
        if self.code_vocab <= self.text_vocab:
            raise ValueError("code_vocab must exceed text_vocab")
        if math.gcd(TEXT_MUL, self.code_vocab) != 1:
            raise ValueError(f"gcd({TEXT_MUL}, code_vocab) must be 1")
        if self.quantizers != 8:
            raise ValueError("quantizers is fixed at 8")
        if self.expansion < 1 or self.speakers <= N_HELD_OUT_SPEAKERS:
            raise ValueError("need expansion >= 1 and more than 4 speakers")

    @property
    def eos_code(self) -> int:
        return self.code_vocab

    @property
    def garbage(self) -> int:
        return self.text_vocab

    @property
    def train_speakers(self) -> range:
        return range(self.speakers - N_HELD_OUT_SPEAKERS)

    @property
    def held_out_speakers(self) -> range:
        return range(self.speakers - N_HELD_OUT_SPEAKERS, self.speakers)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Utterance:
    text: list[int]
    speaker: int
    codes: np.ndarray  # [T, J]

    def to_json(self) -> str:
        return json.dumps(
            {"text": list(map(int, self.text)), "speaker": int(self.speaker),
             "codes": self.codes.astype(int).tolist()},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str, cfg: WorldConfig) -> "Utterance":
        obj = json.loads(line)
        codes = np.asarray(obj["codes"], dtype=np.int64).reshape(-1, cfg.quantizers)
        return cls(list(obj["text"]), int(obj["speaker"]), codes)


def speaker_offset(speaker: int, cfg: WorldConfig) -> int:
    return (SPEAKER_MUL * speaker + 1) % cfg.code_vocab


def synth_utterance(text: Sequence[int], speaker: int, cfg: WorldConfig) -> np.ndarray:
    """Code matrix [E * len(text), J] for ``text`` spoken by ``speaker``."""
    text = np.asarray(text, dtype=np.int64)
    if text.size and (text.min() < 0 or text.max() >= cfg.text_vocab):
        raise ValueError(f"text token outside [0, {cfg.text_vocab})")
    if not 0 <= speaker < cfg.speakers:
        raise ValueError(f"speaker {speaker} outside [0, {cfg.speakers})")
    T = cfg.expansion * text.size
    t = np.arange(T)
    base = TEXT_MUL * text[t // cfg.expansion] + PHASE_MUL * (t % cfg.expansion)
    j = np.arange(cfg.quantizers)
    codes = base[:, None] + QUANT_MUL * j[None, :] + speaker_offset(speaker, cfg)
    return (codes % cfg.code_vocab).reshape(T, cfg.quantizers)


def _residual(codes: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    """codes minus phase and quantizer terms, mod V_c."""
    T, J = codes.shape
    phase = np.arange(T) % cfg.expansion
    return (codes - PHASE_MUL * phase[:, None] - QUANT_MUL * np.arange(J)[None, :]) % cfg.code_vocab


def infer_speaker_offset(codes: np.ndarray, text: Sequence[int], cfg: WorldConfig) -> int:
    """Majority-vote speaker offset of a prompt whose transcript is known."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[0] == 0:
        raise ValueError("empty prompt")
    need = -(-codes.shape[0] // cfg.expansion)
    if len(text) < need:
        raise ValueError(f"prompt has {codes.shape[0]} frames but only {len(text)} text tokens")
    tokens = np.asarray(text, dtype=np.int64)[np.arange(codes.shape[0]) // cfg.expansion]
    valid = codes < cfg.code_vocab
    implied = (_residual(codes, cfg) - TEXT_MUL * tokens[:, None]) % cfg.code_vocab
    counts = np.bincount(implied[valid], minlength=cfg.code_vocab)
    return int(np.argmax(counts))


def decode_text(codes: np.ndarray, offset: int, cfg: WorldConfig) -> list[int]:
    """Surrogate ASR: per text position, plurality vote over its E x J cell.

    Votes that land outside the text vocabulary are discarded; a cell with
    no valid votes decodes to the GARBAGE token. Ties go to the lowest token.
    EOS entries are ignored and trailing all-EOS frames do not open a cell.
    """
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise ValueError("codes must be a [T, J] matrix")
    live = (codes < cfg.code_vocab).any(axis=1)
    T = int(np.nonzero(live)[0][-1]) + 1 if live.any() else 0
    codes = codes[:T]
    inv = pow(TEXT_MUL, -1, cfg.code_vocab)
    votes = (inv * (_residual(codes, cfg) - offset)) % cfg.code_vocab
    ok = (codes < cfg.code_vocab) & (votes < cfg.text_vocab)
    out = []
    for start in range(0, T, cfg.expansion):
        cell = votes[start:start + cfg.expansion][ok[start:start + cfg.expansion]]
        if cell.size == 0:
            out.append(cfg.garbage)
        else:
            out.append(int(np.argmax(np.bincount(cell, minlength=cfg.text_vocab))))
    return out


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    if len(ref) == 0:
        return float(len(hyp))
    return edit_distance(list(ref), list(hyp)) / len(ref)


def surrogate_sim(
    gen: np.ndarray, decoded_text: Sequence[int], prompt_offset: int, cfg: WorldConfig
) -> float:
    """Fraction of non-EOS entries whose implied speaker offset matches the prompt's."""
    gen = np.asarray(gen, dtype=np.int64)
    if gen.size == 0:
        return 0.0
    valid = gen < cfg.code_vocab
    n = int(valid.sum())
    if n == 0:
        return 0.0
    T = gen.shape[0]
    pos = np.arange(T) // cfg.expansion
    text = np.full(pos.max() + 1, -1, dtype=np.int64)
    dec = np.asarray(decoded_text[: text.size], dtype=np.int64)
    text[: dec.size] = dec
    tokens = text[pos]
    known = (tokens >= 0) & (tokens < cfg.text_vocab)
    implied = (_residual(gen, cfg) - TEXT_MUL * tokens[:, None]) % cfg.code_vocab
    match = valid & known[:, None] & (implied == prompt_offset)
    return float(match.sum()) / n


# -- corpora ------------------------------------------------------------------


def is_held_out_text(text: Sequence[int]) -> bool:
    """Roughly 10% of text sequences are reserved for evaluation."""
    return zlib.crc32(np.asarray(text, dtype=np.uint8).tobytes()) % 10 == 0


def _draw_text(rng: np.random.Generator, cfg: WorldConfig, len_range, held_out: bool) -> list[int]:
    lo, hi = len_range
    while True:
        n = int(rng.integers(lo, hi + 1))
        text = rng.integers(0, cfg.text_vocab, size=n).tolist()
        if is_held_out_text(text) == held_out:
            return text


def make_corpus(
    cfg: WorldConfig,
    n_utts: int,
    len_range: tuple[int, int],
    seed: int,
    speakers: Optional[Iterable[int]] = None,
    held_out_text: bool = False,
) -> list[Utterance]:
    """Random utterances; utterance ``i`` depends only on ``(seed, i)``.

    ``speakers`` defaults to the training speakers (all but the last four).
    """
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    if len_range[0] < 0 or len_range[0] > len_range[1]:
        raise ValueError(f"bad len_range {len_range}")
    pool = list(cfg.train_speakers if speakers is None else speakers)
    out = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, i])
        speaker = pool[int(rng.integers(len(pool)))]
        text = _draw_text(rng, cfg, len_range, held_out_text)
        out.append(Utterance(text, speaker, synth_utterance(text, speaker, cfg)))
    return out


def make_eval_set(cfg: WorldConfig, per_speaker: int, len_range, seed: int) -> list[Utterance]:
    """Held-out speakers x held-out texts, grouped by speaker in a fixed order."""
    out = []
    for s in cfg.held_out_speakers:
        for i in range(per_speaker):
            rng = np.random.default_rng([seed, s, i])
            text = _draw_text(rng, cfg, len_range, held_out=True)
            out.append(Utterance(text, s, synth_utterance(text, s, cfg)))
    return out


def write_corpus(utts: Sequence[Utterance], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u in utts:
            f.write(u.to_json() + "\n")


def read_corpus(path, cfg: WorldConfig) -> list[Utterance]:
    with open(path, encoding="utf-8") as f:
        return [Utterance.from_json(line, cfg) for line in f if line.strip()]

