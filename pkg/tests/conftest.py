import numpy as np
import pytest
import torch

from codeclm.ar import ARModel
from codeclm.config import ModelConfig
from codeclm.nar import NARModel
from codeclm.world import WorldConfig, make_corpus

TINY = ModelConfig(d_model=16, n_heads=2, n_blocks=2, max_text_len=32, max_code_len=64)


@pytest.fixture
def world():
    return WorldConfig()


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def corpus(world):
    return make_corpus(world, 8, (3, 6), seed=5)


def make_ar(G=1, seed=0, cfg=TINY, world=None, std=None):
    torch.manual_seed(seed)
    m = ARModel(world or WorldConfig(), cfg, G)
    if std is not None:
        with torch.no_grad():
            for p in m.parameters():
                p.normal_(0.0, std)
    return m.eval()


def make_nar(seed=0, cfg=TINY, world=None, std=None):
    torch.manual_seed(seed)
    m = NARModel(world or WorldConfig(), cfg)
    if std is not None:
        with torch.no_grad():
            for p in m.parameters():
                p.normal_(0.0, std)
    return m.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ReplaySource:
    """Puts all mass on a fixed code sequence, then on EOS."""

    def __init__(self, codes, G, vocab=65):
        self.codes, self.G, self.V = list(codes), G, vocab
        self.pos = 0
        self.feeds = 0

    def _probs(self):
        p = np.zeros((self.G, self.V))
        for g in range(self.G):
            i = self.pos + g
            p[g, self.codes[i] if i < len(self.codes) else self.V - 1] = 1.0
        return p

    def start(self):
        return self._probs()

    def feed(self, group):
        self.feeds += 1
        self.pos += len(group)
        return self._probs()


# criterion -> [(check, passed, detail)]; filled by test_acceptance.py, printed after the run
ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


def record(criterion: str, check: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((check, bool(passed), detail))
    print(f"{criterion} {check}: {'pass' if passed else 'FAIL'} ({detail})")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[key]
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name}{'' if passed else ' FAILED'}: {d}" for name, passed, d in checks)
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'} | {detail}")
