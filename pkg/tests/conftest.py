import contextlib
import time

import numpy as np
import pytest

from septda.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough for finite differences over the whole network."""
    return ModelConfig(kernel=4, enc_dim=8, dim=8, chunk_size=4, tda_layers=2, triple_blocks=2,
                       lstm_hidden=4, heads=2, ffn_expansion=2, max_speakers=4,
                       t5_buckets=8, t5_max_distance=16)


@pytest.fixture
def toy_config():
    return ModelConfig(enc_dim=64, dim=32, lstm_hidden=32, chunk_size=16, triple_blocks=2,
                       tda_layers=1, heads=2, max_speakers=2)


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Times a criterion body and prints one PASS/FAIL line for it."""
    lines = request.config.stash[_ACCEPTANCE]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def run(number: int, title: str, bound_s: float | None = None):
        start = time.perf_counter()
        ok = False
        try:
            yield
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            within = bound_s is None or elapsed <= bound_s
            verdict = "PASS" if ok and within else "FAIL"
            bound = f" (bound {bound_s:g} s)" if bound_s is not None else ""
            line = f"{verdict} criterion {number:2d}: {title} [{elapsed:.1f} s{bound}]"
            lines.append(line)
            with capman.global_and_fixture_disabled():
                print("\n" + line, flush=True)
        assert within, f"criterion {number} exceeded its {bound_s} s runtime bound"

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
