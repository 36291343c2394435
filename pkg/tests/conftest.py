import numpy as np
import pytest

from mad.slidegen import SynthConfig, synth_slide
from mad.tiler import build_manifest


def small_cfg(seed=0, **kw):
    # tile_px 8 keeps base_size at 128 (16 * tile_px) for fast tests
    return SynthConfig(base_size=128, tile_px=8, n_region_seeds=6, seed=seed, **kw)


@pytest.fixture(scope="session")
def small_slides():
    return [synth_slide(small_cfg(seed=s), f"s{s}") for s in range(3)]


@pytest.fixture(scope="session")
def small_manifest(small_slides):
    split = {"TRAIN": ["s0", "s1"], "TEST": ["s2"]}
    return build_manifest(small_slides, 8, None, split, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record one acceptance line and echo it even under output capture."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(_VERDICTS, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
