import random

import pytest

from csdstore.config import EngineConfig
from csdstore.csd import DeviceConfig


def small_config(**kw) -> EngineConfig:
    device = kw.pop("device", None) or DeviceConfig(logical_capacity=8 << 20)
    return EngineConfig(device=device, **kw)


def text_page(seed: int, size: int = 16384) -> bytes:
    """Compressible page of repeated words, different per seed."""
    rng = random.Random(seed)
    words = [bytes(rng.choice(b"abcdefghij") for _ in range(rng.randint(3, 8))) for _ in range(40)]
    out = bytearray()
    while len(out) < size:
        out += rng.choice(words) + b" "
    return bytes(out[:size])


@pytest.fixture
def cfg():
    return small_config()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
