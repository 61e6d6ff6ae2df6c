import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


_MODELS: dict = {}


@pytest.fixture(scope="session")
def transfer_models():
    """Per-seed (pretrained-and-reheaded toy model, train split, val split), built lazily."""
    from tinytrain.data import transfer_pair
    from tinytrain.graph.builder import toy
    from tinytrain.model import make_pretrained, with_new_classifier

    def get(seed: int, granularity: str = "per-channel"):
        key = (seed, granularity)
        if key not in _MODELS:
            src, tgt = transfer_pair(16, 10, 40, seed)
            cfg = toy()
            cfg.weight_granularity = granularity
            base = make_pretrained(cfg, src, epochs=10, seed=seed)
            model = with_new_classifier(base, tgt.num_classes, seed)
            tr, va = tgt.split(0.25, seed)
            _MODELS[key] = (model, tr, va)
        return _MODELS[key]

    return get
