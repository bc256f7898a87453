import warnings

import pytest
import torch

from p2mark.pipeline.config import config_from_dict
from p2mark.pipeline.data import synthetic_corpus
from p2mark.pipeline.training import mint_instance, pretrain_base, train_p2mark
from p2mark.watermark import Watermark

TINY = dict(
    mode="vocoder",
    l=4,
    r=4,
    batch_size=4,
    segment_length=2048,
    max_iterations=3,
    pretrain_iterations=3,
    layer_selector=r"^(conv_pre|resblocks\.0\.)",
    generator=dict(channels=[8, 8, 4, 4], resblock_dilations=[1]),
    discriminator=dict(periods=[2, 3], n_scales=2, mpd_channels=[4, 4], msd_channels=[4, 4]),
    decoder=dict(channels=8, n_blocks=2, n_strided=2),
)


def tiny_config(**overrides):
    return config_from_dict({**TINY, **overrides})


@pytest.fixture(scope="session")
def tiny_corpus():
    return synthetic_corpus(12, duration=0.5, seed=0)


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus):
    """(cfg, base, system, instance) from a few-iteration pretrain and fine-tune."""
    torch.set_num_threads(1)
    cfg = tiny_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = pretrain_base(cfg, tiny_corpus)
        system = train_p2mark(cfg, tiny_corpus, base)
    instance = mint_instance(system, Watermark((1, 0, 1, 1)))
    return cfg, base, system, instance


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and fail the test on FAIL."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
