import numpy as np
import pytest

from avdetect.data import CorpusSpec
from avdetect.model import ModelConfig, init_params


def tiny_config(seed=0, **kw):
    base = dict(d_model=8, n_heads=2, n_enc_layers_audio=1, n_enc_layers_vision=1, n_dec_layers=1,
                d_audio_in=3, d_vision_in=6, seq_len=3, d_ff=8, seed=seed)
    return ModelConfig(**(base | kw))


def tiny_corpus(seed=0, n=40, **kw):
    counts = {"train": n, "in_domain": n, "open_set_generator": n, "open_set_style": n,
              "open_set_full": n}
    return CorpusSpec(counts=counts, seq_len=3, d_audio=3, d_vision=6, d_latent=2, seed=seed, **kw)


@pytest.fixture
def tiny_params():
    return init_params(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Lines recorded by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0].strip("["))):
            terminalreporter.write_line(line)
