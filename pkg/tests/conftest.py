import os

# single-threaded BLAS keeps every run bit-reproducible
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from psdp.model import Model, ModelConfig  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_cfg():
    return ModelConfig(embed_size=8, num_heads=2, head_size=4, hidden_size=8, ffn_size=16,
                       num_layers=2, max_seq_len=5, vocab_size=11, variant="psdp")


def randomize(model: Model, seed: int, scale: float = 0.5) -> Model:
    """Replace every parameter (biases and norms included) with N(0, scale^2) draws."""
    rng = np.random.default_rng(seed)
    for _, t in model.named_parameters():
        t.data = rng.normal(0.0, scale, size=t.shape)
    return model


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
