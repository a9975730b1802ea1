import numpy as np
import pytest

from promptmix.model import LanguageModel, ModelConfig


def tiny_config(**kw):
    base = dict(vocab_size=11, d_emb=16, n_layers=2, n_heads=2, d_ff=32, max_positions=24)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    """Small model with non-trivial weights (LN gains and biases perturbed)."""
    m = LanguageModel(tiny_config(), seed=3)
    rng = np.random.default_rng(7)
    for p in m.parameters():
        p.data = p.data + rng.normal(0.0, 0.2, p.shape)
    return m


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    """Remember one acceptance line; all lines are printed in the terminal summary."""
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
