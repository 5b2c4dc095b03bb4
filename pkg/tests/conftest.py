import numpy as np
import pytest
import torch

from slotvae.model import SlotVAE, SlotVAEConfig


def tiny_config(**kw) -> SlotVAEConfig:
    base = dict(
        image_size=16,
        num_slots=3,
        slot_dim=8,
        global_dim=8,
        feature_dim=8,
        global_hidden=32,
        head_hidden=16,
        decoder_channels=8,
    )
    base.update(kw)
    return SlotVAEConfig(**base)


def tiny_model(seed=0, dtype=torch.float32, **kw) -> SlotVAE:
    torch.manual_seed(seed)
    return SlotVAE(tiny_config(**kw)).to(dtype)


def central_difference(fn, tensor: torch.Tensor, index, step=1e-5) -> float:
    """d fn() / d tensor[index] by central differences; ``tensor`` is perturbed in place."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + step
        plus = fn().item()
        tensor[index] = orig - step
        minus = fn().item()
        tensor[index] = orig
    return (plus - minus) / (2 * step)


def relative_error(a, b, floor=1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def model64():
    return tiny_model(dtype=torch.float64)


# -- acceptance summary -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record (and print) the one-line verdict of an acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'} | {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
