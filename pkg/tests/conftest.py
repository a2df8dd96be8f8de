import numpy as np
import pytest

from pdlmil.model import MILModel
from pdlmil.numerics import Rng


def random_model(rng: Rng, in_dim=5, dims=(6, 4, 3), attn_dim=4, gated=False, bias_scale=0.1):
    """Small model with non-zero biases so no pre-activation sits exactly on a ReLU kink."""
    m = MILModel.init(in_dim, dims, attn_dim, gated, rng.fork("init"))
    for j, b in enumerate(m.projector.biases):
        b[:] = rng.fork(f"bias{j}").normal(b.size) * bias_scale
    m.aggregator.cls_b[:] = rng.fork("cls_b").normal(1) * bias_scale
    return m


def flat_loss(model, x, label, hooks=(), mode="eval"):
    """Closure over a parameter vector returning (loss, flat gradient)."""
    from pdlmil.model import backward, forward

    def f(vec):
        mm = model.copy()
        mm.set_flat(vec)
        tr = forward(x, mm, hooks, mode)
        loss, grads = backward(tr, label, mm)
        return loss, np.concatenate([g.ravel() for g in grads.values()])

    return f


@pytest.fixture
def rng():
    return Rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
