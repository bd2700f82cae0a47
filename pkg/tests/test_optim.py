import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fate.optim import AdamState, OptimizerState, adamw_step, cosine_lr, sgd_step
from fate.tensor import Tensor


def test_schedule_endpoints():
    assert cosine_lr(0, 100, 0.03) == 0.03
    assert cosine_lr(100, 100, 0.03) == 0.0
    assert cosine_lr(50, 100, 0.03) == pytest.approx(0.015)
    assert cosine_lr(100, 100, 0.03, eta_min=0.001) == pytest.approx(0.001)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(1e-4, 1.0), st.floats(0.0, 1e-4))
def test_schedule_monotone(total, lr0, eta_min):
    vals = [cosine_lr(t, total, lr0, eta_min) for t in range(total + 1)]
    assert vals[0] == pytest.approx(lr0) and vals[-1] == pytest.approx(eta_min)
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_first_momentum_step_is_plain_sgd():
    p = Tensor.param([1.0, -2.0, 0.5], "p", dtype=np.float64)
    g = np.array([0.3, -0.1, 2.0])
    st_ = OptimizerState(total_steps=10, lr0=0.1)
    assert st_.lr == 0.1
    sgd_step(st_, {"p": g}, {"p": p})
    np.testing.assert_allclose(p.data, [1.0 - 0.03, -2.0 + 0.01, 0.5 - 0.2])
    assert st_.t == 1


def test_second_step_uses_momentum_recurrence():
    p = Tensor.param([0.0], "p", dtype=np.float64)
    st_ = OptimizerState(total_steps=4, lr0=1.0)
    sgd_step(st_, {"p": np.array([1.0])}, {"p": p})
    lr1 = st_.lr
    sgd_step(st_, {"p": np.array([1.0])}, {"p": p})
    # m1 = 1, m2 = 0.9 * 1 + 1
    assert p.data[0] == pytest.approx(-1.0 - lr1 * 1.9)
    assert lr1 == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))


def test_sgd_errors_and_buffers_only_for_trainable():
    p = Tensor.param([1.0], "p")
    q = Tensor.param([1.0], "q", trainable=False)
    st_ = OptimizerState(total_steps=1, lr0=0.1)
    with pytest.raises(KeyError):
        sgd_step(st_, {"nope": np.ones(1)}, {"p": p})
    with pytest.raises(ValueError):
        sgd_step(st_, {"q": np.ones(1)}, {"p": p, "q": q})
    sgd_step(st_, {"p": np.ones(1)}, {"p": p, "q": q})
    assert set(st_.buffers) == {"p"}
    with pytest.raises(RuntimeError):
        sgd_step(st_, {"p": np.ones(1)}, {"p": p})


def test_sgd_keeps_dtype():
    p = Tensor.param(np.ones(3), "p")
    sgd_step(OptimizerState(total_steps=1, lr0=0.1), {"p": np.ones(3, np.float64)}, {"p": p})
    assert p.dtype == np.float32


def test_adamw_warmup_and_first_step():
    st_ = AdamState(total_steps=10, lr0=0.01, warmup=4)
    assert st_.lr == pytest.approx(0.0025)
    p = Tensor.param([1.0, 1.0], "p", dtype=np.float64)
    adamw_step(st_, {"p": np.array([3.0, -0.5])}, {"p": p})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.0025, 1.0 + 0.0025], rtol=1e-6)
    st_.t = 4
    assert st_.lr == pytest.approx(0.01)


def test_adamw_decay_skips_vectors():
    w = Tensor.param(np.ones((2, 2)), "w", dtype=np.float64)
    b = Tensor.param(np.ones(2), "b", dtype=np.float64)
    st_ = AdamState(total_steps=2, lr0=0.1, weight_decay=0.5)
    adamw_step(st_, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, {"w": w, "b": b})
    np.testing.assert_allclose(w.data, 1.0 - 0.1 * 0.5)
    np.testing.assert_array_equal(b.data, 1.0)
