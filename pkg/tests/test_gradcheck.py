import pytest
import torch

from stochuda import gradcheck


class WrongSquare(torch.autograd.Function):
    """x**2 with a deliberately wrong backward (3x instead of 2x)."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return 3 * x * g


def test_correct_gradient_passes():
    w = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    res = gradcheck.check("poly", lambda: (w ** 3).sum() + w.prod(), [w])
    assert res.ok(1e-8) and res.n_params == 3


def test_wrong_backward_is_caught():
    w = torch.tensor([0.5, 1.5], dtype=torch.float64, requires_grad=True)
    res = gradcheck.check("wrong", lambda: WrongSquare.apply(w).sum(), [w])
    assert not res.ok() and res.rel_error == pytest.approx(1 / 3)


def test_check_all_shares_evaluations():
    w = torch.tensor([0.1, 0.2], dtype=torch.float64, requires_grad=True)
    calls = []

    def losses():
        calls.append(1)
        return {"a": (w * w).sum(), "b": torch.sin(w).sum()}

    res = gradcheck.check_all("pair", losses, [w])
    assert [r.name for r in res] == ["pair/a", "pair/b"] and all(r.ok(1e-8) for r in res)
    # 2 evaluations per coordinate plus one analytic pass per loss
    assert len(calls) == 2 * 2 + 2


def test_rejects_float32_and_zero_gradients():
    w32 = torch.ones(2, requires_grad=True)
    with pytest.raises(TypeError):
        gradcheck.check("f32", lambda: w32.sum(), [w32])
    w = torch.ones(2, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        gradcheck.check("flat", lambda: (w * 0).sum(), [w])
    frozen = torch.ones(2, dtype=torch.float64)
    with pytest.raises(ValueError):
        gradcheck.check("none", lambda: frozen.sum(), [frozen])
