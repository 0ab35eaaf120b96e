"""Central finite-difference checks of autograd gradients.

Meant for tiny float64 models: every parameter coordinate is perturbed in
turn, so the cost is two loss evaluations per scalar parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class GradCheck:
    name: str
    n_params: int
    rel_error: float
    grad_norm: float

    def ok(self, tol=1e-4) -> bool:
        return self.rel_error < tol


def numeric_gradients(losses_fn, params, eps=1e-6):
    """Central differences of every scalar in the dict ``losses_fn()`` w.r.t. ``params``.

    Returns ``{name: [grad per param]}``; all losses share each perturbed evaluation.
    """
    grads = None
    with torch.no_grad():
        for k, p in enumerate(params):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = {n: v.item() for n, v in losses_fn().items()}
                flat[i] = orig - eps
                down = {n: v.item() for n, v in losses_fn().items()}
                flat[i] = orig
                if grads is None:
                    grads = {n: [torch.zeros_like(q) for q in params] for n in up}
                for n in up:
                    grads[n][k].view(-1)[i] = (up[n] - down[n]) / (2 * eps)
    return grads


def numeric_gradient(loss_fn, params, eps=1e-6):
    """Central differences of the scalar ``loss_fn()`` w.r.t. each tensor in ``params``."""
    return numeric_gradients(lambda: {"loss": loss_fn()}, params, eps)["loss"]


def analytic_gradient(loss_fn, params):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]


def _compare(name, analytic, numeric) -> GradCheck:
    a = torch.cat([g.flatten() for g in analytic])
    n = torch.cat([g.flatten() for g in numeric])
    scale = max(a.norm().item(), n.norm().item())
    if scale < 1e-8:
        raise ValueError(f"{name}: gradient is (numerically) zero, nothing to check")
    return GradCheck(name, int(a.numel()), (a - n).norm().item() / scale, a.norm().item())


def _trainable(name, params):
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError(f"{name}: no trainable parameters")
    if any(p.dtype != torch.float64 for p in params):
        raise TypeError(f"{name}: gradient checks need float64 parameters")
    return params


def check(name, loss_fn, params, eps=1e-6) -> GradCheck:
    """Norm-wise relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` over all ``params``."""
    params = _trainable(name, params)
    return _compare(name, analytic_gradient(loss_fn, params), numeric_gradient(loss_fn, params, eps))


def check_all(prefix, losses_fn, params, eps=1e-6) -> list[GradCheck]:
    """``check`` for every entry of the dict returned by ``losses_fn``."""
    params = _trainable(prefix, params)
    numeric = numeric_gradients(losses_fn, params, eps)
    return [_compare(f"{prefix}/{n}", analytic_gradient(lambda n=n: losses_fn()[n], params), g)
            for n, g in numeric.items()]
