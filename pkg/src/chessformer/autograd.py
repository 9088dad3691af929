"""Differentiable tensor ops used by the model, plus a finite-difference gradient checker.

Tensors and the reverse-mode tape come from torch. The wrappers here fix the
few conventions the model relies on (tanh GELU, last-axis softmax/layer norm,
class-or-distribution cross entropy) and raise ``ShapeError`` naming both
operand shapes on mismatch.
"""
from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


def tensor(data, requires_grad: bool = False, dtype=torch.float32) -> Tensor:
    return torch.tensor(np.asarray(data), dtype=dtype, requires_grad=requires_grad)


def _shape(t: Tensor) -> tuple:
    return tuple(t.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched_matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: shapes {_shape(a)} and {_shape(b)} do not broadcast") from None
    return a + b


def scale(a: Tensor, s: float) -> Tensor:
    return a * s


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = tensors[0]
    ax = axis % ref.dim()
    for t in tensors[1:]:
        if t.dim() != ref.dim() or any(t.shape[i] != ref.shape[i] for i in range(ref.dim()) if i != ax):
            raise ShapeError(f"concat: {_shape(ref)} and {_shape(t)} differ off axis {axis}")
    return torch.cat(list(tensors), dim=axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return a.reshape(*shape)
    except RuntimeError:
        raise ShapeError(f"reshape: cannot view {_shape(a)} as {tuple(shape)}") from None


def transpose(a: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return a.transpose(dim0, dim1)


def gather(a: Tensor, index: Tensor, axis: int = -1) -> Tensor:
    return torch.index_select(a, axis, index)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return a.mean() if axis is None else a.mean(dim=axis)


def softmax(a: Tensor) -> Tensor:
    return torch.softmax(a, dim=-1)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if gain is not None and gain.shape != a.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {_shape(gain)} does not match input {_shape(a)}")
    return F.layer_norm(a, a.shape[-1:], gain, bias, eps)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    return F.gelu(a, approximate="tanh")


def relu(a: Tensor) -> Tensor:
    return torch.relu(a)


def tanh(a: Tensor) -> Tensor:
    return torch.tanh(a)


def cross_entropy(logits: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Cross entropy over the last axis.

    ``target`` holds class indices (shape ``logits.shape[:-1]``) or a
    distribution (same shape as ``logits``). Entries of ``logits`` at -inf are
    excluded; a distribution must put zero mass on them.
    """
    logp = torch.log_softmax(logits, dim=-1)
    if target.shape == logits.shape:
        # 0 * -inf would be nan; masked entries carry no target mass
        per = -(target * torch.where(torch.isfinite(logp), logp, torch.zeros_like(logp))).sum(-1)
    elif target.shape == logits.shape[:-1]:
        per = -logp.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)
    else:
        raise ShapeError(f"cross_entropy: logits {_shape(logits)} vs target {_shape(target)}")
    if reduction == "none":
        return per
    return per.mean() if reduction == "mean" else per.sum()


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: {_shape(a)} vs {_shape(b)}")
    return ((a - b) ** 2).mean()


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Backpropagate a scalar loss; ``params`` that did not take part get zero gradients."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    samples: int = 200,
    eps: float = 1e-3,
    seed: int = 0,
    skip: Callable[[int, int], bool] | None = None,
    stencil: int = 4,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` re-evaluates the scalar objective from the current values of
    ``params``. Coordinates are sampled uniformly per tensor (at least one per
    tensor). ``skip(tensor_index, flat_index)`` excludes coordinates, e.g.
    those next to a ReLU kink. ``stencil`` is 2 (f(x+h)-f(x-h))/2h or 4
    (fourth-order, four evaluations).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=float)
    per_tensor = np.maximum(1, np.round(samples * sizes / sizes.sum())).astype(int)
    worst = 0.0
    with torch.no_grad():
        for ti, (p, g, count) in enumerate(zip(params, grads, per_tensor)):
            flat = p.view(-1)
            picks = rng.choice(p.numel(), size=min(count, p.numel()), replace=False)
            for idx in picks:
                if skip is not None and skip(ti, int(idx)):
                    continue
                orig = flat[idx].item()

                def at(delta):
                    flat[idx] = orig + delta
                    return f().item()

                if stencil == 2:
                    numeric = (at(eps) - at(-eps)) / (2 * eps)
                else:
                    numeric = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                flat[idx] = orig
                analytic = g.reshape(-1)[idx].item()
                err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
                worst = max(worst, err)
    return worst
