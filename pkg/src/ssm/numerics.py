"""Dense float64 tensor helpers, the attention primitive and a gradient checker.

Autodiff is torch's reverse-mode tape; everything here runs in float64.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterator

import torch

DTYPE = torch.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Row softmax over the last axis with max subtraction.

    Entries equal to -inf are masked out; every row needs at least one
    finite entry.
    """
    if m.ndim == 0 or m.shape[-1] == 0:
        raise DimensionError("softmax over an empty row")
    if bool(torch.isnan(m).any()) or bool(torch.isposinf(m).any()):
        raise NumericError("softmax input contains NaN or +inf")
    top = m.max(dim=-1, keepdim=True).values
    if not bool(torch.isfinite(top).all()):
        raise NumericError("softmax row with every entry masked")
    e = torch.exp(m - top.detach())
    return e / e.sum(dim=-1, keepdim=True)


def cross_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    logit_bias: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention of ``q`` (..., n_q, d_k) over ``k``/``v``.

    ``logit_bias`` (broadcastable to (..., n_q, n_k)) is added to the scaled
    logits before the softmax; -inf entries mask keys.
    """
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise DimensionError("attention operands must be at least 2-D")
    d_k = q.shape[-1]
    if d_k < 1 or k.shape[-1] != d_k:
        raise DimensionError(f"query width {d_k} vs key width {k.shape[-1]}")
    n_k = k.shape[-2]
    if n_k < 1 or v.shape[-2] != n_k:
        raise DimensionError(f"{n_k} keys vs {v.shape[-2]} values")
    for name, t in (("query", q), ("key", k), ("value", v)):
        check_finite(t, name)
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    if logit_bias is not None:
        if logit_bias.shape[-2:] != logits.shape[-2:]:
            raise DimensionError(
                f"bias shape {tuple(logit_bias.shape)} vs logits {tuple(logits.shape)}"
            )
        logits = logits + logit_bias
    w = softmax_rows(logits)
    out = w @ v
    return (out, w) if return_weights else out


def multihead_attention(
    params: "ParamStore",
    prefix: str,
    x_q: torch.Tensor,
    x_kv: torch.Tensor,
    heads: int,
    logit_bias: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Project with ``{prefix}.wq/wk/wv``, attend per head, concatenate heads.

    There is no output projection, so with identity projections the result
    is a convex combination of the raw key/value rows.
    """
    q = x_q @ params[f"{prefix}.wq"].T
    k = x_kv @ params[f"{prefix}.wk"].T
    v = x_kv @ params[f"{prefix}.wv"].T
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")

    def split(t):
        return t.reshape(*t.shape[:-1], heads, d // heads).transpose(-2, -3)

    bias = None if logit_bias is None else logit_bias.unsqueeze(-3)
    out, w = cross_attention(split(q), split(k), split(v), bias, return_weights=True)
    out = out.transpose(-2, -3).reshape(*x_q.shape[:-1], v.shape[-1])
    return (out, w) if return_weights else out


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


class ParamStore:
    """Named trainable tensors, iterated in registration order."""

    def __init__(self, seed: int = 0):
        self._tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._gen = torch.Generator().manual_seed(int(seed))

    def add(self, name: str, shape, init: str = "glorot", value=None) -> torch.Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if value is not None:
            t = as_tensor(value).reshape(shape).clone()
        elif init == "glorot":
            fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[-1], shape[-1])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            t = (torch.rand(shape, generator=self._gen, dtype=DTYPE) * 2 - 1) * bound
        elif init == "zeros":
            t = torch.zeros(shape, dtype=DTYPE)
        elif init == "ones":
            t = torch.ones(shape, dtype=DTYPE)
        else:
            raise ValueError(f"unknown init {init!r}")
        t.requires_grad_(True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    @torch.no_grad()
    def set(self, name: str, value) -> None:
        t = self._tensors[name]
        v = as_tensor(value)
        if v.shape != t.shape:
            raise DimensionError(f"{name}: shape {tuple(v.shape)} vs {tuple(t.shape)}")
        t.copy_(v)

    def state_dict(self) -> OrderedDict[str, torch.Tensor]:
        return OrderedDict((k, v.detach().clone()) for k, v in self._tensors.items())

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k, v in self._tensors.items():
            other.add(k, v.shape, value=v.detach())
        return other


def grad_check(
    loss_fn: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    eps: float = 1e-4,
    names: list[str] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    The error for one entry is |g_auto - g_fd| / max(1, |g_fd|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    names = params.names() if names is None else names
    params.zero_grad()
    loss = loss_fn(params)
    check_finite(loss.detach(), "loss")
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            gflat = g.reshape(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(loss_fn(params))
                flat[idx] = orig - eps
                down = float(loss_fn(params))
                flat[idx] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError("non-finite loss during finite differences")
                fd = (up - down) / (2 * eps)
                err = abs(gflat[idx].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
