"""Detection, anticipation and consistency losses plus an Adam step."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .numerics import DimensionError, ParamStore

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    anticipation: float = 1.0
    consistency: float = 0.1

    def __post_init__(self):
        if self.anticipation < 0 or self.consistency < 0:
            raise ValueError("loss weights must be non-negative")


def _cross_entropy(p: torch.Tensor, y) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    n = p.shape[-1]
    if bool(((y < 0) | (y >= n)).any()):
        raise IndexError(f"class index outside [0, {n - 1}]")
    picked = torch.gather(p, -1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def detection_loss(p_d: torch.Tensor, y_d) -> torch.Tensor:
    """-log p_d[y_d], averaged over any leading batch axis."""
    return _cross_entropy(p_d, y_d).mean()


def anticipation_loss(p_a: torch.Tensor, y_a) -> torch.Tensor:
    return _cross_entropy(p_a, y_a).mean()


def consistency_loss(p_st: torch.Tensor, p_a: torch.Tensor, detach: str | None = None) -> torch.Tensor:
    """KL(p_st || p_a) with 1e-12 floors.

    ``detach`` may name one side ("st" or "a") to block its gradient.
    """
    if p_st.shape != p_a.shape:
        raise DimensionError(f"support mismatch {tuple(p_st.shape)} vs {tuple(p_a.shape)}")
    if detach == "st":
        p_st = p_st.detach()
    elif detach == "a":
        p_a = p_a.detach()
    ls = torch.log(p_st.clamp_min(PROB_FLOOR))
    la = torch.log(p_a.clamp_min(PROB_FLOOR))
    return (p_st * (ls - la)).sum(-1).mean()


def total_loss(l_d, l_a, l_st, w: LossWeights):
    return l_d + w.anticipation * l_a + w.consistency * l_st


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_update(params: ParamStore, grads: dict[str, torch.Tensor], state: OptimState) -> None:
    """One bias-corrected Adam step, in place. Missing grads count as zero."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        elif g.shape != p.shape:
            raise DimensionError(f"{name}: grad shape {tuple(g.shape)} vs {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
