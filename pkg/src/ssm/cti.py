"""Cross-temporal interaction between past, present and future cues."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import DimensionError, ParamStore, multihead_attention, softmax_rows

PAST, PRESENT, FUTURE = "past", "present", "future"
ALL_SLOTS = frozenset({PAST, PRESENT, FUTURE})

# rows of the interaction ablation: which temporal slots take part
INTERACTION_CASES: dict[int, frozenset[str]] = {
    1: frozenset(),
    2: frozenset({PAST, PRESENT}),
    3: frozenset({PAST, FUTURE}),
    4: frozenset({PRESENT, FUTURE}),
    5: ALL_SLOTS,
}


class StateError(RuntimeError):
    """A refinement stage was requested out of order or on an incomplete bundle."""


@dataclass
class TemporalBundle:
    past: torch.Tensor | None  # (..., K, d)
    present: torch.Tensor | None  # (..., d)
    future: torch.Tensor | None  # (..., d)
    present_refined: torch.Tensor | None = None
    future_refined: torch.Tensor | None = None

    def require_complete(self) -> None:
        if self.past is None or self.present is None or self.future is None:
            raise StateError("bundle needs past, present and future features")
        d = self.present.shape[-1]
        if self.past.shape[-1] != d or self.future.shape[-1] != d:
            raise DimensionError("bundle widths differ")


def init_cti(params: ParamStore, d_model: int, K: int, positional: bool = True, prefix: str = "cti") -> None:
    for stage in ("present", "future"):
        for n in ("wq", "wk", "wv"):
            params.add(f"{prefix}.{stage}.{n}", (d_model, d_model))
    if positional:
        params.add(f"{prefix}.pos", (K + 2, d_model), init="zeros")


def _with_positions(bundle: TemporalBundle, params: ParamStore, prefix: str):
    past, present, future = bundle.past, bundle.present, bundle.future
    key = f"{prefix}.pos"
    if key in params:
        pos = params[key]
        K = past.shape[-2]
        past = past + pos[:K]
        present = present + pos[K]
        future = future + pos[K + 1]
    return past, present, future


def _tokens(past, present, future, slots):
    toks = []
    if PAST in slots:
        toks.append(past)
    if PRESENT in slots:
        toks.append(present.unsqueeze(-2))
    if FUTURE in slots:
        toks.append(future.unsqueeze(-2))
    return torch.cat(toks, dim=-2)


def refine_present(
    bundle: TemporalBundle,
    params: ParamStore,
    heads: int = 1,
    slots=ALL_SLOTS,
    prefix: str = "cti",
) -> torch.Tensor:
    """F_c' = CA(F_c, F_t, F_t) + F_c over the enabled slots.

    Without both past and present enabled the present cue passes through.
    """
    bundle.require_complete()
    if PAST in slots and PRESENT in slots:
        past, present, future = _with_positions(bundle, params, prefix)
        ctx = _tokens(past, present, future, slots)
        att = multihead_attention(params, f"{prefix}.present", present.unsqueeze(-2), ctx, heads)
        bundle.present_refined = att.squeeze(-2) + bundle.present
    else:
        bundle.present_refined = bundle.present
    return bundle.present_refined


def refine_future(
    bundle: TemporalBundle,
    params: ParamStore,
    heads: int = 1,
    slots=ALL_SLOTS,
    prefix: str = "cti",
) -> torch.Tensor:
    """F_a' = CA(F_a, F_t', F_t') + F_a with F_t' = [F_p, F_c', F_a]."""
    bundle.require_complete()
    if bundle.present_refined is None:
        raise StateError("refine_present must run before refine_future")
    if FUTURE in slots and len(slots) >= 2:
        refined = TemporalBundle(bundle.past, bundle.present_refined, bundle.future)
        past, present, future = _with_positions(refined, params, prefix)
        ctx = _tokens(past, present, future, slots)
        att = multihead_attention(params, f"{prefix}.future", future.unsqueeze(-2), ctx, heads)
        bundle.future_refined = att.squeeze(-2) + bundle.future
    else:
        bundle.future_refined = bundle.future
    return bundle.future_refined


def init_classifier(params: ParamStore, d_model: int, n_classes: int, name: str = "cls") -> None:
    params.add(f"{name}.weight", (n_classes, d_model))
    params.add(f"{name}.bias", (n_classes,), init="zeros")


def logits(feature: torch.Tensor, params: ParamStore, name: str = "cls") -> torch.Tensor:
    w = params[f"{name}.weight"]
    if feature.shape[-1] != w.shape[1]:
        raise DimensionError(f"feature width {feature.shape[-1]} vs classifier {w.shape[1]}")
    return feature @ w.T + params[f"{name}.bias"]


def classify(feature: torch.Tensor, params: ParamStore, name: str = "cls") -> torch.Tensor:
    """Class distribution over C+1 classes (index 0 is background)."""
    return softmax_rows(logits(feature, params, name))
