"""The full state-specific model: CSMC -> APL -> CTI -> shared classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import apl, csmc, cti
from .config import RunConfig
from .numerics import ParamStore, check_finite
from .objective import LossWeights, anticipation_loss, consistency_loss, detection_loss, total_loss


@dataclass
class Outputs:
    p_d: torch.Tensor
    p_a: torch.Tensor
    p_st: torch.Tensor
    states: torch.Tensor
    attention: torch.Tensor | None = None


@dataclass
class LossParts:
    total: torch.Tensor
    detection: torch.Tensor
    anticipation: torch.Tensor
    consistency: torch.Tensor


class SSM:
    """Parameters plus the forward pass over batches of memory windows.

    A window is an (L_m + 1, D) array whose last row is the current frame.
    Clustering and critical-frame selection happen in :meth:`critical_positions`
    on detached embeddings; gradients flow through projection and attention only.
    """

    def __init__(self, config: RunConfig, d_in: int, n_classes: int, params: ParamStore | None = None):
        self.config = config
        self.d_in = d_in
        self.n_classes = n_classes  # C + 1, background included
        if params is None:
            params = ParamStore(seed=config.seed)
            self._init_params(params)
        self.params = params
        self.frame_index = torch.arange(-config.memory, 1)

    def _init_params(self, ps: ParamStore) -> None:
        c = self.config
        csmc.init_projection(ps, self.d_in, c.d_model)
        csmc.init_twa(ps, c.d_model)
        apl.init_apl(ps, c.d_model, c.d_edge, c.n_layers)
        cti.init_cti(ps, c.d_model, c.clusters, positional=c.positional)
        cti.init_classifier(ps, c.d_model, self.n_classes, "cls")
        if c.classifier == "unshared":
            cti.init_classifier(ps, c.d_model, self.n_classes, "cls_ant")

    @property
    def anticipation_head(self) -> str:
        return "cls" if self.config.classifier == "shared" else "cls_ant"

    # ----------------------------------------------------------- clustering

    @torch.no_grad()
    def embed(self, windows) -> np.ndarray:
        return csmc.project(windows, self.params).numpy()

    def critical_positions(self, windows, rng: np.random.Generator) -> np.ndarray:
        """Row numbers (B, K+1) of the critical frames of full windows."""
        c = self.config
        emb = self.embed(windows)[:, : c.memory]
        fits = csmc.fit_gmm_batch(emb, c.clusters, rng, c.em_iters, c.em_tol)
        out = np.empty((len(emb), c.clusters + 1), dtype=np.int64)
        for b, fit in enumerate(fits):
            sel = csmc.select_critical_frames(emb[b], fit.params)
            out[b] = np.asarray(sel.indices) + c.memory
        return out

    # -------------------------------------------------------------- forward

    def forward(self, windows, positions, key_mask=None, return_attention: bool = False) -> Outputs:
        c, ps = self.config, self.params
        x = torch.as_tensor(windows, dtype=torch.float64)
        pos = torch.as_tensor(positions, dtype=torch.long)
        mask = None if key_mask is None else torch.as_tensor(key_mask, dtype=torch.bool)
        emb = csmc.project(x, ps)
        states, att = csmc.twa(emb, pos, self.frame_index, ps, c.delta, c.heads, mask, return_weights=True)
        graph = apl.build_st_graph(states, ps, c.heads)
        nodes, _ = apl.gated_gcn_forward(graph, ps, c.n_layers)
        future = apl.extract_future_cue(nodes, ps, c.readout)
        bundle = cti.TemporalBundle(states[..., : c.clusters, :], states[..., c.clusters, :], future)
        f_c = cti.refine_present(bundle, ps, c.heads, c.slots)
        f_a = cti.refine_future(bundle, ps, c.heads, c.slots)
        head = self.anticipation_head
        out = Outputs(
            p_d=cti.classify(f_c, ps, "cls"),
            p_a=cti.classify(f_a, ps, head),
            p_st=cti.classify(future, ps, head),
            states=states,
            attention=att if return_attention else None,
        )
        check_finite(out.p_d, "detection scores")
        check_finite(out.p_a, "anticipation scores")
        return out

    def loss(self, out: Outputs, y_d, y_a) -> LossParts:
        c = self.config
        l_d = detection_loss(out.p_d, y_d)
        l_a = anticipation_loss(out.p_a, y_a)
        l_st = consistency_loss(out.p_st, out.p_a, detach=c.kl_detach)
        w = LossWeights(c.lambda_a, c.lambda_st)
        return LossParts(total_loss(l_d, l_a, l_st, w), l_d, l_a, l_st)
