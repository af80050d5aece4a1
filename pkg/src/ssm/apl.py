"""Action pattern learning over critical states.

Critical states become the nodes of a complete directed state-transition
graph whose edges are vectors produced by pairwise cross-attention. A
residual edge-gated graph convolution propagates over the graph and a mean
readout yields the potential future cue.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import DimensionError, ParamStore, check_finite, layer_norm, multihead_attention

GATE_EPS = 1e-6


@dataclass
class StGraph:
    nodes: torch.Tensor  # (..., N, d_model)
    edges: torch.Tensor  # (..., N, N, d_edge); diagonal is unused and kept at zero

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[-2]

    def offdiag(self) -> torch.Tensor:
        n = self.n_nodes
        return ~torch.eye(n, dtype=torch.bool)

    def edge_list(self) -> list[tuple[int, int, torch.Tensor]]:
        """(i, j, E_ij) for every ordered pair i != j of an unbatched graph."""
        n = self.n_nodes
        return [(i, j, self.edges[..., i, j, :]) for i in range(n) for j in range(n) if i != j]


def init_apl(params: ParamStore, d_model: int, d_edge: int, n_layers: int, prefix: str = "apl") -> None:
    for n in ("wq", "wk", "wv"):
        params.add(f"{prefix}.edge_attn.{n}", (d_model, d_model))
    params.add(f"{prefix}.edge_proj.weight", (d_edge, d_model))
    params.add(f"{prefix}.edge_proj.bias", (d_edge,), init="zeros")
    for l in range(n_layers):
        p = f"{prefix}.gcn{l}"
        params.add(f"{p}.U", (d_model, d_model))
        params.add(f"{p}.U_bias", (d_model,), init="zeros")
        params.add(f"{p}.V", (d_model, d_model))
        params.add(f"{p}.A", (d_model, d_model))
        params.add(f"{p}.B", (d_model, d_model))
        params.add(f"{p}.C", (d_model, d_edge))
        params.add(f"{p}.gate_bias", (d_model,), init="zeros")
        params.add(f"{p}.P", (d_edge, d_model))
        params.add(f"{p}.Q", (d_edge, d_model))
        params.add(f"{p}.R", (d_edge, d_edge))
        params.add(f"{p}.edge_bias", (d_edge,), init="zeros")
        params.add(f"{p}.node_norm.gain", (d_model,), init="ones")
        params.add(f"{p}.node_norm.bias", (d_model,), init="zeros")
        params.add(f"{p}.edge_norm.gain", (d_edge,), init="ones")
        params.add(f"{p}.edge_norm.bias", (d_edge,), init="zeros")
    params.add(f"{prefix}.readout.weight", (d_model, d_model))
    params.add(f"{prefix}.readout.bias", (d_model,), init="zeros")


def build_st_graph(states: torch.Tensor, params: ParamStore, heads: int = 1, prefix: str = "apl") -> StGraph:
    """Vector edges from pairwise cross-attention between critical states.

    For the ordered pair (i, j) the query S_i attends over the pair
    context (S_i, S_j); swapping roles gives E_ji with the same weights.
    """
    n, d = states.shape[-2], states.shape[-1]
    if n < 2:
        raise DimensionError("state-transition graph needs at least 2 nodes")
    lead = states.shape[:-2]
    q = states.unsqueeze(-2).expand(*lead, n, n, d)  # [i, j] -> S_i
    other = states.unsqueeze(-3).expand(*lead, n, n, d)  # [i, j] -> S_j
    ctx = torch.stack([q, other], dim=-2)  # (..., n, n, 2, d)
    att = multihead_attention(params, f"{prefix}.edge_attn", q.unsqueeze(-2), ctx, heads)
    att = att.squeeze(-2)
    edges = att @ params[f"{prefix}.edge_proj.weight"].T + params[f"{prefix}.edge_proj.bias"]
    edges = edges * (~torch.eye(n, dtype=torch.bool)).unsqueeze(-1)
    return StGraph(states, check_finite(edges, "edges"))


def gate_values(h: torch.Tensor, e: torch.Tensor, params: ParamStore, layer: int, prefix: str = "apl"):
    """eta_ij = sigmoid(A h_i + B h_j + C E_ij + b), shape (..., N, N, d_model)."""
    p = f"{prefix}.gcn{layer}"
    pre = (
        (h @ params[f"{p}.A"].T).unsqueeze(-2)
        + (h @ params[f"{p}.B"].T).unsqueeze(-3)
        + e @ params[f"{p}.C"].T
        + params[f"{p}.gate_bias"]
    )
    return torch.sigmoid(pre)


def gcn_layer(h, e, params: ParamStore, layer: int, prefix: str = "apl", gates=None):
    p = f"{prefix}.gcn{layer}"
    n = h.shape[-2]
    off = (~torch.eye(n, dtype=torch.bool)).unsqueeze(-1).to(h.dtype)
    eta = gate_values(h, e, params, layer, prefix) if gates is None else gates
    eta = eta * off
    vh = (h @ params[f"{p}.V"].T).unsqueeze(-3)  # [i, j] -> V h_j
    agg = (eta * vh).sum(-2) / (eta.sum(-2) + GATE_EPS)
    node_in = h @ params[f"{p}.U"].T + params[f"{p}.U_bias"] + agg
    h_new = h + F.silu(layer_norm(node_in, params[f"{p}.node_norm.gain"], params[f"{p}.node_norm.bias"]))
    edge_in = (
        (h @ params[f"{p}.P"].T).unsqueeze(-2)
        + (h @ params[f"{p}.Q"].T).unsqueeze(-3)
        + e @ params[f"{p}.R"].T
        + params[f"{p}.edge_bias"]
    )
    e_new = e + F.silu(layer_norm(edge_in, params[f"{p}.edge_norm.gain"], params[f"{p}.edge_norm.bias"])) * off
    return h_new, e_new


def gated_gcn_forward(graph: StGraph, params: ParamStore, n_layers: int, prefix: str = "apl"):
    """Run ``n_layers`` residual gated graph convolutions; returns (nodes, edges)."""
    h, e = graph.nodes, graph.edges
    for l in range(n_layers):
        h, e = gcn_layer(h, e, params, l, prefix)
    check_finite(h, "graph nodes")
    check_finite(e, "graph edges")
    return h, e


def extract_future_cue(
    nodes: torch.Tensor, params: ParamStore, mode: str = "mean", prefix: str = "apl"
) -> torch.Tensor:
    """Readout projection of the node mean (or of the current-state node, the last one)."""
    pooled = nodes.mean(-2) if mode == "mean" else nodes[..., -1, :]
    return pooled @ params[f"{prefix}.readout.weight"].T + params[f"{prefix}.readout.bias"]
