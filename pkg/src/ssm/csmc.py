"""Critical state memory compression.

Frames are embedded by a learnable linear map, the memory window is
clustered with a diagonal-covariance GMM fitted by EM, the frame nearest
each component mean becomes a critical frame, and temporal weighted
attention compresses the whole window into K+1 critical states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import DimensionError, ParamStore, check_finite, multihead_attention

VAR_FLOOR = 1e-6
WEIGHT_FLOOR = 1e-8
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class FeatureFrame:
    index: int
    feature: np.ndarray


@dataclass
class MemoryWindow:
    memory: list[FeatureFrame]
    current: FeatureFrame

    def __post_init__(self):
        if self.current.index != 0:
            raise ValueError("current frame must have index 0")
        idx = [f.index for f in self.memory] + [0]
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise ValueError("window indices must be contiguous and end at 0")
        dims = {np.shape(f.feature) for f in self.memory + [self.current]}
        if len(dims) != 1:
            raise DimensionError(f"mixed feature dimensions {dims}")

    @property
    def indices(self) -> np.ndarray:
        return np.array([f.index for f in self.memory] + [0])

    def features(self) -> np.ndarray:
        return np.stack([f.feature for f in self.memory] + [self.current.feature]).astype(np.float64)

    @classmethod
    def from_array(cls, feats: np.ndarray) -> "MemoryWindow":
        """The last row of ``feats`` is the current frame."""
        n = len(feats)
        frames = [FeatureFrame(i - n + 1, np.asarray(f, dtype=np.float64)) for i, f in enumerate(feats)]
        return cls(frames[:-1], frames[-1])


@dataclass
class GmmParams:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)

    @property
    def K(self) -> int:
        return len(self.weights)

    def copy(self) -> "GmmParams":
        return GmmParams(self.weights.copy(), self.means.copy(), self.variances.copy())


@dataclass
class GmmFit:
    params: GmmParams
    responsibilities: np.ndarray
    log_likelihood: float
    history: list[float] = field(default_factory=list)
    reseeds: list[int] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class CriticalFrameSet:
    indices: tuple[int, ...]
    clusters: tuple[int, ...]  # -1 marks the current frame


def init_projection(params: ParamStore, d_in: int, d_model: int, prefix: str = "proj") -> None:
    params.add(f"{prefix}.weight", (d_model, d_in))
    params.add(f"{prefix}.bias", (d_model,), init="zeros")


def project(features, params: ParamStore, prefix: str = "proj") -> torch.Tensor:
    """weight @ feature + bias over the last axis."""
    x = torch.as_tensor(features, dtype=torch.float64)
    w = params[f"{prefix}.weight"]
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"feature width {x.shape[-1]} vs projection input {w.shape[1]}")
    return x @ w.T + params[f"{prefix}.bias"]


# --------------------------------------------------------------------- EM


def _log_gauss(x: np.ndarray, means: np.ndarray, var: np.ndarray) -> np.ndarray:
    """log N(x | mean, diag var) for x (..., L, d), means/var (..., K, d) -> (..., L, K)."""
    diff = x[..., :, None, :] - means[..., None, :, :]  # (..., L, K, d)
    quad = np.einsum("...lkd,...kd->...lk", diff**2, 1.0 / var)
    logdet = np.sum(np.log(var), axis=-1)
    return -0.5 * (quad + logdet[..., None, :] + x.shape[-1] * _LOG_2PI)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.sum(np.exp(a - top), axis=axis))


def e_step(x: np.ndarray, gmm: GmmParams) -> tuple[np.ndarray, np.ndarray]:
    """Posterior p(k | x_i) and per-point log density log p(x_i)."""
    joint = _log_gauss(x, gmm.means, gmm.variances) + np.log(gmm.weights)
    dens = _logsumexp(joint, axis=-1)
    return np.exp(joint - dens[..., None]), dens


def kmeanspp_init(x: np.ndarray, K: int, rng: np.random.Generator) -> GmmParams:
    return kmeanspp_init_batch(x[None], K, rng)[0]


def kmeanspp_init_batch(x: np.ndarray, K: int, rng: np.random.Generator) -> list[GmmParams]:
    """k-means++ seeding per instance of a (B, L, d) batch; variances start global."""
    B, n, d = x.shape
    rows = np.arange(B)
    pick = rng.integers(n, size=B)
    centers = [x[rows, pick]]
    dist = np.sum((x - centers[0][:, None]) ** 2, axis=-1)  # (B, L)
    for _ in range(1, K):
        total = dist.sum(axis=1, keepdims=True)
        cdf = np.cumsum(dist, axis=1) / np.where(total > 0, total, 1.0)
        u = rng.random(B)
        pick = np.minimum((cdf < u[:, None]).sum(axis=1), n - 1)
        flat = total[:, 0] <= 0
        if flat.any():
            pick[flat] = rng.integers(n, size=int(flat.sum()))
        c = x[rows, pick]
        centers.append(c)
        dist = np.minimum(dist, np.sum((x - c[:, None]) ** 2, axis=-1))
    means = np.stack(centers, axis=1)
    var = np.maximum(x.var(axis=1), VAR_FLOOR)
    return [GmmParams(np.full(K, 1.0 / K), means[b], np.tile(var[b], (K, 1))) for b in range(B)]


def _m_step(x, resp):
    nk = resp.sum(axis=-2)  # (..., K)
    safe = np.maximum(nk, 1e-300)[..., None]
    means = np.swapaxes(resp, -1, -2) @ x / safe
    diff2 = (x[..., :, None, :] - means[..., None, :, :]) ** 2  # (..., L, K, d)
    var = np.maximum(np.einsum("...lk,...lkd->...kd", resp, diff2) / safe, VAR_FLOOR)
    weights = nk / x.shape[-2]
    return nk, weights, means, var


def _normalize_weights(w: np.ndarray) -> np.ndarray:
    w = np.maximum(w, WEIGHT_FLOOR)
    return w / w.sum(axis=-1, keepdims=True)


def fit_gmm_batch(
    x: np.ndarray,
    K: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
    init: list[GmmParams] | None = None,
) -> list[GmmFit]:
    """EM for a batch of windows ``x`` (B, L, d) sharing K.

    Each instance stops independently once its mean log-likelihood gain per
    point falls below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    B, L, d = x.shape
    if not 1 <= K <= L:
        raise ValueError(f"need 1 <= K <= L, got K={K}, L={L}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    inits = init if init is not None else kmeanspp_init_batch(x, K, rng)
    w = np.stack([g.weights for g in inits]).astype(np.float64)
    mu = np.stack([g.means for g in inits]).astype(np.float64)
    var = np.stack([g.variances for g in inits]).astype(np.float64)
    active = np.ones(B, dtype=bool)
    history = np.full((B, max_iters + 1), np.nan)
    reseeds: list[list[int]] = [[] for _ in range(B)]
    n_iter = np.zeros(B, dtype=int)
    resp = np.empty((B, L, K))
    prev = np.full(B, -np.inf)

    for it in range(max_iters + 1):
        ids = np.flatnonzero(active)
        if ids.size == 0:
            break
        joint = _log_gauss(x[ids], mu[ids], var[ids]) + np.log(w[ids])[:, None, :]
        dens = _logsumexp(joint, axis=-1)
        resp[ids] = np.exp(joint - dens[..., None])
        ll = dens.mean(axis=-1)
        history[ids, it] = ll * L
        done = (ll - prev[ids] < tol) | (it == max_iters)
        prev[ids] = ll
        active[ids[done]] = False
        ids = ids[~done]
        if ids.size == 0:
            break
        nk, w_new, mu_new, var_new = _m_step(x[ids], resp[ids])
        w[ids] = _normalize_weights(w_new)
        mu[ids] = mu_new
        var[ids] = var_new
        n_iter[ids] += 1
        for j in np.flatnonzero((nk < WEIGHT_FLOOR).any(axis=1)):
            b = ids[j]
            for k in np.flatnonzero(nk[j] < WEIGHT_FLOOR):
                # move a collapsed component onto the worst-explained point
                worst = int(np.argmin(_point_density(x[b], w[b], mu[b], var[b])))
                mu[b, k] = x[b, worst]
                var[b, k] = np.maximum(x[b].var(axis=0), VAR_FLOOR)
                w[b, k] = 1.0 / L
                w[b] = _normalize_weights(w[b])
                reseeds[b].append(it + 1)
                prev[b] = -np.inf

    fits = []
    for b in range(B):
        resp_b, dens_b = e_step(x[b], GmmParams(w[b], mu[b], var[b]))
        fits.append(
            GmmFit(
                GmmParams(w[b].copy(), mu[b].copy(), var[b].copy()),
                resp_b,
                float(dens_b.sum()),
                [float(v) for v in history[b] if np.isfinite(v)],
                reseeds[b],
                int(n_iter[b]),
            )
        )
    return fits


def _point_density(x, w, mu, var):
    return _logsumexp(_log_gauss(x, mu, var) + np.log(w), axis=-1)


def fit_gmm(
    embeddings,
    K: int,
    seed: int | np.random.Generator = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    init: GmmParams | None = None,
) -> GmmFit:
    """Fit a K-component diagonal GMM to (L, d) embeddings by EM."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("embeddings must be (L, d)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return fit_gmm_batch(x[None], K, rng, max_iters, tol, None if init is None else [init])[0]


# ------------------------------------------------------- frame selection


def select_critical_frames(
    embeddings,
    gmm: GmmParams,
    frame_indices=None,
    current_index: int = 0,
) -> CriticalFrameSet:
    """Nearest memory frame to each component mean, plus the current frame.

    Ties go to the most recent frame. A frame already claimed by an earlier
    component is skipped in favour of that component's next-nearest frame,
    so the result has K+1 distinct indices whenever L >= K.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    L = len(x)
    idx = np.arange(-L, 0) if frame_indices is None else np.asarray(frame_indices)
    dist = np.sqrt(np.sum((x[:, None, :] - gmm.means[None]) ** 2, axis=-1))  # (L, K)
    taken: dict[int, int] = {}
    for k in range(gmm.K):
        # stable sort on reversed rows puts later frames first among ties
        order = L - 1 - np.argsort(dist[::-1, k], kind="stable")
        for i in order:
            if int(idx[i]) not in taken:
                taken[int(idx[i])] = k
                break
    picked = sorted(taken.items())
    return CriticalFrameSet(
        tuple(i for i, _ in picked) + (current_index,),
        tuple(k for _, k in picked) + (-1,),
    )


# ------------------------------------------------- temporal weighted attention


def temporal_logit_bias(anchor_index, frame_index, delta: float):
    """Gaussian-kernel log weight -(dt^2) / (2 delta^2); broadcasts."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    dt = np.abs(np.asarray(anchor_index, dtype=np.float64) - np.asarray(frame_index, dtype=np.float64))
    out = -(dt**2) / (2.0 * delta**2)
    return float(out) if np.ndim(out) == 0 else out


def init_twa(params: ParamStore, d_model: int, prefix: str = "twa") -> None:
    for n in ("wq", "wk", "wv"):
        params.add(f"{prefix}.{n}", (d_model, d_model))


def twa(
    emb: torch.Tensor,
    positions: torch.Tensor,
    frame_index: torch.Tensor,
    params: ParamStore,
    delta: float,
    heads: int,
    key_mask: torch.Tensor | None = None,
    prefix: str = "twa",
    return_weights: bool = False,
):
    """Temporal weighted attention.

    emb (..., N, d) holds every projected window frame, ``positions``
    (..., M) are the row numbers of the anchors and ``frame_index`` (N,) the
    frame index of each row. Masked keys (``key_mask`` False) get -inf logits.
    """
    anchors = torch.gather(emb, -2, positions.unsqueeze(-1).expand(*positions.shape, emb.shape[-1]))
    t_anchor = frame_index[positions].to(torch.float64)
    dt = t_anchor.unsqueeze(-1) - frame_index.to(torch.float64)
    bias = -(dt**2) / (2.0 * delta**2)
    if key_mask is not None:
        bias = bias.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return multihead_attention(params, prefix, anchors, emb, heads, bias, return_weights)


def compress_to_states(
    window: MemoryWindow,
    critical: CriticalFrameSet,
    params: ParamStore,
    delta: float,
    heads: int = 1,
    return_weights: bool = False,
):
    """K+1 critical states (one row per critical frame, same order)."""
    idx = window.indices
    pos = {int(i): r for r, i in enumerate(idx)}
    missing = [i for i in critical.indices if i not in pos]
    if missing:
        raise ValueError(f"critical indices {missing} outside the window")
    emb = project(window.features(), params)
    positions = torch.tensor([pos[i] for i in critical.indices])
    out = twa(emb, positions, torch.as_tensor(idx), params, delta, heads, return_weights=return_weights)
    if return_weights:
        check_finite(out[0], "critical states")
    else:
        check_finite(out, "critical states")
    return out
