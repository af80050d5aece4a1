"""Synthetic Markov action world, its exact Bayes filter, and SSMF feature files.

Hidden classes follow a first-order Markov chain; each frame emits the class
centroid plus isotropic Gaussian noise. Because the generator is known, the
forward recursion gives the Bayes-optimal detection and anticipation
posteriors that acceptance thresholds are measured against.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .csmc import FeatureFrame

SSMF_MAGIC = b"SSMF"

# noise level giving ~0.80 nearest-centroid accuracy on the default centroids
DEFAULT_SIGMA = 1.15


@dataclass
class WorldSpec:
    transition: np.ndarray  # (C+1, C+1), row-stochastic
    centroids: np.ndarray  # (C+1, D)
    sigma: float
    fps: float = 4.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.validate()

    @property
    def n_classes(self) -> int:
        """Number of action classes C, excluding background."""
        return self.transition.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def horizon(self) -> int:
        return int(round(self.fps * 1.0))

    def validate(self) -> None:
        T = self.transition
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(T < 0) or np.max(np.abs(T.sum(axis=1) - 1)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if self.centroids.shape[0] != T.shape[0]:
            raise ValueError("one centroid per class (background included)")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        diff = self.centroids[:, None] - self.centroids[None]
        d = np.sum(diff**2, axis=-1) + np.eye(len(T))
        if np.any(d == 0):
            raise ValueError("centroids must be pairwise distinct")

    def stationary(self) -> np.ndarray:
        n = len(self.transition)
        a = np.vstack([self.transition.T - np.eye(n), np.ones(n)])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(a, b, rcond=None)[0]
        pi = np.clip(pi, 0, None)
        return pi / pi.sum()

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "centroids": self.centroids.tolist(),
            "sigma": self.sigma,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(np.array(d["transition"]), np.array(d["centroids"]), float(d["sigma"]), float(d.get("fps", 4.0)))


def default_world(
    n_classes: int = 6,
    dim: int = 16,
    sigma: float = DEFAULT_SIGMA,
    stay: float = 0.85,
    advance: float = 0.10,
    fps: float = 4.0,
    seed: int = 0,
) -> WorldSpec:
    """Cyclic action grammar: each class mostly persists, else usually advances.

    Class c moves to (c + 1) mod (C + 1) with probability ``advance`` and the
    leftover mass is spread evenly over the remaining classes.
    """
    n = n_classes + 1
    T = np.full((n, n), (1.0 - stay - advance) / (n - 2))
    for c in range(n):
        T[c, c] = stay
        T[c, (c + 1) % n] = advance
    T /= T.sum(axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(n, dim)) * np.sqrt(2.0 / dim) * 2.0
    return WorldSpec(T, centroids, sigma, fps)


@dataclass
class Episode:
    features: np.ndarray  # (n, D)
    y_d: np.ndarray | None  # (n,)
    y_a: np.ndarray | None  # (n,), -1 where t + horizon runs past the end
    horizon: int
    fps: float = 4.0

    def __len__(self) -> int:
        return len(self.features)

    @property
    def has_labels(self) -> bool:
        return self.y_d is not None

    @property
    def frames(self) -> list[FeatureFrame]:
        return [FeatureFrame(i, f) for i, f in enumerate(self.features)]


def future_labels(y_d: np.ndarray, horizon: int) -> np.ndarray:
    y_a = np.full(len(y_d), -1, dtype=np.int64)
    if horizon < len(y_d):
        y_a[: len(y_d) - horizon] = y_d[horizon:]
    return y_a


def sample_states(spec: WorldSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    states = np.empty(length, dtype=np.int64)
    cum = np.cumsum(spec.transition, axis=1)
    u = rng.random(length)
    states[0] = min(int(np.searchsorted(np.cumsum(spec.stationary()), u[0], side="right")), len(cum) - 1)
    for t in range(1, length):
        states[t] = min(int(np.searchsorted(cum[states[t - 1]], u[t], side="right")), len(cum) - 1)
    return states


def generate_episode(spec: WorldSpec, length: int, seed: int, horizon: int | None = None) -> Episode:
    spec.validate()
    horizon = spec.horizon if horizon is None else int(horizon)
    if length <= horizon:
        raise ValueError(f"episode length {length} must exceed horizon {horizon}")
    rng = np.random.default_rng(seed)
    y_d = sample_states(spec, length, rng)
    noise = rng.normal(size=(length, spec.dim)) * spec.sigma
    feats = spec.centroids[y_d] + noise
    return Episode(feats, y_d, future_labels(y_d, horizon), horizon, spec.fps)


def emission_loglik(spec: WorldSpec, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"feature width {x.shape[-1]} vs world dimension {spec.dim}")
    d2 = np.sum((x[:, None, :] - spec.centroids[None]) ** 2, axis=-1)
    if spec.sigma == 0:
        # noiseless world: only an exact centroid match has support
        ll = np.where(d2 == 0, 0.0, -np.inf)
        if np.any(np.all(np.isinf(ll), axis=1)):
            raise ValueError("feature matches no centroid in a noiseless world")
        return ll
    return -d2 / (2 * spec.sigma**2)


def bayes_oracle(spec: WorldSpec, features, horizon: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Filtered posteriors p(y_t | x_<=t) and p(y_t+h | x_<=t), each (n, C+1)."""
    horizon = spec.horizon if horizon is None else int(horizon)
    ll = emission_loglik(spec, features)
    T = spec.transition
    post = np.empty_like(ll)
    prior = spec.stationary()
    for t in range(len(ll)):
        logp = np.log(np.maximum(prior, 1e-300)) + ll[t]
        p = np.exp(logp - logp.max())
        post[t] = p / p.sum()
        prior = post[t] @ T
    return post, post @ np.linalg.matrix_power(T, horizon)


def nearest_centroid(spec: WorldSpec, features) -> np.ndarray:
    return np.argmax(emission_loglik(spec, features), axis=1)


# ------------------------------------------------------------------ SSMF


def encode_feature_file(ep: Episode, meta: dict | None = None) -> bytes:
    """SSMF bytes; ``meta`` is stored verbatim in the header (provenance)."""
    feats = np.asarray(ep.features)
    n, dim = feats.shape
    header = {"frames": n, "dim": dim, "fps": ep.fps, "has_labels": ep.has_labels, "horizon": ep.horizon}
    if meta is not None:
        header["meta"] = meta
    payload = feats.astype("<f4").tobytes()
    if ep.has_labels:
        y_a = ep.y_a if ep.y_a is not None else future_labels(ep.y_d, ep.horizon)
        payload += np.asarray(ep.y_d).astype("<i4").tobytes() + np.asarray(y_a).astype("<i4").tobytes()
    return container.pack(SSMF_MAGIC, header, payload)


def decode_feature_file(data: bytes) -> Episode:
    header, payload = container.unpack(data, SSMF_MAGIC)
    try:
        n, dim = int(header["frames"]), int(header["dim"])
        has_labels = bool(header["has_labels"])
        horizon = int(header["horizon"])
        fps = float(header["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise container.HeaderError(f"bad SSMF header: {exc}") from exc
    if n < 0 or dim < 1:
        raise container.HeaderError("frames must be >= 0 and dim >= 1")
    n_feat = n * dim * 4
    container.check_payload(payload, n_feat + (8 * n if has_labels else 0))
    feats = np.frombuffer(payload[:n_feat], dtype="<f4").reshape(n, dim).astype(np.float64)
    y_d = y_a = None
    if has_labels:
        y_d = np.frombuffer(payload[n_feat : n_feat + 4 * n], dtype="<i4").astype(np.int64)
        y_a = np.frombuffer(payload[n_feat + 4 * n :], dtype="<i4").astype(np.int64)
    return Episode(feats, y_d, y_a, horizon, fps)


def write_feature_file(path, ep: Episode, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_feature_file(ep, meta))


def load_feature_file(path) -> Episode:
    return decode_feature_file(Path(path).read_bytes())
