"""Training loop, evaluation, streaming inference, checkpoints, ablations."""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from . import container, csmc
from .config import RunConfig
from .cti import INTERACTION_CASES
from .metrics import ScoredFrames, accuracy, calibrated_map, class_mean_top5_recall, per_frame_map
from .model import SSM
from .numerics import DimensionError, NumericError, ParamStore
from .objective import OptimState, adam_update
from .synthdata import Episode

log = logging.getLogger(__name__)

SSMC_MAGIC = b"SSMC"


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    d_in: int
    n_classes: int
    params: ParamStore
    optim: OptimState | None = None
    step: int = 0

    def model(self) -> SSM:
        return SSM(self.config, self.d_in, self.n_classes, self.params)

    def to_bytes(self) -> bytes:
        quantize_(self.params)
        tensors: list[tuple[str, torch.Tensor]] = [(n, t.detach()) for n, t in self.params.items()]
        optim = None
        if self.optim is not None:
            o = self.optim
            optim = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
            tensors += [(f"optim.m/{n}", t) for n, t in o.m.items()]
            tensors += [(f"optim.v/{n}", t) for n, t in o.v.items()]
        header = {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "d_in": self.d_in,
            "n_classes": self.n_classes,
            "step": self.step,
            "optim": optim,
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        }
        payload = b"".join(t.numpy().astype("<f4").tobytes() for _, t in tensors)
        return container.pack(SSMC_MAGIC, header, payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        header, payload = container.unpack(data, SSMC_MAGIC)
        try:
            config = RunConfig.from_dict(header["config"])
            manifest = [(m["name"], tuple(int(s) for s in m["shape"])) for m in header["tensors"]]
            d_in, n_classes, step = int(header["d_in"]), int(header["n_classes"]), int(header["step"])
            optim_meta = header.get("optim")
        except (KeyError, TypeError, ValueError) as exc:
            raise container.HeaderError(f"bad checkpoint header: {exc}") from exc
        sizes = [int(np.prod(s)) for _, s in manifest]
        container.check_payload(payload, 4 * sum(sizes))
        flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        params = ParamStore(seed=config.seed)
        optim = None if optim_meta is None else OptimState(**optim_meta)
        off = 0
        for (name, shape), n in zip(manifest, sizes):
            arr = flat[off : off + n].reshape(shape)
            off += n
            if name.startswith("optim.m/"):
                optim.m[name[8:]] = torch.from_numpy(arr.copy())
            elif name.startswith("optim.v/"):
                optim.v[name[8:]] = torch.from_numpy(arr.copy())
            else:
                params.add(name, shape, value=arr)
        return cls(config, d_in, n_classes, params, optim, step)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@torch.no_grad()
def quantize_(params: ParamStore) -> None:
    """Round every parameter to the nearest float32 so saving is lossless."""
    for _, t in params.items():
        t.copy_(t.to(torch.float32).to(torch.float64))


# ----------------------------------------------------------------- windows


def window_at(features: np.ndarray, t: int, memory: int) -> tuple[np.ndarray, np.ndarray]:
    """(L_m + 1, D) window ending at frame t, zero padded before frame 0, plus validity mask."""
    lo = t - memory
    win = np.zeros((memory + 1, features.shape[1]))
    mask = np.zeros(memory + 1, dtype=bool)
    src_lo = max(lo, 0)
    win[src_lo - lo :] = features[src_lo : t + 1]
    mask[src_lo - lo :] = True
    return win, mask


def _sample_positions(episodes: Sequence[Episode], cfg: RunConfig, rng, n: int):
    lo = cfg.memory
    spans = [len(ep) - cfg.horizon - lo for ep in episodes]
    weights = np.asarray(spans, dtype=np.float64) / sum(spans)
    which = rng.choice(len(episodes), size=n, p=weights)
    ts = np.array([lo + rng.integers(spans[e]) for e in which])
    return which, ts


def _batch(episodes, which, ts, memory):
    wins = np.stack([episodes[e].features[t - memory : t + 1] for e, t in zip(which, ts)])
    y_d = np.array([episodes[e].y_d[t] for e, t in zip(which, ts)])
    y_a = np.array([episodes[e].y_a[t] for e, t in zip(which, ts)])
    return wins, y_d, y_a


def learning_rate(config: RunConfig, step: int) -> float:
    """Linear warmup, then constant or cosine decay over ``config.steps``."""
    lr = config.lr
    if config.warmup:
        lr *= min(1.0, (step + 1) / config.warmup)
    if config.schedule == "cosine":
        lr *= 0.5 * (1 + math.cos(math.pi * step / config.steps))
    return lr


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)


def train(
    config: RunConfig,
    episodes: Sequence[Episode],
    n_classes: int | None = None,
    eval_episodes: Sequence[Episode] | None = None,
    checkpoint: Checkpoint | None = None,
) -> TrainResult:
    """Adam on the three-term objective over uniformly sampled window positions."""
    if not episodes:
        raise ValueError("no training episodes")
    for ep in episodes:
        if not ep.has_labels:
            raise ValueError("training episodes need labels")
        if len(ep) <= config.memory + config.horizon:
            raise ValueError(
                f"episode of {len(ep)} frames too short for memory {config.memory} + horizon {config.horizon}"
            )
        if ep.horizon != config.horizon:
            raise ValueError(f"episode horizon {ep.horizon} != config horizon {config.horizon}")
    d_in = episodes[0].features.shape[1]
    if n_classes is None:
        n_classes = int(max(ep.y_d.max() for ep in episodes)) + 1
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if checkpoint is None:
        model = SSM(config, d_in, n_classes)
        state = OptimState(lr=config.lr)
        step0 = 0
    else:
        model = checkpoint.model()
        state = checkpoint.optim or OptimState(lr=config.lr)
        step0 = checkpoint.step
    trainable = [
        n for n in model.params.names() if config.train_only is None or any(n.startswith(p) for p in config.train_only)
    ]
    history: list[dict] = []
    running = {"loss": 0.0, "l_d": 0.0, "l_a": 0.0, "l_st": 0.0, "acc_d": 0.0, "acc_a": 0.0}
    count = 0
    for step in range(step0, step0 + config.steps):
        which, ts = _sample_positions(episodes, config, rng, config.batch_size)
        wins, y_d, y_a = _batch(episodes, which, ts, config.memory)
        positions = model.critical_positions(wins, rng)
        out = model.forward(wins, positions)
        parts = model.loss(out, y_d, y_a)
        value = float(parts.total.detach())
        if not math.isfinite(value):
            raise NumericError(
                f"loss diverged at step {step}: L_d={float(parts.detection)}, "
                f"L_a={float(parts.anticipation)}, L_st={float(parts.consistency)}"
            )
        grads = torch.autograd.grad(parts.total, [model.params[n] for n in trainable], allow_unused=True)
        state.lr = learning_rate(config, step - step0)
        adam_update(model.params, {n: g for n, g in zip(trainable, grads) if g is not None}, state)
        running["loss"] += value
        running["l_d"] += parts.detection.item()
        running["l_a"] += parts.anticipation.item()
        running["l_st"] += parts.consistency.item()
        running["acc_d"] += float((out.p_d.argmax(-1).numpy() == y_d).mean())
        running["acc_a"] += float((out.p_a.argmax(-1).numpy() == y_a).mean())
        count += 1
        last = step == step0 + config.steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            entry = {"step": step + 1, **{k: v / count for k, v in running.items()}}
            if eval_episodes:
                ev = evaluate(Checkpoint(config, d_in, n_classes, model.params), eval_episodes)
                entry.update({f"eval_{k}": v for k, v in ev.items()})
            history.append(entry)
            log.info("step %d %s", step + 1, entry)
            running = dict.fromkeys(running, 0.0)
            count = 0
    quantize_(model.params)
    ckpt = Checkpoint(config, d_in, n_classes, model.params, state, step0 + config.steps)
    return TrainResult(ckpt, history)


# -------------------------------------------------------------- evaluation


def predict_windows(
    ckpt: Checkpoint, episode: Episode, start: int | None = None, chunk: int = 256
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores at every position with a full memory window (t >= L_m).

    Each window is clustered independently (fresh seeding per window).
    Returns (positions, p_d, p_a).
    """
    model = ckpt.model()
    cfg = ckpt.config
    start = cfg.memory if start is None else start
    ts = np.arange(start, len(episode))
    rng = np.random.default_rng(cfg.seed)
    p_d, p_a = [], []
    with torch.no_grad():
        for i in range(0, len(ts), chunk):
            part = ts[i : i + chunk]
            wins = np.stack([episode.features[t - cfg.memory : t + 1] for t in part])
            out = model.forward(wins, model.critical_positions(wins, rng))
            p_d.append(out.p_d.numpy())
            p_a.append(out.p_a.numpy())
    return ts, np.concatenate(p_d), np.concatenate(p_a)


def evaluate(ckpt: Checkpoint, episodes: Sequence[Episode]) -> dict:
    """Detection/anticipation accuracy plus per-frame mAP, mcAP, top-5 recall."""
    dets, ants, y_d, y_a = [], [], [], []
    for ep in episodes:
        ts, pd, pa = predict_windows(ckpt, ep)
        dets.append(pd)
        ants.append(pa)
        y_d.append(ep.y_d[ts])
        y_a.append(ep.y_a[ts])
    return score_predictions(np.concatenate(dets), np.concatenate(y_d), np.concatenate(ants), np.concatenate(y_a))


def score_predictions(p_d, y_d, p_a=None, y_a=None) -> dict:
    det = ScoredFrames.valid(p_d, y_d)
    out = {
        "detection_accuracy": accuracy(p_d, y_d),
        "detection_mAP": per_frame_map(det),
        "detection_mcAP": calibrated_map(det),
        "detection_top5_recall": class_mean_top5_recall(det),
    }
    if p_a is not None:
        ant = ScoredFrames.valid(p_a, y_a)
        out.update(
            {
                "anticipation_accuracy": accuracy(p_a, y_a),
                "anticipation_mAP": per_frame_map(ant),
                "anticipation_mcAP": calibrated_map(ant),
                "anticipation_top5_recall": class_mean_top5_recall(ant),
            }
        )
    return out


# --------------------------------------------------------------- streaming


class Streamer:
    """Online inference over a frame stream, one frame at a time.

    Keeps a rolling window of L_m + 1 frames (zero padded and masked until it
    fills) and warm-starts EM from the previous frame's mixture.
    """

    def __init__(self, ckpt: Checkpoint):
        self.model = ckpt.model()
        self.cfg = ckpt.config
        self.d_in = ckpt.d_in
        self.rng = np.random.default_rng(self.cfg.seed)
        self.buffer: list[np.ndarray] = []
        self.gmm: csmc.GmmParams | None = None
        self.last_critical: csmc.CriticalFrameSet | None = None
        self.last_attention: torch.Tensor | None = None

    def push(self, feature) -> tuple[np.ndarray, np.ndarray]:
        f = np.asarray(feature, dtype=np.float64)
        if f.shape != (self.d_in,):
            raise DimensionError(f"frame width {f.shape} vs checkpoint input {self.d_in}")
        cfg = self.cfg
        self.buffer.append(f)
        if len(self.buffer) > cfg.memory + 1:
            self.buffer.pop(0)
        feats = np.stack(self.buffer)
        win, mask = window_at(feats, len(feats) - 1, cfg.memory)
        n_mem = len(feats) - 1
        rows = np.flatnonzero(mask[:-1])
        if n_mem == 0:
            positions = np.full(cfg.clusters + 1, cfg.memory)
            crit = csmc.CriticalFrameSet((0,) * (cfg.clusters + 1), (-1,) * (cfg.clusters + 1))
        else:
            emb = self.model.embed(win[rows])
            k = min(cfg.clusters, n_mem)
            init = self.gmm if self.gmm is not None and self.gmm.K == k else None
            fit = csmc.fit_gmm(emb, k, self.rng, cfg.em_iters, cfg.em_tol, init=init)
            self.gmm = None if fit.reseeds else fit.params
            crit = csmc.select_critical_frames(emb, fit.params, np.arange(-n_mem, 0))
            pad = cfg.clusters + 1 - len(crit.indices)
            crit = csmc.CriticalFrameSet(
                crit.indices[:-1] + (0,) * pad + (0,), crit.clusters[:-1] + (-1,) * pad + (-1,)
            )
            positions = np.asarray(crit.indices) + cfg.memory
        self.last_critical = crit
        with torch.no_grad():
            out = self.model.forward(win[None], positions[None], mask[None], return_attention=True)
        self.last_attention = out.attention[0]
        return out.p_d[0].numpy(), out.p_a[0].numpy()


def stream_infer(ckpt: Checkpoint, frames: Iterable) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    s = Streamer(ckpt)
    for f in frames:
        yield s.push(getattr(f, "feature", f))


def attention_rows(ckpt: Checkpoint, episode: Episode, t: int) -> list[dict]:
    """TWA weights of every critical anchor over the window ending at frame t."""
    if not 0 <= t < len(episode):
        raise ValueError(f"frame {t} outside episode of {len(episode)} frames")
    s = Streamer(ckpt)
    for f in episode.features[max(0, t - ckpt.config.memory) : t + 1]:
        s.push(f)
    att = s.last_attention.numpy()  # (heads, K+1, L_m+1)
    crit = s.last_critical
    rows = []
    offset = ckpt.config.memory
    for h in range(att.shape[0]):
        for slot, anchor in enumerate(crit.indices):
            for r in range(att.shape[2]):
                frame = t + r - offset
                if frame < 0:
                    continue
                rows.append(
                    {
                        "head": h,
                        "slot": slot,
                        "anchor_frame": t + anchor,
                        "key_frame": frame,
                        "offset": r - offset,
                        "weight": float(att[h, slot, r]),
                    }
                )
    return rows


# ------------------------------------------------------------ grad check


def model_grad_check(config: RunConfig, d_in: int = 16, n_classes: int = 7, batch: int = 2, eps: float = 1e-4) -> dict:
    """Full-model autodiff vs central differences on a generated toy batch.

    Critical positions are selected once and held fixed: the EM and the
    nearest-frame choice are discrete and carry no gradient.
    """
    from .numerics import grad_check
    from .synthdata import default_world, generate_episode

    world = default_world(n_classes=n_classes - 1, dim=d_in)
    ep = generate_episode(world, config.memory + config.horizon + batch + 1, config.seed, config.horizon)
    model = SSM(config, d_in, n_classes)
    rng = np.random.default_rng(config.seed)
    ts = np.arange(config.memory, config.memory + batch)
    wins, y_d, y_a = _batch([ep], np.zeros(batch, dtype=int), ts, config.memory)
    positions = model.critical_positions(wins, rng)

    def loss(params):
        model.params = params
        return model.loss(model.forward(wins, positions), y_d, y_a).total

    err = grad_check(loss, model.params, eps=eps)
    return {"max_rel_error": err, "n_params": model.params.numel(), "eps": eps}


# ---------------------------------------------------------------- ablation


def run_ablation(
    base: RunConfig,
    train_episodes: Sequence[Episode],
    test_episodes: Sequence[Episode],
    seeds: Sequence[int] = (0, 1, 2),
    cases: Sequence[int] = tuple(INTERACTION_CASES),
    n_classes: int | None = None,
) -> dict:
    """Train and evaluate every interaction case under shared seeds."""
    rows = []
    for case in cases:
        for seed in seeds:
            cfg = base.with_case(case).replace(seed=int(seed))
            res = train(cfg, train_episodes, n_classes)
            ev = evaluate(res.checkpoint, test_episodes)
            rows.append(
                {
                    "case": case,
                    "seed": int(seed),
                    "past": "past" in cfg.interaction,
                    "present": "present" in cfg.interaction,
                    "future": "future" in cfg.interaction,
                    "detection_accuracy": ev["detection_accuracy"],
                    "anticipation_accuracy": ev["anticipation_accuracy"],
                    "detection_mAP": ev["detection_mAP"],
                    "anticipation_mAP": ev["anticipation_mAP"],
                }
            )
    summary = {}
    for case in cases:
        mine = [r for r in rows if r["case"] == case]
        summary[case] = {
            "detection_accuracy": statistics.median(r["detection_accuracy"] for r in mine),
            "anticipation_accuracy": statistics.median(r["anticipation_accuracy"] for r in mine),
        }
    return {"rows": rows, "median": summary}
