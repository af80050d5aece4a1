"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import container
from .config import RunConfig
from .cti import INTERACTION_CASES
from .harness import (
    Checkpoint,
    Streamer,
    attention_rows,
    evaluate,
    model_grad_check,
    run_ablation,
    score_predictions,
    train,
)
from .metrics import UndefinedMetricError
from .numerics import NumericError
from .synthdata import WorldSpec, default_world, generate_episode, load_feature_file, write_feature_file

log = logging.getLogger("ssm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# toy sizes for the gradient check; every finite difference costs two forwards
GRAD_CHECK_DEFAULTS = {"memory": 15, "clusters": 2, "d_model": 8, "d_edge": 4, "heads": 2, "n_layers": 2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides SSM_SEED and the config seed")
    p.add_argument("--out", type=Path, help="output directory (or file, where noted)")
    p.add_argument("--horizon", type=int, help="anticipation gap in frames")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="ssm", description="Joint online action detection and anticipation.")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="sample synthetic episodes into SSMF files")
    _common(p)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--world", type=Path, help="JSON world spec (default world if absent)")

    p = sub.add_parser("train", help="train a model, write checkpoint and metric log")
    _common(p)
    p.add_argument("--data", type=Path, nargs="+", help="SSMF training files")
    p.add_argument("--eval-data", type=Path, nargs="+")
    p.add_argument("--episodes", type=int, default=8, help="generated episodes when --data is absent")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="metrics JSON for a checkpoint or a score file")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, nargs="+")
    p.add_argument("--scores", type=Path, help="JSON with p_d, y_d and optionally p_a, y_a")

    p = sub.add_parser("stream", help="per-frame JSON lines of p_d and p_a")
    _common(p, checkpoint=True)
    p.add_argument("--data", type=Path, help="SSMF file (standard input JSON lines if absent)")

    p = sub.add_parser("ablate", help="interaction-case grid as CSV")
    _common(p)
    p.add_argument("--data", type=Path, nargs="+")
    p.add_argument("--test-data", type=Path, nargs="+")
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--cases", type=int, nargs="+", default=sorted(INTERACTION_CASES), choices=sorted(INTERACTION_CASES))

    p = sub.add_parser("grad-check", help="full-model autodiff vs finite differences")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=2)

    p = sub.add_parser("dump-attention", help="CSV of TWA weights per critical anchor")
    _common(p, checkpoint=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--frame", type=int, help="current frame (default: last)")
    return root


# ------------------------------------------------------------------ config


def resolve_config(args, base: RunConfig | None = None, defaults: dict | None = None) -> RunConfig:
    """Config file, then SSM_SEED, then --seed / --horizon, in rising precedence."""
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    else:
        cfg = base or RunConfig(**(defaults or {}))
    env = os.environ.get("SSM_SEED")
    if env is not None:
        try:
            cfg = cfg.replace(seed=int(env))
        except ValueError:
            raise UsageError(f"SSM_SEED must be an integer, got {env!r}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "horizon", None) is not None:
        cfg = cfg.replace(horizon=args.horizon)
    return cfg


def _echo(cfg: RunConfig) -> None:
    print(json.dumps({"resolved_config": cfg.to_dict()}, sort_keys=True), file=sys.stderr)


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "seed": cfg.seed}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _out_dir(args) -> Path:
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _episodes(paths, cfg: RunConfig, n: int, seed_base: int):
    if paths:
        return [load_feature_file(p) for p in paths]
    world = default_world()
    return [generate_episode(world, 2000, seed_base + i, cfg.horizon) for i in range(n)]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    world = WorldSpec.from_dict(json.loads(args.world.read_text())) if args.world else default_world()
    out = _out_dir(args)
    meta = {**_provenance(cfg), "world": world.to_dict()}
    for i in range(args.episodes):
        ep = generate_episode(world, args.length, cfg.seed + i, cfg.horizon)
        write_feature_file(out / f"episode_{i:03d}.ssmf", ep, {**meta, "episode_seed": cfg.seed + i})
    (out / "world.json").write_text(_dump(meta))
    return EXIT_OK


def cmd_train(args) -> int:
    resume = Checkpoint.load(args.resume) if args.resume else None
    cfg = resolve_config(args, base=resume.config if resume else None)
    _echo(cfg)
    episodes = _episodes(args.data, cfg, args.episodes, cfg.seed * 1000 + 100)
    evals = [load_feature_file(p) for p in args.eval_data] if args.eval_data else None
    n_classes = resume.n_classes if resume else None
    if resume is not None:
        resume.config = cfg
    res = train(cfg, episodes, n_classes, evals, resume)
    out = _out_dir(args)
    res.checkpoint.save(out / "checkpoint.ssmc")
    (out / "metrics.json").write_text(_dump({**_provenance(cfg), "log": res.log}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.scores is not None:
        cfg = resolve_config(args)
        d = json.loads(args.scores.read_text())
        try:
            p_a = None if d.get("p_a") is None else np.asarray(d["p_a"], dtype=np.float64)
            y_a = None if d.get("y_a") is None else np.asarray(d["y_a"])
            result = score_predictions(np.asarray(d["p_d"], dtype=np.float64), np.asarray(d["y_d"]), p_a, y_a)
        except KeyError as exc:
            raise ValueError(f"score file lacks {exc}") from None
    else:
        if args.checkpoint is None or not args.data:
            raise UsageError("eval needs --scores, or --checkpoint with --data")
        ckpt = Checkpoint.load(args.checkpoint)
        cfg = resolve_config(args, base=ckpt.config)
        ckpt.config = cfg
        result = evaluate(ckpt, [load_feature_file(p) for p in args.data])
    _echo(cfg)
    text = _dump({**_provenance(cfg), "metrics": result})
    print(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    return EXIT_OK


def _stdin_frames():
    for n, line in enumerate(sys.stdin, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"stdin line {n}: {exc}") from None
        yield obj["feature"] if isinstance(obj, dict) else obj


def cmd_stream(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = resolve_config(args, base=ckpt.config)
    ckpt.config = cfg
    _echo(cfg)
    frames = load_feature_file(args.data).features if args.data else _stdin_frames()
    s = Streamer(ckpt)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for t, f in enumerate(frames):
            p_d, p_a = s.push(f)
            sink.write(json.dumps({"t": t, "p_d": p_d.tolist(), "p_a": p_a.tolist()}) + "\n")
            sink.flush()
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def _write_csv(rows: list[dict], dest: Path | None, header_comment: dict) -> None:
    buf = io.StringIO()
    buf.write("# " + json.dumps(header_comment, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if dest is None:
        sys.stdout.write(buf.getvalue())
    else:
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(buf.getvalue())


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    train_eps = _episodes(args.data, cfg, args.episodes, 100)
    test_eps = _episodes(args.test_data, cfg, max(1, args.episodes // 2), 900)
    table = run_ablation(cfg, train_eps, test_eps, args.seeds, args.cases)
    out = None if args.out is None else (args.out if args.out.suffix else args.out / "ablation.csv")
    _write_csv(table["rows"], out, _provenance(cfg))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args, defaults=GRAD_CHECK_DEFAULTS)
    _echo(cfg)
    res = model_grad_check(cfg, batch=args.batch, eps=args.eps)
    print(json.dumps({**res, "seed": cfg.seed}, sort_keys=True))
    return EXIT_OK if res["max_rel_error"] < 1e-4 else EXIT_NUMERIC


def cmd_dump_attention(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = resolve_config(args, base=ckpt.config)
    ckpt.config = cfg
    _echo(cfg)
    ep = load_feature_file(args.data)
    t = len(ep) - 1 if args.frame is None else args.frame
    _write_csv(attention_rows(ckpt, ep, t), args.out, {**_provenance(cfg), "frame": t})
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "dump-attention": cmd_dump_attention,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ssm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"ssm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (container.FormatError, ValueError, KeyError, OSError, UndefinedMetricError) as exc:
        print(f"ssm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
