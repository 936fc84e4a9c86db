"""``hmamba`` command line: episodes, scan checks, benchmarks, training, evaluation, diagnostics.

Every command writes ``run_manifest.json`` into its ``--out`` directory.
Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from . import diagnostics as D
from . import episodes as E
from . import tensorfile as tf
from .network import (ABLATIONS, HmNetConfig, NetWeights, hmnet_forward, load_checkpoint,
                      save_checkpoint)
from .ssm import DomainError
from .training import TrainConfig, evaluate, train_toy, write_trace

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
MANIFEST = "run_manifest.json"

log = logging.getLogger("hmamba")


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


# config ----------------------------------------------------------------------

def _read_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _section(data, key, cls):
    """Fields of ``cls`` from ``data[key]`` or, failing that, from top-level keys."""
    names = {f.name for f in fields(cls)}
    src = data.get(key, data)
    if not isinstance(src, dict):
        raise UsageError(f"config section {key!r} must be an object")
    return {k: v for k, v in src.items() if k in names}


def model_config(args, data) -> HmNetConfig:
    base = HmNetConfig.paper_shape() if args.profile == "paper-shape" else HmNetConfig.toy()
    kw = base.to_dict()
    kw.update(_section(data, "model", HmNetConfig))
    for flag, name in (("alpha", "alpha"), ("blocks", "num_block_pairs"), ("channels", "channels"),
                       ("state_size", "state_size")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = v
    if args.ablation:
        kw.update(dict(hmb=True, srm=True, recap=True, qim=True, share=True))
        kw.update(ABLATIONS[args.ablation])
    for flag in ("recap", "share", "qim"):
        v = getattr(args, flag, None)
        if v is not None:
            kw[flag] = v
            kw["hmb"] = True
    try:
        return HmNetConfig(**kw)
    except (DomainError, TypeError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def train_config(args, data) -> TrainConfig:
    kw = _section(data, "train", TrainConfig)
    for name in ("steps", "lr", "batch_size", "optimizer", "eval_every"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    kw["seed"] = args.seed
    try:
        return TrainConfig(**kw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def episode_spec(args, data, novel=False) -> E.SyntheticEpisodeSpec:
    kw = dict(data.get("episodes", {}))
    if getattr(args, "spec", None):
        kw.update(_read_config(args.spec))
    fold = getattr(args, "fold", 0) or 0
    if "families" not in kw:
        train, nov = E.split_families(fold)
        kw["families"] = list(nov if novel else train)
    try:
        return E.SyntheticEpisodeSpec.from_dict(kw)
    except (TypeError, ValueError, E.EpisodeError) as exc:
        raise UsageError(f"invalid episode spec: {exc}") from None


# run manifest ---------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=10, cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Run:
    """Collects outputs and timings of one command and writes the manifest."""

    def __init__(self, command, out, seed, config):
        self.command = command
        self.out = out
        self.seed = seed
        self.config = config
        self.outputs = []
        self.timings = {}
        self._t0 = time.perf_counter()
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def timed(self, name, fn, *a, **kw):
        t = time.perf_counter()
        res = fn(*a, **kw)
        self.timings[name] = time.perf_counter() - t
        return res

    def finish(self, status="ok", extra=None):
        self.timings["total"] = time.perf_counter() - self._t0
        body = {"command": self.command, "config": self.config, "seed": self.seed,
                "git_describe": git_describe(), "version": __version__,
                "outputs": sorted(set(self.outputs)), "timings": self.timings, "status": status}
        if extra:
            body.update(extra)
        D.write_json(body, os.path.join(self.out, MANIFEST))


def _load_dir(path, what):
    if not path:
        return None
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} directory not found: {path}")
    eps = E.load_episodes(path)
    if not eps:
        raise UsageError(f"{what} directory {path} holds no episodes")
    return eps


# commands ---------------------------------------------------------------------

def cmd_episode_gen(args):
    data = _read_config(args.config)
    spec = episode_spec(args, data, novel=args.split == "novel")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    run = Run("episode-gen", args.out, args.seed, {"episodes": spec.to_dict(), "count": args.count})
    eps = run.timed("generate", E.generate_episodes, spec, args.count, args.seed)
    paths = run.timed("write", E.save_episodes, eps, args.out)
    run.outputs.extend(os.path.relpath(p, args.out) for p in paths)
    run.finish(extra={"families": sorted({e.family for e in eps})})
    print(f"wrote {len(eps)} episodes to {args.out}")
    return EXIT_OK


def cmd_scan_check(args):
    from .verify import gradient_suite, scan_equivalence

    run = Run("scan-check", args.out, args.seed,
              {"sizes": args.sizes, "seeds": args.seeds, "inject_fault": args.inject_fault})
    results = run.timed("equivalence", scan_equivalence, args.sizes, args.seeds,
                        inject_fault=args.inject_fault)
    if not args.skip_gradients:
        results += run.timed("gradients", gradient_suite)
    rows = [r.row() for r in results]
    D.write_csv(rows, run.path("scan_check.csv"))
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.suite:24s} {r.case:20s} "
              f"max_rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e}")
    run.finish(status="fail" if failed else "ok", extra={"failed": len(failed), "cases": len(results)})
    if failed:
        raise VerificationFailed(f"{len(failed)} of {len(results)} cases failed")
    return EXIT_OK


def cmd_bench(args):
    from .bench import DEFAULT_M, run_bench

    ms = args.M or list(DEFAULT_M)
    d = args.channels or 16
    n = args.state_size or 8
    alpha = args.alpha or 4
    run = Run("bench", args.out, args.seed, {"M": ms, "D": d, "N": n, "alpha": alpha, "reps": args.reps,
                                              "attention_max": args.attention_max})
    rows, summary = run.timed("bench", run_bench, ms, d, n, alpha, args.reps, args.attention_max, args.seed)
    D.write_csv(rows, run.path("bench.csv"))
    D.write_json(summary, run.path("bench_summary.json"))
    fit = summary["scan_fit"]
    print(f"scan: {fit['slope_s_per_token'] * 1e6:.3f} us/token, R^2 = {fit['r2']:.4f}")
    print(f"crossover M*: model {summary['model_crossover_M']}, measured {summary['measured_crossover_M']}")
    run.finish(extra={"summary": summary})
    return EXIT_OK


def _datasets(args, data, run):
    train = _load_dir(getattr(args, "train_data", None), "training")
    val = _load_dir(getattr(args, "val_data", None) or getattr(args, "data", None), "validation")
    if train is None and getattr(args, "train_count", 0):
        spec = episode_spec(args, data)
        train = run.timed("generate_train", E.generate_episodes, spec, args.train_count, args.seed)
    if val is None:
        spec = episode_spec(args, data, novel=True)
        val = run.timed("generate_val", E.generate_episodes, spec, args.val_count, args.seed + 1)
    return train, val


def cmd_train(args):
    data = _read_config(args.config)
    cfg = model_config(args, data)
    tcfg = train_config(args, data)
    run = Run("train", args.out, args.seed, {"model": cfg.to_dict(), "train": tcfg.to_dict()})
    train, val = _datasets(args, data, run)
    weights, trace = run.timed("train", train_toy, train, val, tcfg, cfg)
    write_trace(trace, run.path("trace.csv"))
    save_checkpoint(run.path("checkpoint"), weights, cfg, extra={"train": tcfg.to_dict()})
    val_miou, _ = run.timed("final_eval", evaluate, val, weights, cfg)
    best = max((v for _, _, v in trace if v is not None), default=None)
    print(f"best val mIoU {best if best is None else round(best, 4)}; checkpoint in {args.out}/checkpoint")
    run.finish(extra={"best_val_miou": best, "final_val_miou": val_miou})
    return EXIT_OK


def _model_for(args, data):
    if getattr(args, "checkpoint", None):
        w, cfg, _ = load_checkpoint(args.checkpoint)
        return w, cfg
    cfg = model_config(args, data)
    return NetWeights.init(cfg, seed=args.seed), cfg


def cmd_eval(args):
    data = _read_config(args.config)
    w, cfg = _model_for(args, data)
    run = Run("eval", args.out, args.seed, {"model": cfg.to_dict(), "checkpoint": args.checkpoint,
                                             "oracle": args.oracle})
    _, val = _datasets(args, data, run)
    if args.oracle:
        preds = [ep.query_mask.astype(np.uint8) for ep in val]
    else:
        preds = run.timed("forward", lambda: [hmnet_forward(ep, w, cfg).binary_mask for ep in val])
    gts = [ep.query_mask for ep in val]
    per_class, mean = D.miou(preds, gts, [ep.class_id for ep in val])
    fb = D.fbiou(preds, gts)
    D.write_csv([dict(episode=i, class_id=ep.class_id, family=ep.family, iou=D.iou(p, ep.query_mask))
                 for i, (p, ep) in enumerate(zip(preds, val))], run.path("episodes.csv"))
    summary = {"miou": mean, "fbiou": fb, "per_class": {E.FAMILIES[c]: v for c, v in per_class.items()},
               "episodes": len(val)}
    D.write_json(summary, run.path("metrics.json"))
    print(f"mIoU {mean:.4f}  FB-IoU {fb:.4f}  over {len(val)} episodes")
    run.finish(extra={"metrics": summary})
    return EXIT_OK


def cmd_diagnose(args):
    from .network import block_features

    data = _read_config(args.config)
    w, cfg = _model_for(args, data)
    run = Run("diagnose", args.out, args.seed, {"model": cfg.to_dict(), "checkpoint": args.checkpoint})
    _, eps = _datasets(args, data, run)
    trace_rows, sim_rows = [], []
    for i, ep in enumerate(eps):
        stages, s_mask, q_mask = block_features(ep, w, cfg)
        if cfg.hmb and cfg.srm:
            for b in range(cfg.num_block_pairs):
                fq, fs = next((q, s) for name, q, s in stages if name == f"smb{b}")
                tr = D.forgetting_trace(w.hmbs[b], fq, fs, s_mask, cfg.alpha, recap=cfg.recap)
                trace_rows += [dict(episode=i, block=b, **r) for r in tr.rows()]
        if cfg.hmb and q_mask.any() and s_mask.any():
            for b in range(cfg.num_block_pairs):
                before, after = D.episode_intra_class(ep, w, cfg, block=b)
                sim_rows.append(dict(episode=i, block=b, sim_before=before, sim_after=after,
                                     delta=after - before))
    D.write_csv(trace_rows, run.path("forgetting_trace.csv"))
    D.write_csv(sim_rows, run.path("intra_class.csv"))
    m = cfg.feature_size ** 2
    cost = D.cost_model(m, cfg.channels, cfg.state_size, cfg.alpha)
    D.write_csv([cost.as_row()], run.path("cost.csv"))
    summary = {"episodes": len(eps), "trace_rows": len(trace_rows),
               "mean_intra_class_delta": float(np.mean([r["delta"] for r in sim_rows])) if sim_rows else None,
               "cost": cost.as_row(),
               "attention_crossover_M": D.attention_crossover(cfg.channels, cfg.state_size, cfg.alpha)}
    D.write_json(summary, run.path("diagnostics.json"))
    print(f"{len(trace_rows)} trace rows, {len(sim_rows)} similarity rows in {args.out}")
    run.finish(extra={"summary": summary})
    return EXIT_OK


# parser -----------------------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{s} is not a positive integer")
    return v


def _seed(s):
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a u64")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring HmNetConfig / TrainConfig")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--alpha", type=_positive_int)
    common.add_argument("--blocks", type=_positive_int, help="number of SMB/HMB pairs")
    common.add_argument("--channels", type=_positive_int)
    common.add_argument("--state-size", type=_positive_int)
    common.add_argument("--profile", choices=("toy", "paper-shape"), default="toy")
    common.add_argument("--ablation", choices=sorted(ABLATIONS))
    common.add_argument("--recap", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--share", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--qim", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="episode directory used for validation / evaluation")
    data.add_argument("--val-count", type=int, default=200, help="novel-split episodes generated when --data is absent")
    data.add_argument("--fold", type=int, default=0)
    data.add_argument("--spec", help="JSON SyntheticEpisodeSpec overrides")

    p = argparse.ArgumentParser(prog="hmamba", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("episode-gen", parents=[common], help="generate synthetic episodes")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--split", choices=("train", "novel"), default="train")
    g.add_argument("--fold", type=int, default=0)
    g.add_argument("--spec", help="JSON SyntheticEpisodeSpec overrides")
    g.set_defaults(fn=cmd_episode_gen)

    s = sub.add_parser("scan-check", parents=[common], help="scan oracle and gradient suites")
    s.add_argument("--sizes", type=_positive_int, nargs="+", default=[1, 2, 17, 256, 4096])
    s.add_argument("--seeds", type=_positive_int, default=20)
    s.add_argument("--inject-fault", action="store_true", help="flip one sign in the parallel combine")
    s.add_argument("--skip-gradients", action="store_true")
    s.set_defaults(fn=cmd_scan_check)

    b = sub.add_parser("bench", parents=[common], help="scan / attention scaling benchmark")
    b.add_argument("--M", type=_positive_int, nargs="+")
    b.add_argument("--reps", type=_positive_int, default=3)
    b.add_argument("--attention-max", type=_positive_int, default=32768)
    b.set_defaults(fn=cmd_bench)

    t = sub.add_parser("train", parents=[common, data], help="episodic toy training")
    t.add_argument("--train-data")
    t.add_argument("--val-data")
    t.add_argument("--train-count", type=int, default=2000)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--eval-every", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common, data], help="mIoU / FB-IoU of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="debug: substitute ground truth for predictions")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("diagnose", parents=[common, data], help="forgetting trace, similarity probe, costs")
    d.add_argument("--checkpoint")
    d.set_defaults(fn=cmd_diagnose, val_count=8)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (UsageError, DomainError, E.EpisodeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, tf.TensorFileError) as exc:
        print(f"I/O error (run directory {args.out}): {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
