"""``pmdp`` command line: train, eval, verify and gradcheck.

Exit codes: 0 when every requested output was written, 2 for a bad
invocation, config or checkpoint, 3 for a numeric abort during training.
A gradcheck above tolerance is reported as FAIL but still exits 0.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluation as E
from . import model as mdl
from . import schedule as S
from . import verify as V

log = logging.getLogger("pmdp")

LOSS_HEADER = ["step", "L_rec", "L_dis", "L_spar", "L_cons", "L_reg", "beta1", "beta2", "beta3"]
CHECKPOINT = "model.pmdp"


class UsageError(Exception):
    pass


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def load_config(path: str | None) -> dict:
    if path is None:
        return C.defaults()
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return C.load(path)


def max_workers(n: int) -> int:
    raw = os.environ.get("PMDP_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"PMDP_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, cap))


def run_seeds(fn, jobs: list[tuple]) -> list:
    """Run ``fn(*job)`` for every job, in worker processes when PMDP_THREADS > 1."""
    workers = max_workers(len(jobs))
    if workers == 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def seed_dirs(out: Path, seeds: list[int] | None) -> list[tuple[int | None, Path]]:
    if seeds is None:
        return [(None, out)]
    return [(s, out / f"seed_{s}") for s in seeds]


# ------------------------------------------------------------------ train

def _train_one(cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(C.dump(cfg))
    tcfg = C.build_train_config(cfg)
    dataset = C.build_dataset(cfg)
    status = "ok"
    try:
        res = S.train(tcfg, dataset, checkpoint=out / CHECKPOINT)
        rows = [[h["step"], h["rec"], h["dis"], h["spar"], h["cons"], h["reg"],
                 h["beta1"], h["beta2"], h["beta3"]] for h in res.history]
        write_csv(out / "loss.csv", LOSS_HEADER, rows)
    except S.TrainingAborted as exc:
        status = f"aborted at step {exc.step}: {exc}"
        mdl.save_checkpoint(out / "abort_snapshot.pmdp", exc.snapshot["params"])
    return {"seed": cfg["seed"], "dir": str(out), "status": status}


def write_manifest(out: Path, cfg: dict, seeds, runs: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": {k: v for k, v in sorted(cfg.items())}, "config_hash": C.content_hash(cfg),
                "seeds": seeds, "out": str(out), "runs": runs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)
    jobs = [(C.with_seed(cfg, s) if s is not None else cfg, d) for s, d in seed_dirs(out, seeds)]
    for job_cfg, _ in jobs:  # fail fast on config errors before any training
        C.build_train_config(job_cfg)
        C.build_dataset(job_cfg)
    runs = run_seeds(_train_one, jobs)
    write_manifest(out, cfg, seeds if seeds is not None else [cfg["seed"]], runs)
    failed = [r for r in runs if r["status"] != "ok"]
    for r in runs:
        print(f"seed {r['seed']}: {r['status']} -> {r['dir']}")
    return 3 if failed else 0


# ------------------------------------------------------------------ eval

def _checkpoints(args, seeds) -> list[tuple[int | None, Path]]:
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    base = Path(args.checkpoint)
    if seeds is None:
        path = base / CHECKPOINT if base.is_dir() else base
        return [(None, path)]
    return [(s, base / f"seed_{s}" / CHECKPOINT) for s in seeds]


def _read_checkpoint(path: Path, cfg: dict) -> mdl.Params:
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params = mdl.load_checkpoint(path)
        got = mdl.config_from_params(params)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"unreadable checkpoint {path}: {exc}") from None
    want = (cfg["dataset.ambient_dim"], cfg["d"], cfg["k"])
    have = (got.input_dim, got.latent_dim, got.num_subspaces)
    if have != want:
        raise UsageError(f"checkpoint {path} has (N, d, k) = {have}, config expects {want}")
    return params


def _eval_one(cfg: dict, path: Path, out: Path) -> dict:
    params = _read_checkpoint(path, cfg)
    dataset = C.build_dataset(cfg)
    report, ev = E.evaluate(params, dataset, n=cfg["eval.samples"], seed=cfg["seed"],
                            bins=cfg["eval.bins"], levels=cfg["eval.levels"])
    scores = report.scores()
    scores["oracle_agreement"] = E.oracle_agreement(params, dataset, seed=cfg["seed"])
    scores["collapse_ratio"] = E.collapse_ratio(report.activity)
    scores["active_subspaces"] = float(E.active_subspaces(report.activity).sum())
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "report.csv", ["metric", "value"], scores.items())
    write_csv(out / "activity.csv", ["subspace", "avg_std"], enumerate(report.activity))
    F = ev.values.shape[1]
    k, d = ev.codes.shape[1:]
    header = [f"factor_{f}" for f in range(F)] + [f"s{i}_{j}" for i in range(k) for j in range(d)]
    write_csv(out / "codes.csv", header,
              np.concatenate([ev.values, ev.codes.reshape(len(ev.codes), -1)], axis=1).tolist())
    return {"scores": scores, "activity": report.activity.tolist()}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)
    pairs = _checkpoints(args, seeds)
    for _, path in pairs:  # validate everything before the slow part
        _read_checkpoint(path, C.with_seed(cfg, 0))
    jobs = [((C.with_seed(cfg, s) if s is not None else cfg), path, d)
            for (s, path), (_, d) in zip(pairs, seed_dirs(out, seeds))]
    results = run_seeds(_eval_one, jobs)
    if seeds is not None:
        names = list(results[0]["scores"])
        cols = [f"seed_{s}" for s in seeds] + ["median"]
        rows = []
        for name in names:
            vals = [r["scores"][name] for r in results]
            rows.append([name, *vals, float(np.median(vals))])
        write_csv(out / "report.csv", ["metric", *cols], rows)
        acts = np.array([r["activity"] for r in results])
        write_csv(out / "activity.csv", ["subspace", *cols],
                  [[i, *acts[:, i], float(np.median(acts[:, i]))] for i in range(acts.shape[1])])
    for s, r in zip(seeds or [None], results):
        label = "" if s is None else f"seed {s}: "
        print(label + " ".join(f"{k}={v:.4g}" for k, v in r["scores"].items()))
    return 0


# ------------------------------------------------------------------ verify

def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if args.mode == "spar":
        seeds = parse_seeds(args.seeds) or list(range(cfg["verify.seeds"]))
        runs = V.spar_seed_sweep(seeds, k=cfg["verify.k"], d=cfg["verify.d"], steps=cfg["verify.steps"])
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "spar_trace.csv", ["seed", "step", "overlap", "L_spar"],
                  [[s, *t] for s, r in zip(seeds, runs) for t in r.trace])
        write_csv(out / "spar_final.csv", ["seed", "overlap", "L_spar"],
                  [[s, r.final_overlap, r.final_spar] for s, r in zip(seeds, runs)])
        for s, r in zip(seeds, runs):
            print(f"seed {s}: final overlap {r.final_overlap:.4g}, L_spar {r.final_spar:.3g}")
        return 0
    if args.mode == "def2":
        seeds = parse_seeds(args.seeds)
        rows = []
        for s, path in _checkpoints(args, seeds):
            run_cfg = C.with_seed(cfg, s) if s is not None else cfg
            params = _read_checkpoint(path, run_cfg)
            res = V.check_definition2(params, C.build_dataset(run_cfg), num_pairs=cfg["def2.pairs"],
                                      threshold=cfg["def2.threshold"], seed=run_cfg["seed"])
            rows.append([run_cfg["seed"], res.hit_rate, res.leak_rate])
            print(f"seed {run_cfg['seed']}: hit-rate {res.hit_rate:.4f} leak-rate {res.leak_rate:.4f}")
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "def2.csv", ["seed", "hit_rate", "leak_rate"], rows)
        return 0
    raise UsageError(f"unknown verify mode {args.mode!r} (expected spar or def2)")


# ------------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    tol = 1e-4
    floored = V.gradient_suite(cfg["seed"], h=args.h)
    strict = V.gradient_suite(cfg["seed"], h=args.h, noise_floor=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "gradcheck.csv", ["loss", "max_rel_error", "max_rel_error_no_noise_floor"],
              [[k, floored[k], strict[k]] for k in floored])
    for k in floored:
        verdict = "ok" if floored[k] < tol else "FAIL"
        print(f"{k:6s} {floored[k]:.3e} (without noise floor {strict[k]:.3e}) {verdict}")
    return 0


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmdp", description="Product-manifold disentanglement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, seeds=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", default="runs/out", help="output directory")
        if seeds:
            sp.add_argument("--seeds", help="comma-separated seeds; one subdirectory per seed")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint file, or a train output directory")

    common(sub.add_parser("train", help="train a model"))
    common(sub.add_parser("eval", help="compute disentanglement metrics"), checkpoint=True)
    v = sub.add_parser("verify", help="sparsity-structure or subspace-locality (def2) checks")
    common(v, checkpoint=True)
    v.add_argument("--mode", required=True, help="spar or def2")
    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    common(g, seeds=False)
    g.add_argument("--h", type=float, default=1e-5)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "verify": cmd_verify, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except C.ConfigError as exc:
        print(f"error: bad config {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
