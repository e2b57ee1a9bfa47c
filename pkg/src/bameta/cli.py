"""Command line entry point: ``bameta <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from .autodiff import NumericalError
from .baselines import conventional_learn, lmmse_ml_demod
from .channels import PAM4, QAM16, generate_frame, sample_state
from .config import EXPERIMENTS, PROFILES, ExperimentConfig, make_config, stream
from .experiments import (
    PLOT_KINDS,
    ExperimentError,
    Table,
    demod_meta_config,
    emit_plot_data,
    eq_active_config,
    reliability_table,
    run_eq_active_vs_passive,
    run_experiment,
)
from .io import CheckpointError, load_checkpoint, read_frames, save_checkpoint, write_frames
from .meta import ModeMismatchError, meta_test_eval, meta_train
from .metrics import calibration_report, mse, ser
from .models import model_for

log = logging.getLogger("bameta")

TASK_EXPERIMENT = {"demod": "demod_ser_vs_t", "eq": "eq_active_vs_passive"}
TASK_KIND = {"demod": QAM16, "eq": PAM4}


class UsageError(Exception):
    pass


def _config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


def _parse_sets(items: Optional[List[str]]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_config(task: str, profile: str, seed: int, path: Optional[str], sets=None) -> ExperimentConfig:
    overrides = {}
    if path:
        with open(path) as fh:
            overrides.update(json.load(fh))
    overrides.update(sets or {})
    experiment = overrides.pop("experiment", TASK_EXPERIMENT[task])
    try:
        return make_config(experiment, profile, seed, overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _task_of_frames(frames) -> str:
    kinds = {f.kind for f in frames}
    if len(kinds) != 1:
        raise UsageError("frame file mixes constellations")
    return "demod" if kinds.pop() == QAM16 else "eq"


def _generate(task: str, n: int, n_tr: int, n_te: int, snr: float, seed: int, tag: str) -> list:
    kind = TASK_KIND[task]
    frames = []
    for i in range(n):
        r = stream(seed, tag, i)
        frames.append(generate_frame(sample_state(kind, r), n_tr, n_te, snr, r))
    return frames


def _frames_arg(spec: str) -> list:
    """A JSON-lines frame file, or a JSON generator config."""
    if spec.endswith(".jsonl"):
        return read_frames(spec)
    with open(spec) as fh:
        g = json.load(fh)
    if not isinstance(g, dict) or "task" not in g:
        raise UsageError(f"{spec}: expected a .jsonl frame file or a generator config with a 'task' key")
    task = g["task"]
    cfg = make_config(TASK_EXPERIMENT[task], g.get("profile", "desk"))
    return _generate(
        task, int(g.get("frames", cfg.meta_test_frames)), int(g.get("n_tr", cfg.n_star_tr)),
        int(g.get("n_te", cfg.n_star_te)), 10 ** (float(g.get("snr_db", cfg.snr_db)) / 10),
        int(g.get("seed", 0)), "meta-test-frame",
    )


# subcommands


def cmd_simulate(args) -> int:
    cfg = _load_config(args.task, args.profile, args.seed, args.config)
    n_tr = cfg.n_tr if args.n_tr is None else args.n_tr
    n_te = cfg.n_te if args.n_te is None else args.n_te
    snr_db = cfg.snr_db if args.snr_db is None else args.snr_db
    frames = _generate(args.task, args.frames, n_tr, n_te, 10 ** (snr_db / 10), args.seed, args.tag)
    n = write_frames(frames, args.out)
    log.info("wrote %d frames to %s", n, args.out)
    return 0


def cmd_meta_train(args) -> int:
    if args.frames:
        frames = read_frames(args.frames)
        task = _task_of_frames(frames)
    else:
        task = args.task
        frames = None
    cfg = _load_config(task, args.profile, args.seed, args.config, _parse_sets(args.set))
    if frames is None:
        frames = _generate(task, args.t, cfg.n_tr, cfg.n_te, cfg.snr, args.seed, "meta-train-frame")
    if task == "demod":
        mcfg = demod_meta_config(cfg, args.mode, args.seed)
    else:
        mcfg = replace(eq_active_config(cfg, "passive").meta, mode=args.mode, seed=args.seed,
                       I_meta=cfg.I_meta if cfg.I_meta is not None else len(frames))
    model = model_for(TASK_KIND[task], cfg.beta or 150.0)
    hyper, trace = meta_train(frames, mcfg, model, None, stream(args.seed, f"meta-train-{args.mode}", len(frames)))
    save_checkpoint(hyper, args.out, args.seed, _config_hash(cfg))
    if trace.losses:
        log.info("meta-loss %.4f -> %.4f over %d updates", trace.losses[0], trace.losses[-1], len(trace))
    return 0


def cmd_meta_test(args) -> int:
    frames = _frames_arg(args.frames)
    task = _task_of_frames(frames)
    cfg = _load_config(task, args.profile, args.seed, args.config, _parse_sets(args.set))
    model = model_for(TASK_KIND[task], cfg.beta or 150.0)
    mode = args.mode
    if mode in ("lmmse", "conventional"):
        if task != "demod" and mode == "lmmse":
            raise UsageError("the LMMSE receiver is defined for demodulation only")
        rows = _baseline_rows(frames, mode, cfg, model, args.seed)
    else:
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for mode {mode or 'freq/bayes'}")
        hyper = load_checkpoint(args.checkpoint)
        mode = mode or hyper.mode
        if task == "demod":
            mcfg = demod_meta_config(cfg, mode, args.seed)
        else:
            mcfg = replace(eq_active_config(cfg, "passive").meta, mode=mode, seed=args.seed)
        mcfg = replace(mcfg, n_tr=min(mcfg.n_tr, min(f.n_train for f in frames)))
        preds = meta_test_eval(hyper, frames, mcfg, model, stream(args.seed, f"meta-test-{mode}", 0))
        rows = []
        for p in preds:
            for k in range(len(p.truth)):
                if task == "demod":
                    rows.append([p.frame_id, k, int(p.truth[k]), int(p.pred[k]), float(p.confidence[k])])
                else:
                    rows.append([p.frame_id, k, float(p.truth[k]), float(p.pred_mean[k])])
    header = (["frame_id", "sample_id", "truth_idx", "pred_idx", "confidence"] if task == "demod"
              else ["frame_id", "sample_id", "truth", "pred_mean"])
    _write_text(args.out, Table(header, rows).to_csv())
    return 0


def _baseline_rows(frames, mode, cfg, model, seed) -> list:
    rows = []
    for j, f in enumerate(frames):
        if mode == "lmmse":
            pred, conf, _ = lmmse_ml_demod(f.y_train, f.x_train, f.y_test, cfg.snr)
        else:
            prm = conventional_learn(f, model, cfg.eta, cfg.I_star, stream(seed, "conventional", j))
            out = model.predict(prm.theta, f.y_test)[0]
            if f.kind == PAM4:
                truth = f.targets("test")
                rows.extend([j, k, float(truth[k]), float(out[k])] for k in range(f.n_test))
                continue
            pred, conf = out.argmax(-1), out.max(-1)
        rows.extend([j, k, int(f.x_test[k]), int(pred[k]), float(conf[k])] for k in range(f.n_test))
    return rows


def cmd_active(args) -> int:
    overrides = {"budget": args.budget, "t_init": args.tinit, "seeds": args.seeds, "modes": [args.mode]}
    overrides.update(_parse_sets(args.set))
    cfg = _load_config("eq", args.profile, args.seed, args.config, overrides)
    art = run_eq_active_vs_passive(cfg, args.workers)
    os.makedirs(args.out, exist_ok=True)
    hist = {str(seed): h.to_dict() for (mode, seed), h in sorted(art.extras["histories"].items())}
    _write_text(os.path.join(args.out, "history.json"),
                json.dumps({"config": cfg.to_dict(), "mode": args.mode, "seeds": hist}, indent=2, sort_keys=True) + "\n")
    summary = Table(["round", "mse_mean", "mse_std"])
    for mode, t, _, m, s in art.tables["aggregate"].rows:
        summary.rows.append([t, m, s])
    _write_text(os.path.join(args.out, "summary.csv"), summary.to_csv())
    return 0


def cmd_report(args) -> int:
    with open(args.predictions, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{args.predictions} has no rows")
    os.makedirs(args.out, exist_ok=True)
    if "confidence" in rows[0]:
        truth = np.array([int(r["truth_idx"]) for r in rows])
        pred = np.array([int(r["pred_idx"]) for r in rows])
        conf = np.array([float(r["confidence"]) for r in rows])
        rep = calibration_report(conf, pred == truth, args.bins)
        _write_text(os.path.join(args.out, "reliability.csv"), reliability_table(rep).to_csv())
        summary = {"ser": ser(pred, truth), "ece": rep.ece, "n": rep.n, "bins": rep.M}
    elif "pred_mean" in rows[0]:
        truth = np.array([float(r["truth"]) for r in rows])
        pm = np.array([float(r["pred_mean"]) for r in rows])
        summary = {"mse": mse(pm, truth), "n": len(rows)}
    else:
        raise UsageError("prediction CSV needs either a confidence or a pred_mean column")
    _write_text(os.path.join(args.out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    sets = _parse_sets(args.set)
    if args.config:
        with open(args.config) as fh:
            file_ov = json.load(fh)
        file_ov.update(sets)
        sets = file_ov
    try:
        cfg = make_config(args.experiment, args.profile, args.seed, sets)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if args.print_config:
        print(cfg.to_json())
        return 0
    art = run_experiment(cfg, args.workers)
    paths = art.write(args.out)
    for kind in args.plot or []:
        paths += emit_plot_data(art, kind, os.path.join(args.out, "plots"))
    for p in paths:
        log.info("wrote %s", p)
    print(json.dumps(art.summary, indent=2, sort_keys=True))
    return 0


def _write_text(path: str, text: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bameta", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, task=True):
        if task:
            p.add_argument("--task", choices=sorted(TASK_KIND), default="demod")
        p.add_argument("--profile", choices=PROFILES, default="desk")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file of parameter overrides (symbol names such as eta, kappa, I_meta)")

    p = sub.add_parser("simulate", help="write generated frames as JSON lines")
    common(p)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--n-tr", type=int)
    p.add_argument("--n-te", type=int)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--tag", default="meta-train-frame", help="random stream tag")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("meta-train", help="meta-train a prior or initialization")
    common(p)
    p.add_argument("--mode", choices=("freq", "bayes"), default="bayes")
    p.add_argument("--frames", help="JSON-lines frame file (default: generate --t frames)")
    p.add_argument("--t", type=int, default=16)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("meta-test", help="adapt to test frames and write per-symbol predictions")
    common(p, task=False)
    p.add_argument("--checkpoint")
    p.add_argument("--frames", required=True, help=".jsonl frame file or JSON generator config")
    p.add_argument("--mode", choices=("freq", "bayes", "conventional", "lmmse"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_meta_test)

    p = sub.add_parser("active", help="active or passive frame acquisition for the equalizer")
    common(p, task=False)
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--tinit", type=int, default=3)
    p.add_argument("--mode", choices=("active", "passive"), default="active")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_active)

    p = sub.add_parser("report", help="reliability data and summary metrics from a prediction CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("run", help="run a full experiment pipeline")
    p.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    p.add_argument("--profile", choices=PROFILES, default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="append", choices=PLOT_KINDS)
    p.add_argument("--out", default="results")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        ap.error(str(exc))
    except (ExperimentError, NumericalError, ModeMismatchError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
