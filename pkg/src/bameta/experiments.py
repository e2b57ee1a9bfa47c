"""End-to-end experiment pipelines and their CSV/JSON artifacts.

Every stochastic step draws from ``config.stream(seed, tag, index)``, and all
rows are sorted before they are written, so a rerun with the same config and
seed reproduces the files byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .active import ActiveConfig, active_loop, grid_points, polar_grid, score_many
from .baselines import conventional_learn, lmmse_ml_demod
from .channels import generate_frame, sample_demod_state, sample_eq_state
from .config import ExperimentConfig, stream
from .meta import MetaTrainConfig, meta_test_eval, meta_train
from .metrics import calibration_report, ser
from .models import Demodulator, Equalizer


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


def fmt(v) -> str:
    """Stable text form for CSV cells."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Table:
    header: List[str]
    rows: List[list] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for r in self.rows:
            w.writerow([fmt(v) for v in r])
        return buf.getvalue()


@dataclass
class RunArtifact:
    config: ExperimentConfig
    tables: Dict[str, Table] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # in-memory only (reports, posteriors)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.config.to_json().encode())
        for name in sorted(self.tables):
            h.update(name.encode())
            h.update(self.tables[name].to_csv().encode())
        return h.hexdigest()

    def write(self, out_dir: str) -> list:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name in sorted(self.tables):
            p = os.path.join(out_dir, f"{name}.csv")
            with open(p, "w", newline="") as fh:
                fh.write(self.tables[name].to_csv())
            paths.append(p)
        meta = {"config": self.config.to_dict(), "content_hash": self.content_hash, "summary": self.summary}
        p = os.path.join(out_dir, "summary.json")
        with open(p, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
        return paths


def _stage(name: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except ExperimentError:
        raise
    except Exception as exc:  # named stage for the caller
        raise ExperimentError(name, exc) from exc


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _mean_std(vals) -> tuple:
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


# demodulation


def demod_meta_config(cfg: ExperimentConfig, mode: str, seed: int) -> MetaTrainConfig:
    return MetaTrainConfig(
        mode=mode, B=cfg.B, I=cfg.I, eta=cfg.eta, kappa=cfg.kappa,
        R=cfg.R_train or cfg.R, R_test=cfg.R, kl_coeff=cfg.kl_coeff,
        I_meta=cfg.I_meta if cfg.I_meta is not None else 0, seed=seed,
        n_tr=cfg.n_tr, n_te=cfg.n_te_meta, I_star=cfg.I_star, n_star_tr=cfg.n_star_tr,
        first_order=cfg.first_order, meta_optimizer=cfg.meta_optimizer,
        nu_init_std=cfg.nu_init_std, rho_init=cfg.rho_init,
    )


def demod_frames(cfg: ExperimentConfig, seed: int, t: int) -> tuple:
    """Meta-training frames (nested in t) and the shared meta-test frames of one seed."""
    train = []
    for i in range(t):
        r = stream(seed, "meta-train-frame", i)
        train.append(generate_frame(sample_demod_state(r), cfg.n_tr, cfg.n_te, cfg.snr, r))
    test = []
    for j in range(cfg.meta_test_frames):
        r = stream(seed, "meta-test-frame", j)
        test.append(generate_frame(sample_demod_state(r), cfg.n_star_tr, cfg.n_star_te, cfg.snr, r))
    return train, test


def _demod_scores(preds) -> tuple:
    pred = np.concatenate([p.pred for p in preds])
    truth = np.concatenate([p.truth for p in preds])
    conf = np.concatenate([p.confidence for p in preds])
    return pred, truth, conf


def _demod_seed(args) -> list:
    """All (mode, t) results of one seed: ``[(mode, t, ser, ece, report), ...]``."""
    cfg, seed = args
    model = Demodulator()
    out = []
    _, test = _stage("simulate", demod_frames, cfg, seed, 0)
    for t in sorted(cfg.t_grid):
        train, _ = _stage("simulate", demod_frames, replace(cfg, meta_test_frames=0), seed, t)
        for mode in sorted(m for m in cfg.modes if m in ("freq", "bayes")):
            mcfg = demod_meta_config(cfg, mode, seed)
            hyper, _ = _stage(f"meta-train/{mode}/t={t}", meta_train, train, mcfg, model, None,
                              stream(seed, f"meta-train-{mode}", t))
            preds = _stage(f"meta-test/{mode}/t={t}", meta_test_eval, hyper, test, mcfg, model,
                           stream(seed, f"meta-test-{mode}", t))
            pred, truth, conf = _demod_scores(preds)
            rep = calibration_report(conf, pred == truth, cfg.M_bins)
            out.append((mode, t, ser(pred, truth), rep.ece, rep))
    for mode in sorted(m for m in cfg.modes if m in ("lmmse", "conventional")):
        preds, truths, confs = [], [], []
        for j, f in enumerate(test):
            if mode == "lmmse":
                p, c, _ = _stage("baseline/lmmse", lmmse_ml_demod, f.y_train, f.x_train, f.y_test, cfg.snr)
            else:
                prm = _stage("baseline/conventional", conventional_learn, f, model, cfg.eta, cfg.I_star,
                             stream(seed, "conventional", j))
                probs = model.predict(prm.theta, f.y_test)[0]
                p, c = probs.argmax(-1), probs.max(-1)
            preds.append(p)
            truths.append(f.x_test)
            confs.append(c)
        pred, truth, conf = np.concatenate(preds), np.concatenate(truths), np.concatenate(confs)
        rep = calibration_report(conf, pred == truth, cfg.M_bins)
        for t in sorted(cfg.t_grid):
            out.append((mode, t, ser(pred, truth), rep.ece, rep))
    return out


def run_demod(cfg: ExperimentConfig, workers: int = 1) -> RunArtifact:
    seeds = list(range(cfg.master_seed, cfg.master_seed + cfg.seeds))
    results = _map(_demod_seed, [(cfg, s) for s in seeds], workers)
    per_seed = Table(["mode", "t", "seed", "ser", "ece"])
    agg = Table(["mode", "t", "n_seeds", "ser_mean", "ser_std", "ece_mean", "ece_std"])
    rel = Table(["mode", "t", "seed", "bin", "bin_lo", "bin_hi", "count", "acc", "conf", "frequency"])
    reports = {}
    grouped: Dict[tuple, list] = {}
    for seed, res in zip(seeds, results):
        for mode, t, s, e, rep in res:
            per_seed.rows.append([mode, t, seed, s, e])
            grouped.setdefault((mode, t), []).append((s, e))
            reports[(mode, t, seed)] = rep
            edges = rep.edges
            for m in range(rep.M):
                rel.rows.append([mode, t, seed, m + 1, edges[m], edges[m + 1], int(rep.bin_counts[m]),
                                 rep.bin_acc[m], rep.bin_conf[m], rep.frequency[m]])
    per_seed.rows.sort(key=lambda r: (r[0], r[1], r[2]))
    rel.rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    summary = {}
    for (mode, t) in sorted(grouped):
        v = grouped[(mode, t)]
        sm, ss = _mean_std([a for a, _ in v])
        em, es = _mean_std([b for _, b in v])
        agg.rows.append([mode, t, len(v), sm, ss, em, es])
        summary[f"{mode}/t={t}"] = {"ser": sm, "ece": em}
    tables = {"per_seed": per_seed, "aggregate": agg, "reliability": rel}
    return RunArtifact(cfg, tables, summary, {"reports": reports})


# equalization


def eq_active_config(cfg: ExperimentConfig, mode: str) -> ActiveConfig:
    meta = MetaTrainConfig(
        mode="bayes", B=cfg.B, I=cfg.I, eta=cfg.eta, kappa=cfg.kappa, R=cfg.R_train or cfg.R,
        R_test=cfg.R, kl_coeff=cfg.kl_coeff, I_meta=0, n_tr=cfg.n_tr, I_star=cfg.I_star,
        n_star_tr=cfg.n_star_tr, first_order=cfg.first_order, meta_optimizer=cfg.meta_optimizer,
        nu_init_std=cfg.nu_init_std, rho_init=cfg.rho_init,
    )
    return ActiveConfig(
        mode=mode, budget=cfg.budget, t_init=cfg.t_init, snr=cfg.snr, n_tr=cfg.n_tr, n_te=cfg.n_te,
        n_star_tr=cfg.n_star_tr, n_star_te=cfg.n_star_te, n_test_frames=cfg.meta_test_frames,
        beta=cfg.beta, meta=meta, meta_iters=cfg.I_meta,
    )


def eq_test_frames(cfg: ExperimentConfig, seed: int) -> list:
    out = []
    for j in range(cfg.meta_test_frames):
        r = stream(seed, "meta-test-frame", j)
        out.append(generate_frame(sample_eq_state(r), cfg.n_star_tr, cfg.n_star_te, cfg.snr, r))
    return out


def _eq_seed(args) -> list:
    cfg, seed = args
    test = _stage("simulate", eq_test_frames, cfg, seed)
    out = []
    for mode in sorted(cfg.modes):
        acfg = eq_active_config(cfg, mode)
        _, hist = _stage(f"active-loop/{mode}", active_loop, acfg, seed, test)
        out.append((mode, hist))
    return out


def run_eq_active_vs_passive(cfg: ExperimentConfig, workers: int = 1) -> RunArtifact:
    seeds = list(range(cfg.master_seed, cfg.master_seed + cfg.seeds))
    results = _map(_eq_seed, [(cfg, s) for s in seeds], workers)
    per_seed = Table(["mode", "t", "seed", "mse"])
    agg = Table(["mode", "t", "n_seeds", "mse_mean", "mse_std"])
    acq = Table(["mode", "seed", "t", "c0", "c1", "phi0", "phi1", "score"])
    grouped: Dict[tuple, list] = {}
    histories = {}
    for seed, res in zip(seeds, results):
        for mode, hist in res:
            histories[(mode, seed)] = hist
            for t, v in hist.mse_by_t.items():
                per_seed.rows.append([mode, t, seed, v])
                grouped.setdefault((mode, t), []).append(v)
            for r in hist.rounds:
                phi = r.phi or (None, None)
                acq.rows.append([mode, seed, r.t, r.c[0], r.c[1], phi[0], phi[1], r.score])
    per_seed.rows.sort(key=lambda r: (r[0], r[1], r[2]))
    acq.rows.sort(key=lambda r: (r[0], r[1], r[2]))
    summary = {}
    for mode, t in sorted(grouped):
        m, s = _mean_std(grouped[(mode, t)])
        agg.rows.append([mode, t, len(grouped[(mode, t)]), m, s])
        summary[f"{mode}/t={t}"] = {"mse": m}
    return RunArtifact(cfg, {"per_seed": per_seed, "aggregate": agg, "acquisitions": acq}, summary,
                       {"histories": histories})


def run_eq_scoring_map(cfg: ExperimentConfig, workers: int = 1, rounds=(4, 5)) -> RunArtifact:
    """Scoring function over the polar grid after ``t`` frames, for each t in ``rounds``."""
    seed = cfg.master_seed
    acfg = replace(eq_active_config(cfg, "active"), budget=max(max(rounds) + 1, cfg.t_init))
    captured = {}

    def grab(t, hyper, posts, sel):
        if t in rounds:
            captured[t] = (posts, sel)

    _stage("active-loop/active", active_loop, acfg, seed, None, None, grab)
    radii, angles = polar_grid(acfg.n_radius, acfg.n_angle)
    pts = grid_points(radii, angles)
    grid = Table(["t", "radius_idx", "angle_idx", "phi0", "phi1", "score"])
    marks = Table(["t", "kind", "phi0", "phi1", "score"])
    summary = {}
    for t in sorted(captured):
        posts, sel = captured[t]
        s = score_many(pts, posts)
        for k, (p, v) in enumerate(zip(pts, s)):
            ri, ai = divmod(k, acfg.n_angle)
            grid.rows.append([t, ri, ai, p[0], p[1], v])
        for p in posts:
            marks.rows.append([t, "posterior_mean", p.nu[0], p.nu[1], float(score_many(p.nu[None], posts)[0])])
        marks.rows.append([t, "selected", sel.phi[0], sel.phi[1], sel.score])
        summary[f"t={t}"] = {"selected": [float(sel.phi[0]), float(sel.phi[1])], "score": sel.score}
    return RunArtifact(cfg, {"scoring_map": grid, "markers": marks}, summary, {"captured": captured})


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunArtifact:
    if cfg.experiment.startswith("demod"):
        return run_demod(cfg, workers)
    if cfg.experiment == "eq_active_vs_passive":
        return run_eq_active_vs_passive(cfg, workers)
    if cfg.experiment == "eq_scoring_map":
        return run_eq_scoring_map(cfg, workers)
    raise ValueError(f"unknown experiment {cfg.experiment!r}")


# plot data


PLOT_KINDS = ("reliability", "scoring_map", "curves")


def reliability_table(rep) -> Table:
    tab = Table(["bin", "bin_lo", "bin_hi", "count", "acc", "conf", "frequency"])
    e = rep.edges
    for m in range(rep.M):
        tab.rows.append([m + 1, e[m], e[m + 1], int(rep.bin_counts[m]), rep.bin_acc[m], rep.bin_conf[m],
                         rep.frequency[m]])
    return tab


def emit_plot_data(artifact: RunArtifact, kind: str, out_dir: str) -> list:
    """Flat CSVs ready for an external plotting tool."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if kind == "reliability":
        reports = artifact.extras.get("reports")
        if not reports:
            raise ValueError("artifact has no calibration reports")
        pooled: Dict[tuple, list] = {}
        for (mode, t, seed), rep in reports.items():
            pooled.setdefault((mode, t), []).append(rep)
        for (mode, t) in sorted(pooled):
            reps = pooled[(mode, t)]
            tab = reliability_table(_pool_reports(reps))
            p = os.path.join(out_dir, f"reliability_{mode}_t{t}.csv")
            with open(p, "w", newline="") as fh:
                fh.write(tab.to_csv())
            written.append(p)
    elif kind == "scoring_map":
        if "scoring_map" not in artifact.tables:
            raise ValueError("artifact has no scoring map")
        for name in ("scoring_map", "markers"):
            p = os.path.join(out_dir, f"{name}.csv")
            with open(p, "w", newline="") as fh:
                fh.write(artifact.tables[name].to_csv())
            written.append(p)
    else:
        p = os.path.join(out_dir, "curves.csv")
        with open(p, "w", newline="") as fh:
            fh.write(artifact.tables["aggregate"].to_csv())
        written.append(p)
    return written


def _pool_reports(reps):
    """Reliability statistics of the union of the underlying samples."""
    from .metrics import CalibrationReport

    M = reps[0].M
    counts = sum(r.bin_counts for r in reps)
    acc_sum = sum(r.bin_acc * r.bin_counts for r in reps)
    conf_sum = sum(r.bin_conf * r.bin_counts for r in reps)
    safe = np.maximum(counts, 1)
    acc = np.where(counts > 0, acc_sum / safe, 0.0)
    conf = np.where(counts > 0, conf_sum / safe, 0.0)
    n = int(counts.sum())
    ece = float(np.sum(counts * np.abs(acc - conf)) / n) if n else 0.0
    return CalibrationReport(M, counts, acc, conf, ece, n)
