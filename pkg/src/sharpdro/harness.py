"""Experiment orchestration and result persistence.

Every CSV written here gets a ``<file>.manifest.json`` sidecar. Tables are
formatted with shortest round-trip float reprs so repeated runs produce
byte-identical files. Manifests carry wall-clock timestamps unless
``SOURCE_DATE_EPOCH`` is set.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, metrics, minimax
from .autodiff import ParameterVector
from .config import ExperimentConfig
from .datagen import CorruptedDataset, generate_synthetic, load_csv
from .errors import PreconditionError
from .methods import RunRecord, config_dict, train

METRIC_COLUMNS = RunRecord.CSV_COLUMNS
TRAJECTORY_COLUMNS = ("iteration", "L", "L_star", "grad_sq", "V", "violations")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SHARPDRO_WORKERS", "1")))
    except ValueError:
        return 1


def timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat(timespec="seconds")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_manifest(cfg: ExperimentConfig, command: str, seed=None, dataset_hash=None, **extra) -> dict:
    return {
        "tool": "sharpdro",
        "tool_version": __version__,
        "command": command,
        "config_hash": cfg.hash(),
        "seed": seed,
        "dataset_hash": dataset_hash,
        "started": timestamp(),
        **extra,
    }


def write_manifest(path, manifest: dict) -> Path:
    manifest = dict(manifest)
    manifest.setdefault("finished", timestamp())
    if Path(path).exists() and Path(path).suffix != ".json":
        manifest["file_sha256"] = sha256_file(path)
    side = Path(str(path) + ".manifest.json")
    side.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return side


def write_table(path, columns, rows, manifest: dict) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    write_manifest(path, manifest)
    return path


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def read_manifest(path) -> dict:
    return json.loads(Path(str(path) + ".manifest.json").read_text())


# --------------------------------------------------------------------------
# data


def build_data(cfg: ExperimentConfig, workers: int = 1):
    d = cfg["data"]
    dist, kind = cfg.severity_distribution(), cfg.corruption()
    if d["kind"] == "csv":
        return load_csv(d["csv_path"], d["label_column"], dist, kind, d["seed"],
                        d["test_fraction"], workers)
    return generate_synthetic(cfg.synthetic_spec(), dist, kind, d["seed"], workers)


def load_data_dir(path):
    path = Path(path)
    return CorruptedDataset.load(path / "train.npz"), CorruptedDataset.load(path / "test.npz")


def dataset_hash(train_data, test_data) -> str:
    return hashlib.sha256((train_data.content_hash() + test_data.content_hash()).encode()).hexdigest()


def generate(cfg: ExperimentConfig, out, workers: int = 1):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tr, te = build_data(cfg, workers)
    manifest = make_manifest(cfg, "generate", cfg["data"]["seed"], dataset_hash(tr, te))
    for name, ds in (("train", tr), ("test", te)):
        p = out / f"{name}.npz"
        ds.save(p)
        write_manifest(p, {**manifest, "content_hash": ds.content_hash()})
    return tr, te


# --------------------------------------------------------------------------
# training runs


def run_one(cfg: ExperimentConfig, data, method=None, seed=None, rho=None, score_log=None) -> RunRecord:
    tr, te = data
    model = cfg.model_spec(tr.dim, tr.num_classes)
    tc = cfg.train_config(method, seed, rho)
    record = train(model, tc, tr, te, score_log=score_log)
    record.manifest = make_manifest(cfg, "train", tc.seed, dataset_hash(tr, te),
                                    method=tc.method, train_config=config_dict(tc),
                                    status=record.status, diagnostic=record.diagnostic)
    return record


def fan_out(fn, items, workers: int = 1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def write_record(record: RunRecord, out, cfg: ExperimentConfig, score_log=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.csv", METRIC_COLUMNS, record.table(), record.manifest)
    loss_rows = [(record.method, record.seed, e + 1, v) for e, v in enumerate(record.train_loss)]
    write_table(out / "train_loss.csv", ("method", "seed", "epoch", "train_loss"), loss_rows,
                record.manifest)
    if record.theta is not None:
        p = out / "theta.npz"
        with open(p, "wb") as fh:
            np.savez(fh, values=record.theta.values, epoch=np.array(record.last_epoch))
        write_manifest(p, record.manifest)
    if score_log:
        bins = cfg["experiment"]["hist_bins"]
        G = cfg["data"]["max_severity"] + 1
        rows = []
        for epoch in sorted(score_log):
            sev, sc = score_log[epoch]
            h = metrics.ood_histogram(sc, sev, G, bins)
            for s in range(G):
                for b in range(bins):
                    rows.append((epoch, s, b, h["edges"][b], h["edges"][b + 1], h["counts"][s, b], h["means"][s]))
        write_table(out / "ood_hist.csv",
                    ("epoch", "severity", "bin", "lo", "hi", "count", "severity_mean"), rows, record.manifest)


def train_command(cfg: ExperimentConfig, out, data_dir=None, workers: int = 1) -> RunRecord:
    data = load_data_dir(data_dir) if data_dir else build_data(cfg, workers)
    score_log = {} if cfg["train"]["method"] == "SharpDROAgnostic" else None
    record = run_one(cfg, data, score_log=score_log)
    write_record(record, out, cfg, score_log)
    return record


def evaluate_command(cfg: ExperimentConfig, theta_path, out, data_dir=None, workers: int = 1):
    tr, te = load_data_dir(data_dir) if data_dir else build_data(cfg, workers)
    model = cfg.model_spec(tr.dim, tr.num_classes)
    with np.load(theta_path) as z:
        theta = ParameterVector(z["values"], model.layout())
        epoch = int(z["epoch"]) if "epoch" in z else -1
    rule = cfg.train_config(method="ERM").perturb
    m = metrics.evaluate(model, theta, te, rule)
    rows = [(cfg["train"]["method"], cfg["train"]["seed"], epoch, s, m["accuracy"][s], m["loss"][s],
             m["sharpness"][s], m["grad_norm"][s], float("nan")) for s in range(te.max_severity + 1)]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest(cfg, "evaluate", cfg["train"]["seed"], dataset_hash(tr, te),
                             theta_sha256=sha256_file(theta_path))
    write_table(out / "metrics.csv", METRIC_COLUMNS, rows, manifest)
    ex = cfg["experiment"]
    sl = metrics.loss_surface_slice(model, theta, te, ex["surface_radius"], ex["surface_resolution"],
                                    cfg["train"]["seed"])
    srows = [(s, i, j, sl.offsets[i], sl.offsets[j], sl.values[s, i, j])
             for s in range(sl.values.shape[0]) for i in range(len(sl.offsets)) for j in range(len(sl.offsets))]
    write_table(out / "surface.csv", ("severity", "i", "j", "a", "b", "loss"), srows,
                {**manifest, "surface_normalization": sl.normalization})
    return m, sl


def _sweep_method(cfg):
    m = cfg["train"]["method"]
    return m if m in ("SAM", "SharpDROAware", "SharpDROAgnostic") else "SharpDROAware"


def _final_accuracy(record: RunRecord, G: int):
    rows = record.rows_for(epoch=record.last_epoch)
    acc = np.full(G, np.nan)
    for r in rows:
        acc[r["severity"]] = r["accuracy"]
    return acc


def sweep_rho_command(cfg: ExperimentConfig, out, workers: int = 1):
    data = build_data(cfg, workers)
    method = _sweep_method(cfg)
    rhos, seeds = cfg["experiment"]["rhos"], cfg["experiment"]["seeds"]
    jobs = [(rho, seed) for rho in rhos for seed in seeds]
    records = fan_out(lambda j: run_one(cfg, data, method, j[1], j[0]), jobs, workers)
    G = data[0].max_severity + 1
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest(cfg, "sweep-rho", None, dataset_hash(*data), method=method, rhos=rhos, seeds=seeds)
    summary, long_rows = [], []
    for rho in rhos:
        accs = [_final_accuracy(r, G) for (jr, _), r in zip(jobs, records) if jr == rho]
        summary.append((rho, method, len(accs), *np.mean(accs, axis=0)))
    for (rho, _), r in zip(jobs, records):
        long_rows.extend((rho, *row) for row in r.table())
    write_table(out / "sweep.csv", ("rho", "method", "n_seeds", *[f"acc_s{s}" for s in range(G)]), summary, manifest)
    write_table(out / "sweep_runs.csv", ("rho", *METRIC_COLUMNS), long_rows, manifest)
    return summary


def compare_command(cfg: ExperimentConfig, out, workers: int = 1):
    data = build_data(cfg, workers)
    methods, seeds = cfg["experiment"]["methods"], cfg["experiment"]["seeds"]
    jobs = [(m, s) for m in methods for s in seeds]
    records = fan_out(lambda j: run_one(cfg, data, j[0], j[1]), jobs, workers)
    G = data[0].max_severity + 1
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest(cfg, "compare", None, dataset_hash(*data), methods=methods, seeds=seeds)
    table, long_rows = [], []
    for m in methods:
        accs = [_final_accuracy(r, G) for (jm, _), r in zip(jobs, records) if jm == m]
        table.append((m, *np.mean(accs, axis=0)))
    for r in records:
        long_rows.extend(r.table())
    write_table(out / "compare.csv", ("method", *[f"acc_s{s}" for s in range(G)]), table, manifest)
    write_table(out / "results.csv", METRIC_COLUMNS, long_rows, manifest)
    return table, records


# --------------------------------------------------------------------------
# minimax verification


def minimax_checks(cfg: ExperimentConfig, force: bool = False):
    """Run every appendix audit. Returns ``(rate_check, checks, descent_traj, descent_report)``."""
    problem = cfg.problem()
    m = cfg["minimax"]
    rates = cfg.rates()
    theta0 = np.array(m["theta0"]) if m["theta0"] is not None else minimax.default_theta0(problem.dim_theta)
    reach = float(np.abs(theta0).max()) + 1.0
    box = (-reach - 1.0, reach + 1.0)
    min_ls, _ = minimax.min_l_star(problem, box)
    rate_check = minimax.validate_rates(problem, rates, minimax.l_star(problem, theta0) - min_ls)
    if not rate_check.passed and not (force or m["force"]):
        return rate_check, None, None, None

    rng = np.random.default_rng([m["M"], 19])
    checks = []
    # gradient identity of the envelope
    worst = 0.0
    for _ in range(100):
        th = rng.normal(scale=2.0, size=problem.dim_theta)
        a = minimax.grad_l_star(problem, th)
        b = problem.grad_theta(th, minimax.omega_star(problem, th))
        worst = max(worst, float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)))))
    checks.append(("envelope_gradient_identity", worst <= 1e-12, worst, 1e-12))
    # best-response Lipschitz constant |A|/mu
    lip = problem.norm_A / problem.mu
    ratio = 0.0
    for _ in range(1000):
        t1, t2 = rng.normal(scale=2.0, size=(2, problem.dim_theta))
        num = np.linalg.norm(minimax.omega_star(problem, t1) - minimax.omega_star(problem, t2))
        ratio = max(ratio, float(num / np.linalg.norm(t1 - t2)))
    checks.append(("omega_star_lipschitz", ratio <= lip * (1 + 1e-12), ratio, lip))
    # second-moment bound on the perturbed stochastic gradient
    th = rng.normal(size=problem.dim_theta)
    om = rng.normal(size=problem.dim_omega)
    gb = minimax.check_gradient_bound(problem, rates, th, om, m["mc_samples"], seed=m["M"])
    checks.append(("perturbed_gradient_second_moment", gb.passed, gb.lhs, gb.rhs * 1.05 + 1e-9))
    # deterministic per-step descent
    from dataclasses import replace

    det = replace(problem, sigma=0.0)
    det_rates = replace(rates, T=m["descent_steps"])
    traj = minimax.run_sgda_sam(det, det_rates, 0, theta0)
    rep = minimax.check_descent(traj, det, det_rates)
    checks.append(("per_step_descent_violations", rep.num_violations == 0, rep.num_violations, 0))
    # ensemble rate bound
    trajs = [minimax.run_sgda_sam(problem, rates, s, theta0) for s in range(m["seeds"])]
    rb = minimax.check_rate_bound(trajs, problem, rates, min_ls, box)
    checks.append(("rate_bound", rb.passed, rb.lhs, rb.bound))
    return rate_check, checks, traj, rep


def minimax_command(cfg: ExperimentConfig, out, force: bool = False):
    rate_check, checks, traj, rep = minimax_checks(cfg, force)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest(cfg, "minimax-verify", None, None,
                             rate_violations=rate_check.violations)
    rate_rows = [(name, lhs, rhs, name not in rate_check.violations)
                 for name, (lhs, rhs) in rate_check.values.items()]
    write_table(out / "rate_constraints.csv", ("constraint", "value", "limit", "satisfied"), rate_rows, manifest)
    if checks is None:
        return rate_check, None
    viol = np.concatenate([[0], rep.violations.astype(np.int64)])
    write_table(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj.rows(viol), manifest)
    write_table(out / "checks.csv", ("check", "passed", "value", "threshold"), checks, manifest)
    return rate_check, checks


# --------------------------------------------------------------------------
# report


def report_command(inputs, out, force: bool = False):
    """Merge metric tables from several result directories into one CSV."""
    files = []
    for d in inputs:
        d = Path(d)
        for name in ("metrics.csv", "results.csv"):
            if (d / name).exists():
                files.append(d / name)
    if not files:
        raise PreconditionError("no metrics.csv or results.csv found in the given directories")
    manifests = [read_manifest(f) for f in files]
    versions = {m.get("tool_version") for m in manifests}
    if len(versions) > 1 and not force:
        raise PreconditionError(f"tool versions differ across inputs: {sorted(map(str, versions))}; "
                                "use --force to merge anyway")
    rows = []
    for f in files:
        header, body = read_table(f)
        if tuple(header) != METRIC_COLUMNS:
            raise PreconditionError(f"{f}: unexpected columns {header}")
        rows.extend(body)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "sharpdro", "tool_version": __version__, "command": "report",
                "inputs": [str(f) for f in files],
                "input_sha256": [sha256_file(f) for f in files],
                "input_config_hashes": [m.get("config_hash") for m in manifests],
                "started": timestamp()}
    with (out / "merged.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)
    write_manifest(out / "merged.csv", manifest)
    # final-epoch summary per method and severity
    summary = {}
    last = {}
    for r in rows:
        key = (r[0], r[1])
        last[key] = max(last.get(key, -1), int(r[2]))
    for r in rows:
        if int(r[2]) == last[(r[0], r[1])]:
            summary.setdefault((r[0], int(r[3])), []).append(float(r[4]))
    srows = [(m, s, float(np.mean(v)), float(np.std(v)), len(v)) for (m, s), v in sorted(summary.items())]
    write_table(out / "summary.csv", ("method", "severity", "mean_accuracy", "std_accuracy", "n_runs"),
                srows, manifest)
    return out / "merged.csv"
