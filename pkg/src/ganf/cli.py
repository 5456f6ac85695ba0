"""Command-line surface: synthesize data, train, score, evaluate, export
graphs, and benchmark scaling.

Every command echoes its fully resolved configuration into the output
directory so runs are reproducible from the echo plus the seed. Exit codes:
0 success, 1 runtime/numeric failure, 2 usage/config error. The env var
``GANF_THREADS`` caps the worker count used for batch scoring.
"""
from __future__ import annotations

import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import data as dat
from . import metrics as met
from .dag import threshold_dag
from .model import GanfModel
from .tensor import GradientTape, NumericError
from .training import (Adam, CheckpointError, TrainConfig, TrainingAbort,
                       checkpoint_load, checkpoint_save, clip_gradients,
                       train, write_history)


def _worker_count() -> int:
    raw = os.environ.get("GANF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise click.UsageError(f"GANF_THREADS must be an integer, got {raw!r}")


def _echo_config(out_dir: Path, config: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise click.UsageError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"{what} file {path} is not valid JSON: {exc}")


def _fail(exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Density estimation and anomaly detection for multiple time series."""


# ------------------------------------------------------------------- synth

@main.command("synth")
@click.option("--spec", "spec_path", required=True, type=click.Path(), help="SynthSpec JSON file.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--length", default=10000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synth(spec_path, out_dir, length, seed):
    """Generate a synthetic dataset: series CSV, labels CSV, ground-truth graph."""
    spec_dict = _load_json(spec_path, "spec")
    try:
        spec = dat.SynthSpec(**spec_dict)
    except TypeError as exc:
        raise click.UsageError(f"bad spec field: {exc}")
    out = Path(out_dir)
    try:
        series, a_true = dat.synth_generate(spec, length, seed)
        _, starts = dat.make_windows(series, spec.window_len, spec.stride)
        series, labels = dat.inject_series_anomalies(series, starts, spec, seed + 1)
    except dat.DataError as exc:
        raise click.UsageError(str(exc))
    out.mkdir(parents=True, exist_ok=True)
    dat.write_series_csv(out / "series.csv", series)
    dat.write_labels_csv(out / "labels.csv", starts, labels)
    n = spec.n_series
    with open(out / "graph.json", "w") as fh:
        json.dump({
            "n": n,
            "edges": [{"parent": j, "child": i, "weight": a_true[i, j]}
                      for i in range(n) for j in range(n) if a_true[i, j] != 0.0],
            "adjacency": a_true.tolist(),
        }, fh, indent=2)
    manifest = {"command": "synth", "seed": seed, "length": length, "spec": spec_dict}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    _echo_config(out, manifest)
    click.echo(f"wrote series.csv, labels.csv, graph.json, manifest.json to {out}")


# ------------------------------------------------------------------- train

_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["graph", "no-graph", "full-chain"]), default=None)
@click.option("--window-len", type=int, default=None)
@click.option("--stride", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_train(config_path, mode, window_len, stride, seed, out_dir):
    """Train on a CSV dataset; writes checkpoint, history, resolved config."""
    cfg = _load_json(config_path, "config")
    for key, val in (("mode", mode), ("window_len", window_len),
                     ("stride", stride), ("seed", seed)):
        if val is not None:
            cfg[key] = val
    data_csv = cfg.get("data_csv")
    if not data_csv:
        raise click.UsageError("config is missing required field 'data_csv'")
    if not os.path.exists(data_csv):
        raise click.UsageError(f"--config data_csv path does not exist: {data_csv}")
    window_cfg = {
        "window_len": int(cfg.get("window_len", 20)),
        "stride": int(cfg.get("stride", cfg.get("window_len", 20))),
        "train_frac": float(cfg.get("train_frac", 0.6)),
        "val_frac": float(cfg.get("val_frac", 0.2)),
        "gap_limit": int(cfg.get("gap_limit", 5)),
    }
    try:
        train_cfg = TrainConfig(**{k: v for k, v in cfg.items() if k in _TRAIN_KEYS})
    except (ValueError, TypeError) as exc:
        raise click.UsageError(f"bad training config: {exc}")
    out = Path(out_dir)
    _echo_config(out, {**cfg, **window_cfg, "command": "train"})
    try:
        series, entities, _ = dat.load_csv(data_csv, gap_limit=window_cfg["gap_limit"])
        windows, starts = dat.make_windows(series, window_cfg["window_len"],
                                           window_cfg["stride"])
        split = dat.normalize(dat.split_windows(
            windows, starts, window_cfg["train_frac"], window_cfg["val_frac"]))
        model, adjacency, history = train(split.train, split.validation, train_cfg)
    except dat.DataError as exc:
        raise click.UsageError(str(exc))
    except (NumericError, TrainingAbort) as exc:
        _fail(exc)
    checkpoint_save(out / "checkpoint.ganf", model, extra={
        "entities": entities, **window_cfg,
        "norm_mean": split.stats.mean.tolist(), "norm_std": split.stats.std.tolist(),
    })
    write_history(out / "history.jsonl", history)
    final = history[-1]
    if final.get("warning"):
        click.echo(f"warning: {final['warning']}")
    click.echo(f"final |h(A)| = {abs(final['h']):.3e}; "
               f"checkpoint and history written to {out}")


# ------------------------------------------------------------------- score

def _score_parallel(model: GanfModel, windows: np.ndarray,
                    workers: int) -> tuple[np.ndarray, np.ndarray]:
    if workers <= 1 or windows.shape[0] < 2 * workers:
        return model.score_windows(windows)
    bounds = np.linspace(0, windows.shape[0], workers + 1, dtype=int)
    totals = np.empty(windows.shape[0])
    per_series = None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [(lo, hi, pool.submit(model.score_windows, windows[lo:hi]))
                   for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        for lo, hi, fut in futures:
            t, p = fut.result()
            if per_series is None:
                per_series = np.empty((windows.shape[0], p.shape[1]))
            totals[lo:hi] = t
            per_series[lo:hi] = p
    return totals, per_series


@main.command("score")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_csv", required=True, type=click.Path())
@click.option("--window-len", type=int, default=None)
@click.option("--stride", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_score(ckpt_path, data_csv, window_len, stride, out_dir):
    """Score every window of a dataset with a trained checkpoint."""
    if not os.path.exists(ckpt_path):
        raise click.UsageError(f"--checkpoint path does not exist: {ckpt_path}")
    if not os.path.exists(data_csv):
        raise click.UsageError(f"--data path does not exist: {data_csv}")
    try:
        model = checkpoint_load(ckpt_path)
    except CheckpointError as exc:
        _fail(exc)
    extra = _checkpoint_extra(ckpt_path)
    window_len = window_len or int(extra.get("window_len", 20))
    stride = stride or 1
    out = Path(out_dir)
    _echo_config(out, {"command": "score", "checkpoint": str(ckpt_path),
                       "data_csv": str(data_csv), "window_len": window_len,
                       "stride": stride, "workers": _worker_count()})
    try:
        series, entities, _ = dat.load_csv(data_csv)
        if len(entities) != model.n_series or series.shape[2] != model.input_dim:
            raise CheckpointError(
                f"checkpoint adjacency 'A' is {model.n_series}x{model.n_series} with "
                f"D={model.input_dim}, but data has n={len(entities)}, D={series.shape[2]}")
        mean = np.asarray(extra.get("norm_mean")) if extra.get("norm_mean") else None
        if mean is not None:
            std = np.asarray(extra["norm_std"])
            series = (series - mean[:, None, :]) / std[:, None, :]
        windows, starts = dat.make_windows(series, window_len, stride)
        totals, per_series = _score_parallel(model, windows, _worker_count())
    except dat.DataError as exc:
        raise click.UsageError(str(exc))
    except (NumericError, CheckpointError) as exc:
        _fail(exc)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start", "score"]
                        + [f"series_{i}" for i in range(per_series.shape[1])])
        for s, tot, row in zip(starts, totals, per_series):
            writer.writerow([int(s), repr(float(tot))] + [repr(float(v)) for v in row])
    click.echo(f"wrote {len(starts)} rows to {out / 'scores.csv'}")


def _checkpoint_extra(path) -> dict:
    import struct
    with open(path, "rb") as fh:
        fh.read(8)
        _, blob_len = struct.unpack("<II", fh.read(8))
        return json.loads(fh.read(blob_len)).get("extra", {})


def read_scores_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    starts, scores, per_series = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if not row:
                continue
            starts.append(int(row[0]))
            scores.append(float(row[1]))
            per_series.append([float(v) for v in row[2:]])
    return np.asarray(starts), np.asarray(scores), np.asarray(per_series)


# -------------------------------------------------------------------- eval

@main.command("eval")
@click.option("--scores", "scores_path", required=True, type=click.Path())
@click.option("--labels", "labels_path", required=True, type=click.Path())
@click.option("--smooth/--hard", default=False,
              help="Smooth anomaly starts into probabilistic labels.")
@click.option("--sigma", default=6.0, show_default=True)
@click.option("--bins", default=50, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_eval(scores_path, labels_path, smooth, sigma, bins, out_dir):
    """Compute ROC/AUC and a score histogram from scores + labels CSVs."""
    for p, flag in ((scores_path, "--scores"), (labels_path, "--labels")):
        if not os.path.exists(p):
            raise click.UsageError(f"{flag} path does not exist: {p}")
    out = Path(out_dir)
    _echo_config(out, {"command": "eval", "scores": str(scores_path),
                       "labels": str(labels_path), "smooth": smooth,
                       "sigma": sigma, "bins": bins})
    try:
        starts, scores, _ = read_scores_csv(scores_path)
        label_starts, labels = dat.read_labels_csv(labels_path)
    except dat.DataError as exc:
        raise click.UsageError(str(exc))
    if smooth:
        anomaly_starts = label_starts[labels > 0]
        probs = met.smooth_labels(starts, anomaly_starts, sigma=sigma)
    else:
        by_start = dict(zip(label_starts.tolist(), labels.tolist()))
        missing = [s for s in starts.tolist() if s not in by_start]
        if missing:
            raise click.UsageError(
                f"labels file covers {len(label_starts)} windows but scores have "
                f"{len(starts)}; first unmatched window_start: {missing[0]}")
        probs = np.asarray([by_start[s] for s in starts.tolist()])
    try:
        roc = met.roc_auc(scores, probs)
    except met.UndefinedAucError as exc:
        _fail(exc)
    counts, edges = met.density_histogram(scores, bins=bins)
    met.write_histogram_csv(out / "histogram.csv", counts, edges)
    report = {
        "auc": roc.auc, "n_windows": len(scores),
        "positive_mass": float(np.sum(probs)),
        "curve": {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist()},
        "histogram": str(out / "histogram.csv"),
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=2)
    click.echo(f"AUC = {roc.auc:.4f}; metrics.json written to {out}")


# ----------------------------------------------------------- export-graph

@main.command("export-graph")
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path())
@click.option("--epsilon", default=0.01, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_export_graph(checkpoints, epsilon, out_dir):
    """Threshold adjacency matrices into edge lists (JSON + DOT).

    With several checkpoints, additionally writes an edge-weight matrix CSV
    with one row per checkpoint, for drift inspection over shifted windows.
    """
    for p in checkpoints:
        if not os.path.exists(p):
            raise click.UsageError(f"checkpoint path does not exist: {p}")
    out = Path(out_dir)
    _echo_config(out, {"command": "export-graph", "epsilon": epsilon,
                       "checkpoints": [str(p) for p in checkpoints]})
    all_edges: list[set] = []
    matrices = []
    try:
        for k, path in enumerate(checkpoints):
            model = checkpoint_load(path)
            a = model.adjacency.data
            edges, acyclic = threshold_dag(a, epsilon)
            stem = f"graph_{k}" if len(checkpoints) > 1 else "graph"
            with open(out / f"{stem}.json", "w") as fh:
                json.dump({"checkpoint": str(path), "epsilon": epsilon,
                           "acyclic": acyclic,
                           "edges": [{"parent": j, "child": i, "weight": w}
                                     for j, i, w in edges]}, fh, indent=2)
            with open(out / f"{stem}.dot", "w") as fh:
                fh.write("digraph dag {\n")
                for j, i, w in edges:
                    fh.write(f'  n{j} -> n{i} [label="{w:.3f}"];\n')
                fh.write("}\n")
            all_edges.append({(j, i) for j, i, _ in edges})
            matrices.append(a)
    except CheckpointError as exc:
        _fail(exc)
    if len(checkpoints) > 1:
        union = sorted(set().union(*all_edges))
        with open(out / "edge_weights.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["checkpoint"] + [f"{j}->{i}" for j, i in union])
            for k, a in enumerate(matrices):
                writer.writerow([k] + [repr(float(a[i, j])) for j, i in union])
    click.echo(f"exported {len(checkpoints)} graph(s) to {out}")


# -------------------------------------------------------------------- bench

@main.command("bench")
@click.option("--grid", default="8,20;8,40;16,20", show_default=True,
              help="Semicolon-separated n,T cells.")
@click.option("--batch", default=8, show_default=True)
@click.option("--attrs", default=1, show_default=True)
@click.option("--hidden", default=8, show_default=True)
@click.option("--iters", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_bench(grid, batch, attrs, hidden, iters, seed, out_dir):
    """Wall time per training iteration over an (n, T) grid at fixed B and D."""
    try:
        cells = [tuple(int(v) for v in cell.split(",")) for cell in grid.split(";") if cell]
        if any(len(c) != 2 for c in cells):
            raise ValueError
    except ValueError:
        raise click.UsageError(f"--grid must look like 'n,T;n,T', got {grid!r}")
    out = Path(out_dir)
    _echo_config(out, {"command": "bench", "grid": grid, "batch": batch,
                       "attrs": attrs, "hidden": hidden, "iters": iters, "seed": seed})
    rows = []
    for n, t_len in cells:
        rows.append((n, t_len, bench_iteration(n, t_len, batch, attrs, hidden,
                                               iters, seed)))
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "T", "seconds_per_iter"])
        for n, t_len, secs in rows:
            writer.writerow([n, t_len, repr(secs)])
    for n, t_len, secs in rows:
        click.echo(f"n={n:4d} T={t_len:4d}  {secs * 1e3:8.2f} ms/iter")


def bench_iteration(n: int, t_len: int, batch: int, attrs: int, hidden: int,
                    iters: int, seed: int) -> float:
    """Median wall time of one forward+backward+update training iteration."""
    rng = np.random.default_rng(seed)
    model = GanfModel(n_series=n, input_dim=attrs, hidden_dim=hidden,
                      flow_blocks=2, flow_hidden=hidden, mode="graph", seed=seed)
    x = rng.normal(size=(batch, n, t_len, attrs))
    params = model.parameters()
    opt = Adam()
    times = []
    for _ in range(iters + 1):
        for p in params.values():
            p.zero_grad()
        start = time.perf_counter()
        tape = GradientTape()
        with tape:
            loss = model.batch_nll(x)
        tape.backward(loss)
        clip_gradients(params, 1.0)
        opt.step(params, 1e-3)
        model.remask_diagonal()
        times.append(time.perf_counter() - start)
    return float(np.median(times[1:]))  # drop warm-up
