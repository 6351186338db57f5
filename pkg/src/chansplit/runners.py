"""Scenario runners: train one model per (seed, training setting), sweep the test channel, emit rows.

Each runner returns a :class:`RunResult`; :func:`emit_results` writes it as a
results table plus a JSON manifest. Column schema of the results table::

    scenario,dataset,seed,train_setting,eval_setting,device,branch,mse,repeats,wall_ms

``eval_setting`` is the x value of the sweep (test erasure probability or
non-deep-fade SNR in dB). ``device`` is 0 for single-device scenarios and
1..C otherwise. ``wall_ms`` is 0 unless ``record_timing`` is set, which keeps
repeated runs byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import data as data_mod
from .channel import ChannelConfig
from .config import ExperimentConfig
from .optim import TrainConfig, evaluate, train, train_het
from .splitmodel import build_het_model, build_split_model, save_model, select_mode

logger = logging.getLogger(__name__)

COLUMNS = ("scenario", "dataset", "seed", "train_setting", "eval_setting", "device", "branch", "mse",
           "repeats", "wall_ms")
MODE_COLUMNS = ("seed", "train_setting", "eval_setting", "server_val_mse", "ee_val_mse", "mode")


@dataclass
class ResultRow:
    scenario: str
    dataset: str
    seed: int
    train_setting: str
    eval_setting: str
    device: int
    branch: str
    mse: float
    repeats: int
    wall_ms: int = 0


@dataclass
class RunResult:
    scenario: str
    rows: List[ResultRow] = field(default_factory=list)
    reports: List[dict] = field(default_factory=list)
    modes: List[dict] = field(default_factory=list)


@dataclass
class _Job:
    """One training run plus its evaluation sweep; picklable for worker pools."""

    cfg: ExperimentConfig
    dataset: data_mod.SeriesDataset
    seed: int
    index: int
    label: str
    M: int
    train_channel: ChannelConfig
    sweep: List[tuple]  # (x value, ChannelConfig)
    lam: Optional[float] = None


SCENARIO_INFO = {
    "erasure": "test MSE vs symbol erasure probability p, one curve per training erasure probability p_tr",
    "compression": "test MSE vs p for representation lengths M (compression rate N/M) at fixed p_tr",
    "awgn2": "test MSE vs SNR1 on the two-state AWGN channel, one curve per training SNR1 and per M1",
    "early_exit": "early-exit and server MSE per loss weight lambda, with server-side mode decisions",
    "heterogeneous": "per-device test MSE vs p for edge devices of different depth sharing one server",
}


def load_dataset(cfg: ExperimentConfig) -> data_mod.SeriesDataset:
    if cfg.dataset == "csv":
        raw = data_mod.load_csv(cfg.csv_path, cfg.csv_column, cfg.csv_delimiter)
        name = os.path.splitext(os.path.basename(cfg.csv_path))[0]
        source = {"csv": cfg.csv_path, "column": cfg.csv_column}
    else:
        raw = data_mod.synth_series(cfg.synth_kind, cfg.synth_length, seed=cfg.synth_seed)
        name = f"synth-{cfg.synth_kind}-{cfg.synth_length}"
        source = {"synth": cfg.synth_kind, "length": cfg.synth_length, "seed": cfg.synth_seed}
    return data_mod.split(raw, cfg.split, N=cfg.window, name=name,
                          val_from_train=cfg.val_from_train if len(cfg.split) == 2 else 0.0,
                          source=source)


def train_config(cfg: ExperimentConfig, channel: ChannelConfig, seed: int, lam: Optional[float] = None) -> TrainConfig:
    return TrainConfig(
        channel=channel, lam=cfg.lam if lam is None else lam, seed=seed, batch_size=cfg.batch_size,
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, max_epochs=cfg.max_epochs,
        patience=cfg.patience, clip_norm=cfg.clip_norm,
    )


def _init_rng(seed: int) -> np.random.Generator:
    # same initial weights for every training setting of a seed: curves are paired
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def _eval_rng(seed: int, index: int, point: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, index, point)))


def _mse_out(cfg: ExperimentConfig, ds: data_mod.SeriesDataset, mse: float) -> float:
    return ds.scaler.mse_to_raw(mse) if cfg.report_domain == "raw" else mse


def _report_dict(cfg: ExperimentConfig, label: str, report) -> dict:
    d = report.to_dict()
    if not cfg.record_timing:
        d.pop("wall_time")
    return {"train_setting": label, **d}


def _setting_label(label: str, report) -> str:
    if report.diverged_epoch is not None:
        return f"{label};diverged@epoch={report.diverged_epoch}"
    return label


def _checkpoint(cfg: ExperimentConfig, job: _Job, model, report) -> None:
    if not cfg.save_checkpoints:
        return
    d = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(d, exist_ok=True)
    stem = f"{cfg.scenario}_seed{job.seed}_{job.label.replace(';', '_').replace('=', '')}"
    save_model(model, os.path.join(d, stem + ".npz"), meta={"train_setting": job.label})
    with open(os.path.join(d, stem + ".json"), "w") as fh:
        json.dump(_report_dict(cfg, job.label, report), fh, indent=2, sort_keys=True)


def _run_single(job: _Job) -> RunResult:
    cfg, ds = job.cfg, job.dataset
    early = job.lam is not None
    model = build_split_model(job.M, cfg.edge_layers, cfg.server_layers, early_exit=early,
                              channel=job.train_channel, seed=_init_rng(job.seed))
    report = train(model, ds, train_config(cfg, job.train_channel, job.seed, job.lam))
    _checkpoint(cfg, job, model, report)
    label = _setting_label(job.label, report)
    out = RunResult(cfg.scenario, reports=[_report_dict(cfg, job.label, report)])
    ee_test = ee_val = None
    if early:
        ee_test = evaluate(model, ds.test, ChannelConfig.none(), branch="early_exit")
        ee_val = evaluate(model, ds.val, ChannelConfig.none(), branch="early_exit")
    for k, (x, ch) in enumerate(job.sweep):
        t0 = time.perf_counter()
        mse = evaluate(model, ds.test, ch, _eval_rng(job.seed, job.index, k), cfg.repeats)
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_timing else 0
        common = dict(scenario=cfg.scenario, dataset=ds.name, seed=job.seed, train_setting=label,
                      eval_setting=f"{x:g}", device=0, repeats=cfg.repeats, wall_ms=wall)
        out.rows.append(ResultRow(branch="server", mse=_mse_out(cfg, ds, mse), **common))
        if early:
            out.rows.append(ResultRow(branch="early_exit", mse=_mse_out(cfg, ds, ee_test),
                                      **{**common, "repeats": 1}))
            has_val = ds.counts[1] > 0
            server_val = evaluate(model, ds.val, ch, _eval_rng(job.seed, job.index, 10_000 + k),
                                  cfg.repeats) if has_val else mse
            ee_ref = ee_val if has_val else ee_test
            out.modes.append({
                "seed": job.seed, "train_setting": label, "eval_setting": f"{x:g}",
                "server_val_mse": server_val, "ee_val_mse": ee_ref,
                "mode": select_mode(server_val, ee_ref, cfg.mode_threshold),
            })
    return out


def _run_het(job: _Job) -> RunResult:
    cfg, ds = job.cfg, job.dataset
    C = len(cfg.het_edge_layers)
    het = build_het_model(job.M, cfg.het_edge_layers, cfg.server_layers, channel=job.train_channel,
                          seed=_init_rng(job.seed))
    Xtr, ytr = ds.train
    parts = data_mod.device_partition(ytr.size, C, block=cfg.batch_size)
    device_sets = [((Xtr[idx], ytr[idx]), ds.val) for idx in parts]
    report = train_het(het, device_sets, train_config(cfg, job.train_channel, job.seed))
    _checkpoint(cfg, job, het, report)
    label = _setting_label(job.label, report)
    out = RunResult(cfg.scenario, reports=[_report_dict(cfg, job.label, report)])
    for k, (x, ch) in enumerate(job.sweep):
        for dev in range(C):
            t0 = time.perf_counter()
            mse = evaluate(het, ds.test, ch, _eval_rng(job.seed, job.index, k * C + dev), cfg.repeats,
                           device=dev)
            wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_timing else 0
            out.rows.append(ResultRow(cfg.scenario, ds.name, job.seed, label, f"{x:g}", dev + 1,
                                      "server", _mse_out(cfg, ds, mse), cfg.repeats, wall))
    return out


def _execute(jobs: Sequence[_Job], fn: Callable[[_Job], RunResult], workers: int, scenario: str) -> RunResult:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, jobs))
    else:
        parts = []
        for j in jobs:
            logger.info("%s: seed %d, %s", scenario, j.seed, j.label)
            parts.append(fn(j))
    merged = RunResult(scenario)
    # collected in job order: a single writer keeps output ordering stable
    for part in parts:
        merged.rows += part.rows
        merged.reports += part.reports
        merged.modes += part.modes
    return merged


def _erasure_sweep(cfg: ExperimentConfig) -> List[tuple]:
    return [(p, ChannelConfig.erasure(p)) for p in cfg.p_grid]


def _jobs(cfg, ds, settings) -> List[_Job]:
    """``settings``: list of (label, M, train channel, sweep, lam)."""
    jobs = []
    for seed in cfg.seeds:
        for i, (label, M, ch, sweep, lam) in enumerate(settings):
            jobs.append(_Job(cfg, ds, seed, i, label, M, ch, sweep, lam))
    return jobs


def run_erasure(cfg: ExperimentConfig, dataset: Optional[data_mod.SeriesDataset] = None) -> RunResult:
    """One model per training erasure probability; ``p_tr=0`` is the channel-agnostic baseline."""
    ds = dataset or load_dataset(cfg)
    sweep = _erasure_sweep(cfg)
    settings = [(f"p_tr={p:g}", cfg.M, ChannelConfig.erasure(p), sweep, None) for p in cfg.p_tr_grid]
    return _execute(_jobs(cfg, ds, settings), _run_single, cfg.workers, cfg.scenario)


def compression_rate(N: int, M: int) -> float:
    return N / M


def run_compression(cfg: ExperimentConfig, dataset: Optional[data_mod.SeriesDataset] = None) -> RunResult:
    ds = dataset or load_dataset(cfg)
    sweep = _erasure_sweep(cfg)
    settings = [
        (f"p_tr={p:g};M={M};CR={compression_rate(cfg.window, M):g}", M, ChannelConfig.erasure(p), sweep, None)
        for p in cfg.p_tr_grid
        for M in cfg.m_grid
    ]
    return _execute(_jobs(cfg, ds, settings), _run_single, cfg.workers, cfg.scenario)


def _awgn_sweep(cfg: ExperimentConfig, m1: int) -> List[tuple]:
    return [(s, ChannelConfig.awgn2(s, m1, cfg.M - m1, fade_offset_db=cfg.fade_offset_db)) for s in cfg.snr_grid]


def run_awgn(cfg: ExperimentConfig, dataset: Optional[data_mod.SeriesDataset] = None) -> RunResult:
    """Baseline, one model per training SNR1 (M1 fixed), then one per M1 at the sweep SNR."""
    ds = dataset or load_dataset(cfg)
    settings, seen = [("none", cfg.M, ChannelConfig.none(), _awgn_sweep(cfg, cfg.m1), None)], {"none"}

    def add(snr: float, m1: int):
        ch = ChannelConfig.awgn2(snr, m1, cfg.M - m1, fade_offset_db=cfg.fade_offset_db)
        label = ch.label()
        if label not in seen:
            seen.add(label)
            settings.append((label, cfg.M, ch, _awgn_sweep(cfg, m1), None))

    for snr in cfg.snr_train_grid:
        add(snr, cfg.m1)
    for m1 in cfg.m1_grid:
        add(cfg.m1_sweep_snr, m1)
    return _execute(_jobs(cfg, ds, settings), _run_single, cfg.workers, cfg.scenario)


def run_early_exit(cfg: ExperimentConfig, dataset: Optional[data_mod.SeriesDataset] = None) -> RunResult:
    ds = dataset or load_dataset(cfg)
    sweep = _erasure_sweep(cfg)
    settings = [
        (f"p_tr={p:g};lambda={lam:g}", cfg.M, ChannelConfig.erasure(p), sweep, lam)
        for p in cfg.p_tr_grid
        for lam in cfg.lam_grid
    ]
    return _execute(_jobs(cfg, ds, settings), _run_single, cfg.workers, cfg.scenario)


def run_heterogeneous(cfg: ExperimentConfig, dataset: Optional[data_mod.SeriesDataset] = None) -> RunResult:
    ds = dataset or load_dataset(cfg)
    sweep = _erasure_sweep(cfg)
    layers = "/".join(str(n) for n in cfg.het_edge_layers)
    settings = [(f"p_tr={p:g};edge_layers={layers}", cfg.M, ChannelConfig.erasure(p), sweep, None)
                for p in cfg.p_tr_grid]
    return _execute(_jobs(cfg, ds, settings), _run_het, cfg.workers, cfg.scenario)


RUNNERS: Dict[str, Callable[..., RunResult]] = {
    "erasure": run_erasure,
    "compression": run_compression,
    "awgn2": run_awgn,
    "early_exit": run_early_exit,
    "heterogeneous": run_heterogeneous,
}


def run(cfg: ExperimentConfig, dataset: Optional[data_mod.SeriesDataset] = None) -> RunResult:
    return RUNNERS[cfg.scenario](cfg, dataset)


# ---- output ----------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r.scenario, r.dataset, r.seed, r.train_setting, r.eval_setting, r.device, r.branch,
                    repr(float(r.mse)), r.repeats, r.wall_ms])
    return buf.getvalue()


def read_results(path) -> List[ResultRow]:
    """Parse a results CSV written by :func:`emit_results` back into rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for rec in reader:
            d = dict(zip(COLUMNS, rec))
            out.append(ResultRow(d["scenario"], d["dataset"], int(d["seed"]), d["train_setting"],
                                 d["eval_setting"], int(d["device"]), d["branch"], float(d["mse"]),
                                 int(d["repeats"]), int(d["wall_ms"])))
    return out


def emit_results(result: RunResult, out_dir: str, fmt: str = "csv", cfg: Optional[ExperimentConfig] = None) -> List[str]:
    """Write the results table, the manifest and (early exit) the mode table; return written paths."""
    if not result.rows:
        raise ValueError("no result rows to write")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir!r}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir!r} is not writable")
    scen = result.scenario
    written = []
    if fmt == "csv":
        path = os.path.join(out_dir, f"{scen}.csv")
        _atomic_write(path, rows_to_csv(result.rows))
    elif fmt == "json":
        path = os.path.join(out_dir, f"{scen}.json")
        _atomic_write(path, json.dumps({"columns": list(COLUMNS), "rows": [asdict(r) for r in result.rows]},
                                       indent=1) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    written.append(path)
    if result.modes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MODE_COLUMNS)
        for m in result.modes:
            w.writerow([m["seed"], m["train_setting"], m["eval_setting"], repr(float(m["server_val_mse"])),
                        repr(float(m["ee_val_mse"])), m["mode"]])
        mpath = os.path.join(out_dir, f"{scen}_modes.csv")
        _atomic_write(mpath, buf.getvalue())
        written.append(mpath)
    manifest = {
        "scenario": scen,
        "software": {"package": "chansplit", "version": __version__, "numpy": np.__version__},
        "columns": list(COLUMNS),
        "rows": len(result.rows),
        "train_reports": result.reports,
    }
    if cfg is not None:
        manifest.update({"config_sha256": cfg.digest(), "seeds": list(cfg.seeds), "config": cfg.to_dict()})
    mpath = os.path.join(out_dir, f"{scen}_manifest.json")
    _atomic_write(mpath, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(mpath)
    return written
