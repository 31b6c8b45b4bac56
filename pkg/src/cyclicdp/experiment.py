"""Turns an ExperimentConfig into data, training jobs, and files on disk."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_synth as ds
from .config import ExperimentConfig, dump
from .dp_optimizer import DpSgdConfig
from .eval_metrics import ReportRow, average_rows, format_table, report_json, summarize_run
from .federation import Site, TrainingPlan, atomic_write, checkpoint_bytes, train
from .nn_core import ArchitectureSpec
from .rdp_accountant import PrivacyBudget

logger = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: list[ds.SiteDataset]
    test: list[ds.SiteDataset]
    selected_columns: list[int] | None = None


def _site_specs(cfg_sites, d, random_shift, rng, prefix):
    specs = []
    for i, s in enumerate(cfg_sites):
        shift = np.broadcast_to(np.asarray(s.feature_shift, dtype=np.float64), (d,)).copy()
        if random_shift > 0:
            shift = shift + random_shift * rng.standard_normal(d)
        specs.append(ds.SiteDataSpec(
            n=s.n, feature_shift=shift, label_bias=s.label_bias,
            positive_fraction_hint=s.positive_fraction_hint,
            site_id=s.id or f"{prefix}{i + 1}",
        ))
    return specs


def prepare_data(cfg: ExperimentConfig, seed: int) -> PreparedData:
    """Generate or load the sites for one repeat, then split and preprocess.

    Normalisation bounds and top-variance columns come from the pooled
    training sites only, and are reused for the test sites.
    """
    data = cfg.data
    split_seq = np.random.SeedSequence([seed, 2])
    if data.synthetic is not None:
        syn = data.synthetic
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        w = rng.standard_normal(syn.d)
        w *= syn.signal / np.linalg.norm(w)
        train_specs = _site_specs(syn.train_sites, syn.d, syn.random_shift, rng, "train")
        test_specs = _site_specs(syn.test_sites, syn.d, syn.random_shift, rng, "test")
        sites = ds.generate_multisite(syn.d, w, train_specs + test_specs, seed)
        train, test = sites[: len(train_specs)], sites[len(train_specs):]
    else:
        train = ds.load_csv(data.csv.train, data.csv.label_column, data.csv.site_column)
        test = (ds.load_csv(data.csv.test, data.csv.label_column, data.csv.site_column)
                if data.csv.test else [])
    if not test:
        children = split_seq.spawn(len(train))
        pairs = [ds.train_test_split(t, data.test_fraction, c) for t, c in zip(train, children)]
        train = [p[0] for p in pairs]
        test = [p[1] for p in pairs]
    selected = None
    if data.normalize:
        bounds = ds.column_bounds(train)
        train = [ds.min_max_normalize(t, bounds)[0] for t in train]
        test = [ds.min_max_normalize(t, bounds)[0] for t in test]
    if data.top_k is not None:
        selected, train = ds.top_variance_features(train, data.top_k)
        test = [ds.SiteDataset(t.features[:, selected], t.labels, t.site_id, t.provenance) for t in test]
    return PreparedData(train, test, selected)


@dataclass(frozen=True)
class Job:
    mode: str
    n_sites: int
    repeat: int

    @property
    def seed(self) -> int:
        return self.repeat  # offset added to the config seed

    @property
    def tag(self) -> str:
        return f"{self.mode}_n{self.n_sites}_r{self.repeat}"


@dataclass
class JobResult:
    job: Job
    row: ReportRow
    trace: list[dict]
    ledgers: list[dict]
    checkpoints: dict[str, bytes] = field(default_factory=dict)
    wall_time: float = 0.0


def site_counts(cfg: ExperimentConfig, n_train: int) -> list[int]:
    counts = cfg.site_counts or list(range(1, n_train + 1))
    if max(counts) > n_train:
        raise ValueError(f"site_counts exceed the {n_train} available training sites")
    return sorted(set(counts))


def make_plan(cfg: ExperimentConfig, mode: str, seed: int, n_features: int) -> TrainingPlan:
    dp = DpSgdConfig(cfg.dp.noise_multiplier, cfg.dp.batch_size, cfg.dp.learning_rate,
                     cfg.clip_norm, cfg.dp.sampling)
    arch = ArchitectureSpec((n_features, *cfg.model.hidden, 1), cfg.model.activation)
    return TrainingPlan(mode, cfg.epochs, dp, arch, master_seed=seed,
                        convergence_tol=cfg.convergence_tol, postcheck=cfg.fidelity_postcheck)


def run_job(cfg: ExperimentConfig, job: Job, data: PreparedData | None = None) -> JobResult:
    seed = cfg.seed + job.seed
    if data is None:
        data = prepare_data(cfg, seed)
    plan = make_plan(cfg, job.mode, seed, data.train[0].n_features)
    budget = PrivacyBudget(cfg.budget.epsilon, cfg.budget.delta)
    sites = [Site.create(t, budget, plan.dp) for t in data.train[: job.n_sites]]
    t0 = time.perf_counter()
    record = train(sites, plan)
    row = summarize_run(record, data.test)
    ckpts = {"final.ckpt": checkpoint_bytes(record.params)}
    if cfg.save_epoch_checkpoints:
        for e, p in enumerate(record.epoch_params, start=1):
            ckpts[f"epoch_{e:03d}.ckpt"] = checkpoint_bytes(p)
    trace = [dict(t, n_sites=job.n_sites, repeat=job.repeat) for t in record.trace]
    ledgers = [dict(v, mode=job.mode, n_sites=job.n_sites, repeat=job.repeat)
               for v in record.ledgers.values()]
    return JobResult(job, row, trace, ledgers, ckpts, time.perf_counter() - t0)


def _run_job_worker(args):
    cfg_json, job = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return run_job(cfg, job)


def plan_jobs(cfg: ExperimentConfig, n_train: int) -> list[Job]:
    return [Job(m, n, r)
            for r in range(cfg.repeats)
            for n in site_counts(cfg, n_train)
            for m in cfg.modes]


def execute(cfg: ExperimentConfig, parallel: int = 1) -> list[JobResult]:
    """Run every (repeat, site count, arm) job, in job order."""
    first = prepare_data(cfg, cfg.seed)
    jobs = plan_jobs(cfg, len(first.train))
    if parallel > 1:
        payload = cfg.model_dump_json()
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job_worker, [(payload, j) for j in jobs]))
    results = []
    cache = {0: first}
    for job in jobs:
        if job.repeat not in cache:
            cache = {job.repeat: prepare_data(cfg, cfg.seed + job.repeat)}
        res = run_job(cfg, job, cache[job.repeat])
        logger.info("%s: auroc=%.4f eps=%s steps=%d (%.1fs)", job.tag, res.row.auroc,
                    res.row.epsilon_text(), res.row.steps, res.wall_time)
        results.append(res)
    return results


def aggregate(results: list[JobResult]) -> list[ReportRow]:
    cells: dict[tuple[int, str], list[ReportRow]] = {}
    for r in results:
        cells.setdefault((r.job.n_sites, r.job.mode), []).append(r.row)
    return [average_rows(v) for _, v in sorted(cells.items(), key=lambda kv: kv[0][0])]


def _jsonl(records) -> str:
    def fix(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None if math.isnan(v) else "inf"
        return v
    return "".join(json.dumps({k: fix(v) for k, v in r.items()}, sort_keys=True) + "\n"
                   for r in records)


def write_outputs(cfg: ExperimentConfig, results: list[JobResult], out_dir: Path) -> list[ReportRow]:
    """Write report, logs and checkpoints; each file goes through temp + rename."""
    rows = aggregate(results)
    for r in results:
        for name, blob in r.checkpoints.items():
            atomic_write(out_dir / "checkpoints" / r.job.tag / name, blob)
    atomic_write(out_dir / "metrics.jsonl", _jsonl(t for r in results for t in r.trace))
    atomic_write(out_dir / "ledger.jsonl", _jsonl(l for r in results for l in r.ledgers))
    atomic_write(out_dir / "config.resolved.yaml", dump(cfg))
    atomic_write(out_dir / "report.json", report_json(rows))
    atomic_write(out_dir / "report.txt", format_table(rows, "Sites"))
    return rows
