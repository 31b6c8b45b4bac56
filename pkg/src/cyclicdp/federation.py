"""Cyclical weight transfer across sites, with per-site privacy budgets.

Weights visit the sites in a fixed ring order once per epoch. Each site runs
``len(D_s) // b`` steps on its own data and hands the weights on. In the
private modes every step is charged to that site's RDP ledger, and a site
drops out of the ring the step before its budget would be crossed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dp_optimizer as dpo
from .data_synth import SiteDataset, pool
from .nn_core import ArchitectureSpec, ModelParams, init_params, per_example_gradients
from .rdp_accountant import (
    DEFAULT_ORDERS,
    PrivacyBudget,
    RdpLedger,
    accumulate,
    budget_exhausted,
    to_epsilon,
)

logger = logging.getLogger(__name__)

MODES = ("central", "central_private", "distributed", "distributed_private")
PRIVATE_MODES = ("central_private", "distributed_private")


class InvariantError(RuntimeError):
    """A runtime guarantee (budget, finiteness) was broken."""


@dataclass
class Site:
    id: str
    dataset: SiteDataset
    ledger: RdpLedger
    budget: PrivacyBudget
    active: bool = True

    @classmethod
    def create(cls, dataset: SiteDataset, budget: PrivacyBudget, dp: dpo.DpSgdConfig,
               orders=DEFAULT_ORDERS, site_id: str | None = None) -> "Site":
        if len(dataset) < 1:
            raise ValueError("site dataset is empty")
        q = min(1.0, dp.batch_size / len(dataset))
        return cls(site_id or dataset.site_id, dataset,
                   RdpLedger(q, dp.noise_multiplier, tuple(orders)), budget)

    @property
    def epsilon(self) -> float:
        return to_epsilon(self.ledger, self.budget.delta)[0]


@dataclass(frozen=True)
class TrainingPlan:
    mode: str
    epochs: int
    dp: dpo.DpSgdConfig
    arch: ArchitectureSpec
    master_seed: int = 0
    site_order: tuple[str, ...] | None = None
    convergence_tol: float | None = 1e-4
    postcheck: bool = False  # charge first, then stop once exhausted

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if self.site_order is not None:
            object.__setattr__(self, "site_order", tuple(self.site_order))
            if len(set(self.site_order)) != len(self.site_order):
                raise ValueError("site_order lists a site twice")

    @property
    def private(self) -> bool:
        return self.mode in PRIVATE_MODES


@dataclass
class RunRecord:
    mode: str
    params: ModelParams
    trace: list[dict] = field(default_factory=list)
    ledgers: dict[str, dict] = field(default_factory=dict)
    epoch_params: list[ModelParams] = field(default_factory=list)
    epochs_run: int = 0
    total_steps: int = 0
    converged: bool = False
    wall_time: float = 0.0
    n_sites: int = 0

    def max_epsilon(self) -> float:
        eps = [r["epsilon"] for r in self.ledgers.values()]
        return max(eps) if eps else math.inf


def site_seed(master_seed: int, site_id: str) -> np.random.SeedSequence:
    # crc32 rather than hash(): str hashing is salted per process
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, zlib.crc32(site_id.encode("utf-8"))])


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params.flatten().astype("<f8").tobytes()).hexdigest()[:16]


def train_site_epoch(params: ModelParams, site: Site, plan: TrainingPlan,
                     rng: dpo.NoiseSource):
    """One local pass at ``site``; returns (params, site, info).

    ``info`` has the mean batch loss, the number of steps taken and whether
    the site ran out of budget during this pass.
    """
    if not site.active:
        raise ValueError(f"site {site.id} is inactive")
    ds = site.dataset
    cfg = plan.dp
    n_steps = len(ds) // cfg.batch_size
    losses = []
    taken = 0
    stopped = False
    for _ in range(n_steps):
        if plan.private and not plan.postcheck:
            if budget_exhausted(site.ledger, site.budget).next_step_exhausts:
                site.active = False
                stopped = True
                break
        step_rng = rng.next_stream()
        batch = dpo.sample_batch(ds.features, ds.labels, cfg, step_rng)
        if batch is not None:
            grads, ex_losses = per_example_gradients(params, batch, return_losses=True)
            if not np.isfinite(grads).all():
                raise InvariantError(f"non-finite gradients at site {site.id}")
            losses.append(float(np.mean(ex_losses)))
        else:
            grads = None
        if plan.private:
            params = dpo.noisy_step(params, grads, cfg, step_rng)
            site.ledger = accumulate(site.ledger, 1)
        else:
            params = dpo.plain_step(params, grads, cfg)
        taken += 1
        if not params.is_finite():
            raise InvariantError(f"non-finite weights after step {taken} at site {site.id}")
        if plan.private and plan.postcheck:
            if budget_exhausted(site.ledger, site.budget).exhausted:
                site.active = False
                stopped = True
                break
    if (plan.private and not plan.postcheck and math.isfinite(site.budget.epsilon)
            and site.epsilon >= site.budget.epsilon):
        raise InvariantError(f"site {site.id} overdrew its privacy budget")
    info = {
        "loss": float(np.mean(losses)) if losses else math.nan,
        "steps": taken,
        "exhausted": stopped,
    }
    return params, site, info


def cyclical_train(sites: Sequence[Site], plan: TrainingPlan,
                   params: ModelParams | None = None) -> RunRecord:
    """Pass weights around ``sites`` for ``plan.epochs`` epochs."""
    if not sites:
        raise ValueError("need at least one site")
    by_id = {s.id: s for s in sites}
    if len(by_id) != len(sites):
        raise ValueError("site ids must be unique")
    order = plan.site_order or tuple(s.id for s in sites)
    if set(order) != set(by_id):
        raise ValueError("site_order must list every site exactly once")
    if not any(s.active for s in sites):
        raise ValueError("all sites are inactive")

    start = time.perf_counter()
    if params is None:
        params = init_params(plan.arch, plan.master_seed)
    if params.spec.input_dim != sites[0].dataset.n_features:
        raise ValueError("architecture input size does not match the data")
    sources = {sid: dpo.NoiseSource(site_seed(plan.master_seed, sid)) for sid in order}
    record = RunRecord(plan.mode, params, n_sites=len(sites))
    prev_cycle_loss = None
    for epoch in range(1, plan.epochs + 1):
        cycle = []
        for sid in order:
            site = by_id[sid]
            if not site.active:
                continue
            digest_in = params_digest(params)
            params, site, info = train_site_epoch(params, site, plan, sources[sid])
            record.total_steps += info["steps"]
            if not math.isnan(info["loss"]):
                cycle.append((info["loss"], info["steps"]))
            entry = {
                "mode": plan.mode,
                "epoch": epoch,
                "site": sid,
                "loss": info["loss"],
                "steps": info["steps"],
                "total_site_steps": site.ledger.steps if plan.private else None,
                "epsilon": site.epsilon if plan.private else None,
                "active": site.active,
                "params_in": digest_in,
                "params_out": params_digest(params),
            }
            record.trace.append(entry)
        record.epoch_params.append(params)
        record.epochs_run = epoch
        if not any(s.active for s in sites):
            logger.info("all sites exhausted their budgets after epoch %d", epoch)
            break
        if cycle and plan.convergence_tol is not None:
            w = sum(s for _, s in cycle)
            cycle_loss = sum(l * s for l, s in cycle) / w if w else math.nan
            if prev_cycle_loss is not None and prev_cycle_loss - cycle_loss < plan.convergence_tol:
                record.converged = True
                break
            prev_cycle_loss = cycle_loss
    record.params = params
    if plan.private:
        for s in sites:
            eps, order_ = to_epsilon(s.ledger, s.budget.delta)
            record.ledgers[s.id] = {
                "site_id": s.id, "q": s.ledger.q, "sigma": s.ledger.sigma,
                "steps": s.ledger.steps, "delta": s.budget.delta,
                "epsilon": eps, "best_order": order_, "active": s.active,
            }
    record.wall_time = time.perf_counter() - start
    return record


def central_train(sites: Sequence[Site], plan: TrainingPlan,
                  params: ModelParams | None = None) -> RunRecord:
    """Pool every site's rows into one site and train it alone.

    A single input site keeps its id, so the run matches a one-site
    cyclical run bit for bit.
    """
    if not sites:
        raise ValueError("need at least one site")
    if len(sites) == 1:
        sid = sites[0].id
        pooled = sites[0].dataset
    else:
        sid = "pooled"
        pooled = pool([s.dataset for s in sites], sid)
    if len(pooled) == 0:
        raise ValueError("pooled dataset is empty")
    budget = min((s.budget for s in sites), key=lambda b: (b.epsilon, b.delta))
    big = Site.create(pooled, budget, plan.dp, sites[0].ledger.orders, site_id=sid)
    record = cyclical_train([big], _with_order(plan, None), params)
    record.n_sites = len(sites)
    return record


def _with_order(plan: TrainingPlan, order):
    return replace(plan, site_order=order)


def train(sites: Sequence[Site], plan: TrainingPlan) -> RunRecord:
    if plan.mode.startswith("central"):
        return central_train(sites, plan)
    return cyclical_train(sites, plan)


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"CYCDPCKPT1\n"


def checkpoint_bytes(params: ModelParams) -> bytes:
    """Magic line, one JSON header line, then float64 little-endian values."""
    header = {
        "layer_sizes": list(params.spec.layer_sizes),
        "hidden_activation": params.spec.hidden_activation,
        "n_params": params.spec.n_params,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    return CHECKPOINT_MAGIC + head + params.flatten().astype("<f8").tobytes()


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params: ModelParams) -> None:
    atomic_write(path, checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1:]
    spec = ArchitectureSpec(tuple(header["layer_sizes"]), header["hidden_activation"])
    if spec.n_params != header["n_params"] or len(body) != 8 * spec.n_params:
        raise ValueError(f"{path}: parameter count does not match header")
    return ModelParams.unflatten(spec, np.frombuffer(body, dtype="<f8").astype(np.float64))

