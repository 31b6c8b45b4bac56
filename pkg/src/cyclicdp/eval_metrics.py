"""AUROC and the per-arm report rows built from training runs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data_synth import SiteDataset
from .federation import MODES, RunRecord
from .nn_core import forward


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores share their average rank."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ReportRow:
    mode: str
    n_sites: int
    auroc: float
    max_epsilon: float  # inf for non-private arms
    steps: int
    epochs_run: int

    def epsilon_text(self) -> str:
        return "n/a" if math.isinf(self.max_epsilon) else f"{self.max_epsilon:.3f}"


def summarize_run(record: RunRecord, test: Sequence[SiteDataset]) -> ReportRow:
    """Score the final weights on the pooled test sites."""
    if not test or sum(len(t) for t in test) == 0:
        raise ValueError("empty test set")
    x = np.vstack([t.features for t in test])
    y = np.concatenate([t.labels for t in test])
    return ReportRow(
        mode=record.mode,
        n_sites=record.n_sites,
        auroc=auroc(forward(record.params, x), y),
        max_epsilon=record.max_epsilon(),
        steps=record.total_steps,
        epochs_run=record.epochs_run,
    )


def average_rows(rows: Sequence[ReportRow]) -> ReportRow:
    """Mean AUROC over repeats of one (mode, n_sites) cell; epsilon is the max."""
    first = rows[0]
    return ReportRow(
        mode=first.mode,
        n_sites=first.n_sites,
        auroc=float(math.fsum(r.auroc for r in rows) / len(rows)),
        max_epsilon=max(r.max_epsilon for r in rows),
        steps=int(round(sum(r.steps for r in rows) / len(rows))),
        epochs_run=max(r.epochs_run for r in rows),
    )


def _grid(rows: Sequence[ReportRow]):
    site_counts = sorted({r.n_sites for r in rows})
    cells = {(r.n_sites, r.mode): r for r in rows}
    modes = [m for m in MODES if any(r.mode == m for r in rows)]
    return site_counts, modes, cells


def format_table(rows: Sequence[ReportRow], label: str = "Sites") -> str:
    """Aligned text table: AUROC per arm, followed by the epsilon table."""
    site_counts, modes, cells = _grid(rows)
    header = [label] + modes
    auc_lines = [header]
    eps_lines = [header]
    for n in site_counts:
        a, e = [str(n)], [str(n)]
        for m in modes:
            r = cells.get((n, m))
            a.append("-" if r is None else f"{r.auroc:.3f}")
            e.append("-" if r is None else r.epsilon_text())
        auc_lines.append(a)
        eps_lines.append(e)

    def render(lines):
        widths = [max(len(l[j]) for l in lines) for j in range(len(header))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines)

    return ("AUROC\n" + render(auc_lines) + "\n\nmax epsilon per site\n" + render(eps_lines) + "\n")


def report_json(rows: Sequence[ReportRow]) -> str:
    """One object per site count with a column per arm, plus the raw rows."""
    site_counts, modes, cells = _grid(rows)
    table = []
    for n in site_counts:
        entry = {"n_sites": n}
        for m in MODES:
            r = cells.get((n, m))
            entry[m] = None if r is None else round(r.auroc, 12)
        table.append(entry)

    def clean(r: ReportRow):
        d = asdict(r)
        d["max_epsilon"] = None if math.isinf(r.max_epsilon) else r.max_epsilon
        return d

    return json.dumps({"auroc": table, "rows": [clean(r) for r in rows]}, indent=2, sort_keys=True) + "\n"
