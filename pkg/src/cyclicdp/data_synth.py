"""Synthetic multi-site tabular data, CSV ingestion and preprocessing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

logger = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SiteDataSpec:
    """How to draw one site: x ~ N(feature_shift, I), y ~ Bern(sigmoid(w.x + label_bias)).

    ``feature_shift`` may be a scalar (same offset on every column).
    ``positive_fraction_hint`` replaces ``label_bias`` by the intercept that
    makes the site's expected positive rate equal the hint. ``seed`` pins the
    site's own substream; otherwise it is derived from the master seed and the
    site's position.
    """

    n: int
    feature_shift: float | Sequence[float] = 0.0
    label_bias: float = 0.0
    positive_fraction_hint: float | None = None
    site_id: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DataError(f"site size must be a positive integer, got {self.n}")
        if not np.isfinite(np.asarray(self.feature_shift, dtype=np.float64)).all():
            raise DataError("feature_shift must be finite")
        if not math.isfinite(self.label_bias):
            raise DataError("label_bias must be finite")
        h = self.positive_fraction_hint
        if h is not None and not 0.0 < h < 1.0:
            raise DataError(f"positive_fraction_hint must be in (0, 1), got {h}")


@dataclass
class SiteDataset:
    features: np.ndarray
    labels: np.ndarray
    site_id: str
    provenance: str = "synthetic"
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"site {self.site_id}: features must be a non-empty matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"site {self.site_id}: labels do not match feature rows")
        if not np.isfinite(self.features).all():
            raise DataError(f"site {self.site_id}: non-finite feature values")
        if not np.isin(self.labels, (0.0, 1.0)).all():
            raise DataError(f"site {self.site_id}: labels must be 0 or 1")
        if self.provenance not in ("synthetic", "csv"):
            raise DataError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def generate_multisite(
    d: int,
    global_weights,
    specs: Sequence[SiteDataSpec],
    seed: int,
) -> list[SiteDataset]:
    if d < 1:
        raise DataError(f"dimension must be >= 1, got {d}")
    if not specs:
        raise DataError("need at least one site spec")
    w = np.asarray(global_weights, dtype=np.float64)
    if w.shape != (d,):
        raise DataError(f"global_weights must have length {d}, got shape {w.shape}")
    children = np.random.SeedSequence(seed).spawn(len(specs))
    out = []
    for i, (spec, child) in enumerate(zip(specs, children)):
        mu = np.broadcast_to(np.asarray(spec.feature_shift, dtype=np.float64), (d,))
        if np.asarray(spec.feature_shift).ndim == 1 and len(spec.feature_shift) != d:
            raise DataError(f"site {i}: feature_shift must have length {d}")
        rng = np.random.default_rng(spec.seed if spec.seed is not None else child)
        x = rng.standard_normal((spec.n, d)) + mu
        z = x @ w
        bias = spec.label_bias
        if spec.positive_fraction_hint is not None:
            bias = _bias_for_rate(z, spec.positive_fraction_hint)
        y = (rng.random(spec.n) < expit(z + bias)).astype(np.float64)
        site_id = spec.site_id if spec.site_id is not None else f"site{i + 1}"
        out.append(SiteDataset(x, y, site_id, "synthetic", {"label_bias": bias}))
    return out


def _bias_for_rate(z: np.ndarray, rate: float) -> float:
    f = lambda b: float(np.mean(expit(z + b))) - rate
    lo, hi = -50.0, 50.0
    return brentq(f, lo - float(z.max()), hi - float(z.min()), xtol=1e-12)


def expected_positive_rate(dataset_features, global_weights, label_bias) -> float:
    return float(np.mean(expit(np.asarray(dataset_features) @ np.asarray(global_weights) + label_bias)))


def column_bounds(datasets: Sequence[SiteDataset]) -> tuple[np.ndarray, np.ndarray]:
    x = np.vstack([ds.features for ds in datasets])
    return x.min(axis=0), x.max(axis=0)


def min_max_normalize(dataset: SiteDataset, bounds=None):
    """Scale columns to [0, 1]; returns (normalized dataset, (mins, maxs)).

    Pass the training bounds when normalising held-out data. Values outside
    the bounds clamp to [0, 1]; constant columns (max == min) map to 0.
    """
    if len(dataset) == 0:
        raise DataError("cannot normalize an empty dataset")
    x = dataset.features
    if bounds is None:
        lo, hi = x.min(axis=0), x.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if lo.shape != (x.shape[1],) or hi.shape != (x.shape[1],):
            raise DataError("bounds do not match the number of feature columns")
        if (hi < lo).any():
            raise DataError("bounds have max < min")
    span = hi - lo
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    scaled = np.where(degenerate, 0.0, (x - lo) / safe)
    scaled = np.clip(scaled, 0.0, 1.0)
    return replace(dataset, features=scaled), (lo.copy(), hi.copy())


def pooled_variance(datasets: Sequence[SiteDataset]) -> np.ndarray:
    """Population variance per column over the union of all sites.

    Sites are summarised separately and combined with exactly rounded sums,
    so the result does not depend on the order of ``datasets``.
    """
    if not datasets:
        raise DataError("no datasets given")
    d = datasets[0].n_features
    if any(ds.n_features != d for ds in datasets):
        raise DataError("datasets have different numbers of columns")
    counts = [len(ds) for ds in datasets]
    total = sum(counts)
    sums = [ds.features.sum(axis=0) for ds in datasets]
    means = [s / c for s, c in zip(sums, counts)]
    m2s = [((ds.features - m) ** 2).sum(axis=0) for ds, m in zip(datasets, means)]
    out = np.empty(d)
    for j in range(d):
        mean = math.fsum(s[j] for s in sums) / total
        out[j] = math.fsum(
            m2[j] + c * (m[j] - mean) ** 2 for m2, c, m in zip(m2s, counts, means)
        ) / total
    return out


def top_variance_features(datasets: Sequence[SiteDataset], k: int):
    """Keep the k highest-variance columns, listed in ascending column order."""
    if not datasets:
        raise DataError("no datasets given")
    d = datasets[0].n_features
    if not 1 <= k <= d:
        raise DataError(f"k must be in [1, {d}], got {k}")
    var = pooled_variance(datasets)
    order = np.argsort(-var, kind="stable")  # ties keep the lower index first
    cols = sorted(int(c) for c in order[:k])
    filtered = [replace(ds, features=ds.features[:, cols]) for ds in datasets]
    return cols, filtered


def load_csv(path, label_column: str, site_column: str | None = None) -> list[SiteDataset]:
    """Read a header-ed CSV into one dataset per site value.

    Every column other than the label and site columns that parses as a
    number in at least one row is a feature. Rows with a missing or
    non-numeric feature are dropped and their 1-based line numbers logged.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(i + 2, r) for i, r in enumerate(reader) if r]
    header = [h.strip() for h in header]
    for name in [label_column] + ([site_column] if site_column else []):
        if name not in header:
            raise DataError(f"{path}: missing column {name!r}")
    li = header.index(label_column)
    si = header.index(site_column) if site_column else None
    candidates = [j for j in range(len(header)) if j not in (li, si)]

    def num(v):
        try:
            x = float(v)
        except ValueError:
            return None
        return x if math.isfinite(x) else None

    feat_cols = [j for j in candidates if any(j < len(r) and num(r[j]) is not None for _, r in rows)]
    if not feat_cols:
        raise DataError(f"{path}: no numeric feature columns")

    groups: dict[str, tuple[list, list]] = {}
    rejected = []
    for line, r in rows:
        if len(r) != len(header):
            rejected.append(line)
            continue
        label = r[li].strip()
        if label not in ("0", "1"):
            raise DataError(f"{path}: row {line}: label {label!r} is not 0 or 1")
        vals = [num(r[j]) for j in feat_cols]
        if any(v is None for v in vals):
            rejected.append(line)
            continue
        site = r[si].strip() if si is not None else path.stem
        xs, ys = groups.setdefault(site, ([], []))
        xs.append(vals)
        ys.append(float(label))
    if rejected:
        logger.warning("%s: rejected %d row(s) with missing or non-numeric features: %s",
                       path, len(rejected), rejected)
    if not groups:
        raise DataError(f"{path}: no usable rows")
    names = [header[j] for j in feat_cols]
    return [
        SiteDataset(np.array(xs), np.array(ys), site, "csv",
                    {"feature_names": names, "rejected_rows": rejected})
        for site, (xs, ys) in groups.items()
    ]


def write_csv(path, datasets: Sequence[SiteDataset], label_column="label", site_column="site"):
    """Inverse of :func:`load_csv`; floats are written with repr so they round-trip."""
    d = datasets[0].n_features
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(d)] + [label_column, site_column])
        for ds in datasets:
            for row, y in zip(ds.features, ds.labels):
                w.writerow([repr(float(v)) for v in row] + [str(int(y)), ds.site_id])


def train_test_split(dataset: SiteDataset, test_fraction: float, seed) -> tuple[SiteDataset, SiteDataset]:
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if not 1 <= n_test < n:
        raise DataError(f"site {dataset.site_id}: split leaves an empty side (n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    te, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return (replace(dataset, features=dataset.features[tr], labels=dataset.labels[tr]),
            replace(dataset, features=dataset.features[te], labels=dataset.labels[te]))


def pool(datasets: Sequence[SiteDataset], site_id: str = "pooled") -> SiteDataset:
    if not datasets:
        raise DataError("nothing to pool")
    return SiteDataset(
        np.vstack([ds.features for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        site_id,
        datasets[0].provenance,
    )
