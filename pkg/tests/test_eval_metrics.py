import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclicdp.data_synth import SiteDataset
from cyclicdp.eval_metrics import ReportRow, auroc, format_table, report_json, summarize_run
from cyclicdp.federation import RunRecord
from cyclicdp.nn_core import ArchitectureSpec, forward, init_params


def pair_count_auroc(scores, labels):
    """O(n^2) definition: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_perfect_ranking():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0


def test_all_tied():
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


def test_length_mismatch():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1])


def test_random_matches_pair_counting():
    rng = np.random.default_rng(0)
    s = rng.random(200)
    y = rng.integers(0, 2, 200)
    assert abs(auroc(s, y) - pair_count_auroc(s, y)) <= 1e-12


@st.composite
def scored(draw):
    n = draw(st.integers(2, 500))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    levels = draw(st.sampled_from([3, 20, 10**6]))  # few levels force ties
    s = rng.integers(0, levels, n) / levels
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    return s, y


@settings(max_examples=60, deadline=None)
@given(scored())
def test_property_matches_pair_counting(case):
    s, y = case
    assert abs(auroc(s, y) - pair_count_auroc(s, y)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_label_flip_complements(seed):
    rng = np.random.default_rng(seed)
    s = rng.permutation(50) / 50.0  # tie-free
    y = np.r_[0, 1, rng.integers(0, 2, 48)]
    assert auroc(s, y) + auroc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=80)
    y = np.r_[0, 1, rng.integers(0, 2, 78)]
    assert auroc(np.exp(3 * s) + 7, y) == auroc(s, y)


def _record(mode="central", eps=None):
    spec = ArchitectureSpec((3, 4, 1))
    rec = RunRecord(mode, init_params(spec, 1), n_sites=2, total_steps=17, epochs_run=3)
    if eps is not None:
        rec.ledgers = {"a": {"epsilon": eps}, "b": {"epsilon": eps / 2}}
    return rec


def _test_sets():
    rng = np.random.default_rng(4)
    return [SiteDataset(rng.normal(size=(40, 3)), np.r_[0, 1, rng.integers(0, 2, 38)], f"t{i}")
            for i in range(2)]


class TestSummarize:
    def test_deterministic(self):
        rec, test = _record(), _test_sets()
        assert summarize_run(rec, test) == summarize_run(rec, test)

    def test_non_private_has_no_epsilon(self):
        row = summarize_run(_record(), _test_sets())
        assert math.isinf(row.max_epsilon) and row.epsilon_text() == "n/a"

    def test_private_takes_max(self):
        row = summarize_run(_record("distributed_private", 2.5), _test_sets())
        assert row.max_epsilon == 2.5

    def test_auroc_consistent_with_direct_call(self):
        rec, test = _record(), _test_sets()
        x = np.vstack([t.features for t in test])
        y = np.concatenate([t.labels for t in test])
        assert summarize_run(rec, test).auroc == auroc(forward(rec.params, x), y)

    def test_empty_test(self):
        with pytest.raises(ValueError):
            summarize_run(_record(), [])


def test_table_and_json_layout():
    rows = [ReportRow(m, n, 0.5 + 0.01 * n, math.inf if "private" not in m else 1.0 + n, 10, 1)
            for n in (1, 2) for m in ("central", "central_private", "distributed", "distributed_private")]
    text = format_table(rows)
    lines = text.splitlines()
    assert lines[1].split() == ["Sites", "central", "central_private", "distributed", "distributed_private"]
    assert lines[2].split() == ["1", "0.510", "0.510", "0.510", "0.510"]
    assert "n/a" in text
    data = json.loads(report_json(rows))
    assert data["auroc"][1] == {"n_sites": 2, "central": 0.52, "central_private": 0.52,
                                "distributed": 0.52, "distributed_private": 0.52}
    assert data["rows"][0]["max_epsilon"] is None
