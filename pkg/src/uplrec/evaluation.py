"""Ranking metrics on the MCAR test split, cohort slicing and run-level
significance testing.

Metrics per user at cutoff K (binary relevance, ranks start at 1):
    DCG@K    = sum_{r<=K} rel_r / log2(r+1)
    Recall@K = (# relevant in top K) / (# relevant)
    AP@K     = (1 / # relevant) * sum_{r<=K} rel_r * precision@r
Users without a relevant test item are excluded from averages.  Ties are
broken by ascending item index for determinism.

By default each test user is ranked over the full item catalog with the
user's relevant test items as ground truth; ``candidates="test_only"``
restricts ranking to the user's own test items instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .datasets import ImplicitDataset
from .factor_model import FactorModel

DEFAULT_KS = (3, 5, 8)
COHORTS = ("all", "cold_start_users", "rare_items")


@dataclass
class CohortSpec:
    """Click-count thresholds defining the hard cohorts."""

    rare_item_click_threshold: int = 100
    cold_start_user_click_threshold: int = 6

    def __post_init__(self):
        if self.rare_item_click_threshold <= 0 or self.cold_start_user_click_threshold <= 0:
            raise ValueError("cohort thresholds must be positive")


@dataclass
class CohortMasks:
    """Membership masks computed from training-split click counts."""

    rare_items: np.ndarray  # bool per item
    cold_users: np.ndarray  # bool per user


def compute_cohorts(train: ImplicitDataset, spec: CohortSpec | None = None) -> CohortMasks:
    spec = spec or CohortSpec()
    return CohortMasks(
        rare_items=train.item_click_counts < spec.rare_item_click_threshold,
        cold_users=train.user_click_counts < spec.cold_start_user_click_threshold,
    )


@dataclass
class MetricReport:
    method: str
    run: int
    cohort: str
    k: int
    dcg: float
    recall: float
    map: float
    num_users: int = 0


def _ranked_relevance(scores, relevance):
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance)
    if scores.ndim != 1 or scores.shape != relevance.shape:
        raise ValueError("scores/relevance must be 1-D with equal shapes")
    if len(scores) == 0:
        raise ValueError("empty item list")
    # descending score, ties broken by ascending item index
    order = np.lexsort((np.arange(len(scores)), -scores))
    return relevance[order]


def rank_metrics(scores, relevance, k: int):
    """(DCG@k, Recall@k, AP@k) for one user's candidate list.

    Requires at least one relevant item; callers exclude zero-relevant users
    before averaging.
    """
    ranked = _ranked_relevance(scores, relevance)
    total_rel = int(ranked.sum())
    if total_rel == 0:
        raise ValueError("no relevant item in the candidate list")
    top = ranked[:k].astype(np.float64)
    ranks = np.arange(1, len(top) + 1)
    dcg = float(np.sum(top / np.log2(ranks + 1)))
    recall = float(top.sum() / total_rel)
    precision_at = np.cumsum(top) / ranks
    ap = float(np.sum(top * precision_at) / total_rel)
    return dcg, recall, ap


def _user_metrics(scores, relevance, ks):
    ranked = _ranked_relevance(scores, relevance)
    total_rel = ranked.sum()
    out = {}
    for k in ks:
        top = ranked[:k].astype(np.float64)
        ranks = np.arange(1, len(top) + 1)
        dcg = float(np.sum(top / np.log2(ranks + 1)))
        recall = float(top.sum() / total_rel)
        ap = float(np.sum(top * np.cumsum(top) / ranks) / total_rel)
        out[k] = (dcg, recall, ap)
    return out


def evaluate(model: FactorModel, test: ImplicitDataset, ks=DEFAULT_KS,
             cohorts: CohortMasks | None = None, candidates: str = "catalog",
             method: str = "", run: int = 0) -> list[MetricReport]:
    """Per-cohort, per-K ranking metrics averaged over included users.

    Cohort semantics: ``all`` uses every test user with a relevant item;
    ``cold_start_users`` keeps only cold-start users; ``rare_items`` counts
    only rare items as relevant (candidate sets are unchanged).  The latter
    two require ``cohorts`` masks.
    """
    if candidates not in ("catalog", "test_only"):
        raise ValueError(f"unknown candidate mode {candidates!r}")
    if model.num_users < test.num_users or model.num_items < test.num_items:
        raise ValueError("model dimensions do not cover the dataset")
    cohort_names = ["all"] if cohorts is None else list(COHORTS)
    # accumulator: cohort -> k -> [sum_dcg, sum_recall, sum_ap, n_users]
    acc = {c: {k: [0.0, 0.0, 0.0, 0] for k in ks} for c in cohort_names}

    indptr = test.user_indptr
    for u in range(test.num_users):
        lo, hi = indptr[u], indptr[u + 1]
        if lo == hi:
            continue
        items = test.items[lo:hi]
        rel = test.rel[lo:hi].astype(np.float64)
        if candidates == "catalog":
            scores = model.user_factors[u] @ model.item_factors.T
            relevance = np.zeros(model.num_items)
            relevance[items] = rel
        else:
            scores = model.user_factors[u] @ model.item_factors[items].T
            relevance = rel

        for cohort in cohort_names:
            if cohort == "cold_start_users" and not cohorts.cold_users[u]:
                continue
            if cohort == "rare_items":
                cr = np.zeros_like(relevance)
                if candidates == "catalog":
                    cr[items] = rel * cohorts.rare_items[items]
                else:
                    cr = relevance * cohorts.rare_items[items]
            else:
                cr = relevance
            if cr.sum() == 0:
                continue
            for k, (dcg, recall, ap) in _user_metrics(scores, cr, ks).items():
                slot = acc[cohort][k]
                slot[0] += dcg
                slot[1] += recall
                slot[2] += ap
                slot[3] += 1

    reports = []
    for cohort in cohort_names:
        for k in ks:
            sd, sr, sa, n = acc[cohort][k]
            if n == 0:
                continue
            reports.append(MetricReport(
                method=method, run=run, cohort=cohort, k=k,
                dcg=sd / n, recall=sr / n, map=sa / n, num_users=n,
            ))
    return reports


def validation_dcg(model: FactorModel, validation: ImplicitDataset, k: int = 5) -> float:
    """Mean DCG@k over validation users, ranking each user's validation
    items with their clicks as relevance.  Used for early stopping and
    hyperparameter selection."""
    indptr = validation.user_indptr
    total, n_users = 0.0, 0
    for u in range(validation.num_users):
        lo, hi = indptr[u], indptr[u + 1]
        if lo == hi:
            continue
        rel = validation.rel[lo:hi].astype(np.float64)
        if rel.sum() == 0:
            continue
        items = validation.items[lo:hi]
        scores = model.user_factors[u] @ model.item_factors[items].T
        dcg, _, _ = rank_metrics(scores, rel, k)
        total += dcg
        n_users += 1
    return total / n_users if n_users else 0.0


def one_tailed_t_test(sample_a, sample_b) -> float:
    """Welch two-sample one-tailed p-value for mean(a) > mean(b).

    Degenerate case (both samples constant and equal) returns 0.5 with a
    warning.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("both samples need at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    ma, mb = a.mean(), b.mean()
    se2 = va / len(a) + vb / len(b)
    if se2 == 0.0:
        if ma == mb:
            warnings.warn("degenerate zero-variance identical samples; p = 0.5")
            return 0.5
        return 0.0 if ma > mb else 1.0
    t = (ma - mb) / np.sqrt(se2)
    df = se2**2 / (
        (va / len(a)) ** 2 / (len(a) - 1) + (vb / len(b)) ** 2 / (len(b) - 1)
    )
    return float(stats.t.sf(t, df))
