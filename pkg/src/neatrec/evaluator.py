"""Hit-rate / NDCG evaluation over co-purchase recall sets.

For every label ``(q, v)`` the candidate pool is the ``recall_size`` items
most often co-purchased with ``q`` in the training statistics. A scorer
re-ranks the pool (or, for the global-popularity baseline, ignores it) and
the rank of ``v`` gives HR@K and NDCG@K with binary relevance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TextIO

import numpy as np

from neatrec.corpus import CoPurchaseStats
from neatrec.gaussian import EmbeddingTable
from neatrec.labelgen import LabelRecord

DEFAULT_KS = (1, 3, 5, 10, 20)
DEFAULT_RECALL_SIZE = 100


class EvaluationError(ValueError):
    pass


@dataclass
class RecallSet:
    query: str
    candidates: list[str]


def build_recall_set(query: str, stats: CoPurchaseStats, size: int = DEFAULT_RECALL_SIZE) -> RecallSet | None:
    """Top ``size`` co-purchased items for ``query``; ``None`` when ``query`` has none."""
    co = stats.co_items(query)
    if not co:
        return None
    ranked = sorted((item for item in co if item != query), key=lambda item: (-co[item], item))
    return RecallSet(query, ranked[:size])


def hr_at_k(ranked: Sequence[str], label: str, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(label in ranked[:k])


def ndcg_at_k(ranked: Sequence[str], label: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    for rank, item in enumerate(ranked[:k], start=1):
        if item == label:
            return 1.0 / math.log2(1 + rank)
    return 0.0


# --- scorers ------------------------------------------------------------------


class Scorer:
    """Orders a recall set. ``missing`` counts candidates the scorer could not score."""

    name = "base"

    def __init__(self) -> None:
        self.missing = 0

    def can_score(self, query: str) -> bool:
        return True

    def rank(self, recall: RecallSet) -> list[str]:
        raise NotImplementedError


class PopCoScorer(Scorer):
    """Most frequently co-purchased items first."""

    name = "popco"

    def __init__(self, stats: CoPurchaseStats) -> None:
        super().__init__()
        self.stats = stats

    def rank(self, recall: RecallSet) -> list[str]:
        co = self.stats.co_items(recall.query)
        return sorted(recall.candidates, key=lambda item: (-co.get(item, 0), item))


class PopScorer(Scorer):
    """Globally most purchased items, independent of the recall set."""

    name = "pop"

    def __init__(self, item_counts: Mapping[str, int], depth: int = DEFAULT_RECALL_SIZE) -> None:
        super().__init__()
        self.order = sorted(item_counts, key=lambda item: (-item_counts[item], item))
        self.depth = depth

    def rank(self, recall: RecallSet) -> list[str]:
        return [item for item in self.order[: self.depth + 1] if item != recall.query][: self.depth]


class CosineScorer(Scorer):
    """Cosine similarity between mean vectors of the query and each candidate."""

    name = "neat"

    def __init__(self, table: EmbeddingTable) -> None:
        super().__init__()
        self.table = table
        norms = np.linalg.norm(table.means, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.unit = np.where(norms[:, None] > 0, table.means / norms[:, None], 0.0)
        self.zero = norms == 0

    def can_score(self, query: str) -> bool:
        i = self.table.item_index.get(query)
        return i is not None and not self.zero[i]

    def rank(self, recall: RecallSet) -> list[str]:
        index = self.table.item_index
        known = [c for c in recall.candidates if c in index and not self.zero[index[c]]]
        self.missing += len(recall.candidates) - len(known)
        if not known:
            return []
        rows = np.fromiter((index[c] for c in known), dtype=np.int64, count=len(known))
        scores = self.unit[rows] @ self.unit[index[recall.query]]
        return [known[i] for i in sorted(range(len(known)), key=lambda i: (-scores[i], known[i]))]


def rank_candidates(recall: RecallSet, scorer: Scorer) -> list[str]:
    return scorer.rank(recall)


# --- aggregate report -----------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated: int
    n_skipped: int
    n_missing_candidates: int = 0


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    methods: list[MethodResult] = field(default_factory=list)

    def get(self, method: str) -> MethodResult:
        for m in self.methods:
            if m.method == method:
                return m
        raise KeyError(method)

    def write_csv(self, out: TextIO) -> None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(("method", "K", "HR", "NDCG", "n_evaluated", "n_skipped"))
        for m in self.methods:
            for k in self.ks:
                writer.writerow((m.method, k, f"{m.hr[k]:.6f}", f"{m.ndcg[k]:.6f}",
                                 m.n_evaluated, m.n_skipped))

    def format_table(self) -> str:
        head = ["method"] + [f"HR@{k}" for k in self.ks] + [f"NDCG@{k}" for k in self.ks] + ["evaluated", "skipped"]
        rows = [
            [m.method] + [f"{m.hr[k]:.4f}" for k in self.ks] + [f"{m.ndcg[k]:.4f}" for k in self.ks]
            + [str(m.n_evaluated), str(m.n_skipped)]
            for m in self.methods
        ]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in [head] + rows]
        return "\n".join(lines)


def evaluate(
    labels: Sequence[LabelRecord],
    stats: CoPurchaseStats,
    scorer: Scorer,
    ks: Sequence[int] = DEFAULT_KS,
    recall_size: int = DEFAULT_RECALL_SIZE,
) -> MethodResult:
    """Mean HR@K / NDCG@K over labels whose query has a recall set and can be scored."""
    if not labels:
        raise EvaluationError("no labels to evaluate")
    ks = tuple(sorted(ks))
    # fsum keeps the means independent of label order
    hr: dict[int, list[float]] = {k: [] for k in ks}
    ndcg: dict[int, list[float]] = {k: [] for k in ks}
    evaluated = skipped = 0
    cache: dict[str, list[str] | None] = {}
    for label in labels:
        if label.query not in cache:
            recall = build_recall_set(label.query, stats, recall_size)
            if recall is None or not scorer.can_score(label.query):
                cache[label.query] = None
            else:
                cache[label.query] = scorer.rank(recall)
        ranked = cache[label.query]
        if ranked is None:
            skipped += 1
            continue
        evaluated += 1
        for k in ks:
            hr[k].append(hr_at_k(ranked, label.rec, k))
            ndcg[k].append(ndcg_at_k(ranked, label.rec, k))
    if evaluated == 0:
        raise EvaluationError(f"all {skipped} labels were skipped")
    return MethodResult(
        scorer.name,
        {k: math.fsum(hr[k]) / evaluated for k in ks},
        {k: math.fsum(ndcg[k]) / evaluated for k in ks},
        evaluated,
        skipped,
        scorer.missing,
    )


def evaluate_methods(
    labels: Sequence[LabelRecord],
    stats: CoPurchaseStats,
    scorers: Sequence[Scorer],
    ks: Sequence[int] = DEFAULT_KS,
    recall_size: int = DEFAULT_RECALL_SIZE,
) -> EvalReport:
    report = EvalReport(tuple(sorted(ks)))
    for scorer in scorers:
        report.methods.append(evaluate(labels, stats, scorer, ks, recall_size))
    return report

