"""Chi-squared independence labels for co-purchased item pairs.

For a directed pair ``(vi, vj)`` with ``o1`` joint records, marginals ``Fi``,
``Fj`` and grand total ``n`` the 2x2 table is::

              vj        not vj
    vi        o1        o3 = Fi - o1
    not vi    o2 = Fj - o1   o4 = n - Fi - Fj + o1

Expected cells are the products of the margins over ``n``. A pair is a
positively dependent (qualified) label when its uncorrected statistic
exceeds the 1-dof critical value for the chosen p-value and ``o1 > e1``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from neatrec.corpus import CoPurchaseStats

logger = logging.getLogger(__name__)

# upper-tail critical values of chi-squared with one degree of freedom
CRITICAL_VALUES = {
    0.05: 3.841458820694124,
    0.01: 6.634896601021214,
    0.001: 10.827566170662733,
}


class DataInconsistency(ValueError):
    pass


class DegenerateTable(ValueError):
    pass


@dataclass(frozen=True)
class ContingencyTable:
    o1: float
    o2: float
    o3: float
    o4: float
    e1: float
    e2: float
    e3: float
    e4: float
    n: float

    @property
    def observed(self) -> tuple[float, float, float, float]:
        return (self.o1, self.o2, self.o3, self.o4)

    @property
    def expected(self) -> tuple[float, float, float, float]:
        return (self.e1, self.e2, self.e3, self.e4)

    @classmethod
    def from_counts(cls, o1: int, f_i: int, f_j: int, n: int) -> ContingencyTable:
        if n <= 0:
            raise DegenerateTable("total must be positive")
        o2 = f_j - o1
        o3 = f_i - o1
        o4 = n - f_i - f_j + o1
        if min(o1, o2, o3, o4) < 0:
            raise DataInconsistency(
                f"negative cell: o1={o1} o2={o2} o3={o3} o4={o4} (F_i={f_i}, F_j={f_j}, n={n})"
            )
        return cls(
            o1, o2, o3, o4,
            f_i * f_j / n,
            (n - f_i) * f_j / n,
            f_i * (n - f_j) / n,
            (n - f_i) * (n - f_j) / n,
            n,
        )

    def transpose(self) -> ContingencyTable:
        return ContingencyTable(self.o1, self.o3, self.o2, self.o4,
                                self.e1, self.e3, self.e2, self.e4, self.n)


def build_contingency(pair: tuple[str, str], stats: CoPurchaseStats) -> ContingencyTable:
    if pair not in stats.pair_freq:
        raise KeyError(f"pair {pair} not present in co-purchase statistics")
    vi, vj = pair
    return ContingencyTable.from_counts(
        stats.pair_freq[pair], stats.marginal[vi], stats.marginal[vj], stats.total
    )


def chi_squared(table: ContingencyTable) -> float:
    total = 0.0
    for o, e in zip(table.observed, table.expected):
        if e <= 0:
            raise DegenerateTable("expected cell is zero")
        total += (o - e) ** 2 / e
    return total


def chi2_sf(x: float) -> float:
    """Upper-tail probability of chi-squared with one degree of freedom."""
    return math.erfc(math.sqrt(x / 2.0)) if x > 0 else 1.0


def threshold_for(p_value: float) -> float:
    """Critical value ``t`` with ``P(X > t) = p_value`` for 1 dof."""
    if not 0.0 < p_value < 1.0:
        raise ValueError(f"p_value must lie in (0, 1), got {p_value}")
    if p_value in CRITICAL_VALUES:
        return CRITICAL_VALUES[p_value]
    return invert_chi2_sf(p_value)


def invert_chi2_sf(p_value: float, tol: float = 1e-9) -> float:
    """Bisection on the 1-dof survival function."""
    lo, hi = 0.0, 1.0
    while chi2_sf(hi) > p_value:
        hi *= 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if chi2_sf(mid) > p_value:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class LabelRecord:
    query: str
    rec: str
    chi2: float
    o1: int
    e1: float


@dataclass
class LabelResult:
    p_value: float
    threshold: float
    qualified: list[LabelRecord] = field(default_factory=list)
    negatively_dependent: list[LabelRecord] = field(default_factory=list)
    independent: list[LabelRecord] = field(default_factory=list)
    skipped: int = 0

    def diagnostics(self) -> dict:
        return {
            "p_value": self.p_value,
            "threshold": self.threshold,
            "positively_dependent": len(self.qualified),
            "negatively_dependent": len(self.negatively_dependent),
            "independent": len(self.independent),
            "skipped_degenerate": self.skipped,
        }


def _by_chi2(records: list[LabelRecord]) -> list[LabelRecord]:
    return sorted(records, key=lambda r: (-r.chi2, r.query, r.rec))


def generate_labels(stats: CoPurchaseStats, p_value: float = 0.001) -> LabelResult:
    """Test every directed pair in ``stats``; partitions come back sorted by chi2 descending."""
    if stats.total <= 0:
        raise DegenerateTable("co-purchase statistics are empty")
    result = LabelResult(p_value, threshold_for(p_value))
    for (vi, vj), o1 in stats.pair_freq.items():
        table = ContingencyTable.from_counts(o1, stats.marginal[vi], stats.marginal[vj], stats.total)
        try:
            stat = chi_squared(table)
        except DegenerateTable:
            logger.debug("skipping degenerate pair (%s, %s)", vi, vj)
            result.skipped += 1
            continue
        record = LabelRecord(vi, vj, stat, o1, table.e1)
        if stat > result.threshold:
            if o1 > table.e1:
                result.qualified.append(record)
            else:
                result.negatively_dependent.append(record)
        else:
            result.independent.append(record)
    if result.skipped:
        logger.info("skipped %d pairs with a zero expected cell", result.skipped)
    result.qualified = _by_chi2(result.qualified)
    result.negatively_dependent = _by_chi2(result.negatively_dependent)
    result.independent = _by_chi2(result.independent)
    return result


def dedupe_symmetric(records: Iterable[LabelRecord]) -> list[LabelRecord]:
    """Collapse ``(a, b)``/``(b, a)`` twins, keeping the lexicographically smaller query."""
    best: dict[tuple[str, str], LabelRecord] = {}
    for r in records:
        key = (min(r.query, r.rec), max(r.query, r.rec))
        kept = best.get(key)
        if kept is None or r.query < kept.query:
            best[key] = r
    return _by_chi2(list(best.values()))


def write_labels(records: Sequence[LabelRecord], p_value: float, threshold: float, out: TextIO) -> None:
    out.write(f"# p_value={p_value!r} threshold={threshold:.3f}\n")
    out.write("query_item\trec_item\tchi2\to1\te1\n")
    for r in records:
        out.write(f"{r.query}\t{r.rec}\t{r.chi2!r}\t{r.o1}\t{r.e1!r}\n")


def read_labels(src: TextIO) -> tuple[dict[str, float], list[LabelRecord]]:
    header = src.readline()
    if not header.startswith("#"):
        raise ValueError("label file must start with a '# p_value=... threshold=...' line")
    meta = {}
    for token in header[1:].split():
        key, _, value = token.partition("=")
        meta[key] = float(value)
    src.readline()
    records = []
    for line in src:
        q, r, chi2, o1, e1 = line.rstrip("\n").split("\t")
        records.append(LabelRecord(q, r, float(chi2), int(o1), float(e1)))
    return meta, records


def write_diagnostics(result: LabelResult, out: TextIO) -> None:
    json.dump(result.diagnostics(), out, indent=2, sort_keys=True)
    out.write("\n")
