"""Transaction ingestion, co-purchase pair sampling and frequency statistics.

A transaction file is delimited UTF-8 text with a header row and one
purchased item per row::

    user_id,transaction_id,position,item_id,category_id

Rows of one transaction need not be contiguous. Items of a transaction are
ordered by ``position``; repeated items keep their first occurrence only.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, NamedTuple, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)

HEADER = ("user_id", "transaction_id", "position", "item_id", "category_id")


class CorpusError(ValueError):
    """Raised for malformed or inconsistent transaction data."""


class ItemRef(NamedTuple):
    item_id: str
    category_id: str


class CoPurchasePair(NamedTuple):
    query: str
    rec: str
    user: str


@dataclass
class Transaction:
    transaction_id: str
    user_id: str
    items: list[ItemRef]


@dataclass
class TransactionCorpus:
    transactions: list[Transaction] = field(default_factory=list)
    categories: dict[str, str] = field(default_factory=dict)

    @property
    def n_transactions(self) -> int:
        return len(self.transactions)

    @property
    def n_items(self) -> int:
        return len(self.categories)

    @property
    def n_users(self) -> int:
        return len({t.user_id for t in self.transactions})

    def item_counts(self) -> Counter:
        """Number of transactions containing each item (after dedup)."""
        counts: Counter = Counter()
        for t in self.transactions:
            counts.update(ref.item_id for ref in t.items)
        return counts

    def user_items(self) -> dict[str, set[str]]:
        purchased: dict[str, set[str]] = {}
        for t in self.transactions:
            purchased.setdefault(t.user_id, set()).update(r.item_id for r in t.items)
        return purchased

    def summary(self) -> dict[str, int]:
        return {
            "transactions": self.n_transactions,
            "items": self.n_items,
            "users": self.n_users,
        }


def _dedup(items: Iterable[ItemRef]) -> list[ItemRef]:
    seen: set[str] = set()
    out = []
    for ref in items:
        if ref.item_id not in seen:
            seen.add(ref.item_id)
            out.append(ref)
    return out


def ingest_transactions(source: BinaryIO, delimiter: str = ",") -> TransactionCorpus:
    """Read a transaction file into a corpus.

    Raises :class:`CorpusError` naming the byte offset and field of the first
    malformed row, or listing items whose category is missing or conflicting.
    """
    offset = 0
    header_seen = False
    rows: dict[str, tuple[str, dict[int, ItemRef]]] = {}
    categories: dict[str, str] = {}
    bad_category: list[str] = []

    for raw in source:
        line_offset = offset
        offset += len(raw)
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusError(f"byte offset {line_offset}: invalid UTF-8 ({exc.reason})") from None
        text = text.rstrip("\r\n")
        if not text.strip():
            continue
        fields = next(csv.reader([text], delimiter=delimiter))
        if not header_seen:
            header_seen = True
            if tuple(f.strip() for f in fields) != HEADER:
                raise CorpusError(
                    f"byte offset {line_offset}: field header: expected {','.join(HEADER)}"
                )
            continue
        if len(fields) != len(HEADER):
            raise CorpusError(
                f"byte offset {line_offset}: field count: expected {len(HEADER)}, got {len(fields)}"
            )
        user, tid, pos_text, item, category = (f.strip() for f in fields)
        for name, value in zip(HEADER, (user, tid, pos_text, item)):
            if not value:
                raise CorpusError(f"byte offset {line_offset}: field {name}: empty value")
        try:
            pos = int(pos_text)
        except ValueError:
            raise CorpusError(
                f"byte offset {line_offset}: field position: not an integer: {pos_text!r}"
            ) from None

        if not category:
            bad_category.append(item)
        elif categories.setdefault(item, category) != category:
            bad_category.append(item)

        owner, positions = rows.setdefault(tid, (user, {}))
        if owner != user:
            raise CorpusError(
                f"byte offset {line_offset}: field user_id: transaction {tid} already owned by {owner}"
            )
        if pos in positions:
            raise CorpusError(
                f"byte offset {line_offset}: field position: duplicate position {pos} in transaction {tid}"
            )
        positions[pos] = ItemRef(item, category)

    if bad_category:
        listed = ", ".join(sorted(set(bad_category)))
        raise CorpusError(f"missing or conflicting category for items: {listed}")

    corpus = TransactionCorpus(categories=categories)
    for tid, (user, positions) in rows.items():
        items = _dedup(positions[p] for p in sorted(positions))
        corpus.transactions.append(Transaction(tid, user, items))
    logger.info("ingested %s", corpus.summary())
    return corpus


def write_transactions(corpus: TransactionCorpus, out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(HEADER)
    for t in corpus.transactions:
        for pos, ref in enumerate(t.items):
            writer.writerow((t.user_id, t.transaction_id, pos, ref.item_id, ref.category_id))


def sample_pairs(corpus: TransactionCorpus, window: int = 5) -> list[CoPurchasePair]:
    """Emit directed co-purchase pairs for positions at most ``window`` apart."""
    if window < 1:
        raise ValueError("window must be >= 1")
    pairs = []
    for t in corpus.transactions:
        ids = [ref.item_id for ref in t.items]
        n = len(ids)
        for i in range(n):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if i != j:
                    pairs.append(CoPurchasePair(ids[i], ids[j], t.user_id))
    return pairs


def filter_same_category(
    pairs: Sequence[CoPurchasePair], catalog: dict[str, str]
) -> list[CoPurchasePair]:
    """Drop pairs whose two items share a category."""
    out = []
    for p in pairs:
        try:
            same = catalog[p.query] == catalog[p.rec]
        except KeyError as exc:
            raise CorpusError(f"item {exc.args[0]} missing from catalog") from None
        if not same:
            out.append(p)
    return out


@dataclass
class CoPurchaseStats:
    pair_freq: Counter = field(default_factory=Counter)
    marginal: Counter = field(default_factory=Counter)
    total: int = 0
    _by_query: dict | None = field(default=None, init=False, repr=False, compare=False)

    def merge(self, other: CoPurchaseStats) -> CoPurchaseStats:
        return CoPurchaseStats(
            self.pair_freq + other.pair_freq,
            self.marginal + other.marginal,
            self.total + other.total,
        )

    def rec_marginal(self) -> Counter:
        """Marginals summed over the rec slot (equal to ``marginal`` under symmetric emission)."""
        out: Counter = Counter()
        for (_, rec), count in self.pair_freq.items():
            out[rec] += count
        return out

    def co_items(self, query: str) -> dict[str, int]:
        """All recs co-purchased with ``query`` and their counts."""
        # built once; stats are treated as immutable after construction
        if self._by_query is None:
            self._by_query = {}
            for (q, r), c in self.pair_freq.items():
                self._by_query.setdefault(q, {})[r] = c
        return self._by_query.get(query, {})


def build_stats(pairs: Iterable[tuple]) -> CoPurchaseStats:
    freq = Counter((p[0], p[1]) for p in pairs)
    return stats_from_freq(freq)


def stats_from_freq(freq: Counter) -> CoPurchaseStats:
    marginal: Counter = Counter()
    for (q, _), c in freq.items():
        marginal[q] += c
    return CoPurchaseStats(freq, marginal, sum(freq.values()))


def write_pairs(pairs: Iterable[CoPurchasePair], out: TextIO) -> None:
    out.write("query\trec\tuser\n")
    for p in pairs:
        out.write(f"{p.query}\t{p.rec}\t{p.user}\n")


def read_pairs(src: TextIO) -> list[CoPurchasePair]:
    header = src.readline().rstrip("\n")
    if header != "query\trec\tuser":
        raise CorpusError(f"bad pairs header: {header!r}")
    out = []
    for lineno, line in enumerate(src, start=2):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise CorpusError(f"pairs line {lineno}: expected 3 fields")
        out.append(CoPurchasePair(*parts))
    return out


def write_stats(stats: CoPurchaseStats, out: TextIO) -> None:
    out.write(f"#total={stats.total}\n")
    out.write("query\trec\tcount\n")
    for (q, r), c in sorted(stats.pair_freq.items()):
        out.write(f"{q}\t{r}\t{c}\n")


def read_stats(src: TextIO) -> CoPurchaseStats:
    first = src.readline().rstrip("\n")
    if not first.startswith("#total="):
        raise CorpusError("stats file must start with '#total=<N>'")
    declared = int(first.split("=", 1)[1])
    src.readline()
    freq: Counter = Counter()
    for lineno, line in enumerate(src, start=3):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise CorpusError(f"stats line {lineno}: expected 3 fields")
        freq[(parts[0], parts[1])] = int(parts[2])
    stats = stats_from_freq(freq)
    if stats.total != declared:
        raise CorpusError(f"stats total {stats.total} disagrees with header {declared}")
    return stats


def write_items(corpus: TransactionCorpus, out: TextIO) -> None:
    counts = corpus.item_counts()
    out.write("item_id\tcategory_id\tcount\n")
    for item in sorted(corpus.categories):
        out.write(f"{item}\t{corpus.categories[item]}\t{counts.get(item, 0)}\n")


def read_items(src: TextIO) -> tuple[dict[str, str], dict[str, int]]:
    src.readline()
    categories, counts = {}, {}
    for line in src:
        item, cat, count = line.rstrip("\n").split("\t")
        categories[item] = cat
        counts[item] = int(count)
    return categories, counts


# --- synthetic corpora -------------------------------------------------------


@dataclass
class SynthSpec:
    """Planted-complement corpus description.

    Items ``0..noise_items-1`` are popularity noise, included in each basket
    independently with ``noise_prob``. The next ``2 * planted_pairs`` items
    form consecutive complement pairs: when one member lands in a basket, the
    partner is added with probability ``boost``. Base basket items are drawn
    uniformly without replacement from all non-noise items.
    """

    n_items: int = 500
    n_transactions: int = 50_000
    n_users: int = 1_000
    n_categories: int = 20
    planted_pairs: int = 50
    boost: float = 0.5
    noise_items: int = 3
    noise_prob: float = 0.5
    basket_mean: float = 4.0
    basket_max: int = 20

    def validate(self) -> None:
        for name in ("boost", "noise_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.n_items < 1 or self.n_transactions < 0 or self.n_users < 1:
            raise ValueError("n_items and n_users must be >= 1, n_transactions >= 0")
        if self.n_categories < 2:
            raise ValueError("n_categories must be >= 2")
        if self.noise_items + 2 * self.planted_pairs > self.n_items:
            raise ValueError("noise_items + 2*planted_pairs exceeds n_items")
        if self.noise_items == self.n_items:
            raise ValueError("at least one non-noise item is required")
        if self.basket_mean < 1 or self.basket_max < 1:
            raise ValueError("basket_mean and basket_max must be >= 1")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> SynthSpec:
        known = cls.__dataclass_fields__
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown synth field {key!r}")
            kind = known[key].type
            kwargs[key] = float(raw) if kind == "float" else int(raw)
        spec = cls(**kwargs)
        spec.validate()
        return spec

    # deterministic layout, independent of the seed
    def item_id(self, i: int) -> str:
        width = max(4, len(str(self.n_items - 1)))
        return f"item{i:0{width}d}"

    def category_of(self, i: int) -> str:
        return f"cat{i % self.n_categories:02d}"

    def noise_ids(self) -> list[str]:
        return [self.item_id(i) for i in range(self.noise_items)]

    def planted(self) -> list[tuple[str, str]]:
        base = self.noise_items
        return [
            (self.item_id(base + 2 * k), self.item_id(base + 2 * k + 1))
            for k in range(self.planted_pairs)
        ]


def generate_synthetic(spec: SynthSpec, seed: int) -> TransactionCorpus:
    spec.validate()
    rng = np.random.default_rng(seed)
    base_pool = np.arange(spec.noise_items, spec.n_items)
    partner = {}
    for k in range(spec.planted_pairs):
        a = spec.noise_items + 2 * k
        partner[a], partner[a + 1] = a + 1, a
    ids = [spec.item_id(i) for i in range(spec.n_items)]
    refs = [ItemRef(ids[i], spec.category_of(i)) for i in range(spec.n_items)]
    uwidth = len(str(spec.n_users - 1))
    twidth = len(str(max(spec.n_transactions - 1, 0)))

    corpus = TransactionCorpus(categories={r.item_id: r.category_id for r in refs})
    for t in range(spec.n_transactions):
        size = min(1 + rng.poisson(spec.basket_mean - 1), spec.basket_max, len(base_pool))
        basket = [int(i) for i in rng.choice(base_pool, size=size, replace=False)]
        present = set(basket)
        for i in list(basket):
            j = partner.get(i)
            if j is not None and j not in present and rng.random() < spec.boost:
                basket.append(j)
                present.add(j)
        noise_hits = rng.random(spec.noise_items) < spec.noise_prob
        basket.extend(int(i) for i in np.flatnonzero(noise_hits))
        order = rng.permutation(len(basket))
        user = int(rng.integers(spec.n_users))
        corpus.transactions.append(
            Transaction(f"t{t:0{twidth}d}", f"u{user:0{uwidth}d}", [refs[basket[k]] for k in order])
        )
    return corpus


def read_synth_spec(src: TextIO) -> SynthSpec:
    from neatrec.config import parse_kv

    return SynthSpec.from_mapping(parse_kv(src.read()))


def corpus_from_text(text: str, delimiter: str = ",") -> TransactionCorpus:
    """Convenience wrapper for in-memory fixtures."""
    return ingest_transactions(io.BytesIO(text.encode("utf-8")), delimiter)


__all__ = [
    "CoPurchasePair",
    "CoPurchaseStats",
    "CorpusError",
    "ItemRef",
    "SynthSpec",
    "Transaction",
    "TransactionCorpus",
    "build_stats",
    "filter_same_category",
    "generate_synthetic",
    "ingest_transactions",
    "sample_pairs",
]
