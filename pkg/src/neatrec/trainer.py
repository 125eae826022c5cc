"""Margin-based training of Gaussian item embeddings, optionally with BPR user terms.

Per co-purchase record ``(q, v)`` with negatives ``v'_1..v'_k``::

    L_item = sum_k max(0, margin - logE(q, v) + logE(q, v'_k))

and in ``neat-bpr`` mode, for the record's user ``u`` and user negatives
``q'``, ``v'`` (items ``u`` never bought)::

    L = L_item + (1 - sigmoid(theta_u . (mu_q - mu_q'))) + (1 - sigmoid(theta_u . (mu_v - mu_v')))

Records are shuffled once per epoch and cut into mini-batches; a batch is the
unit of loss reporting, divergence checks and work handed to a thread. Inside
a batch each record's gradient is applied as soon as it is computed, followed
by the variance clamp. Evaluating a whole batch at its starting parameters
instead diverges at the default rate, because items that recur within a batch
receive the same stale step many times over.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence, TextIO

import numpy as np

from neatrec import kernels
from neatrec.corpus import CoPurchasePair, CoPurchaseStats, build_stats
from neatrec.gaussian import (
    DEFAULT_VAR_MAX,
    DEFAULT_VAR_MIN,
    EmbeddingTable,
    GaussianEmbedding,
    init_table,
    log_expected_likelihood,
)

logger = logging.getLogger(__name__)

MODES = ("neat", "neat-bpr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    margin: float = 0.5
    dim: int = 100
    epochs: int = 5
    learning_rate: float = 0.05
    batch_size: int = 128
    num_negatives: int = 5
    window: int = 5
    mode: str = "neat"
    seed: int = 0
    var_min: float = DEFAULT_VAR_MIN
    var_max: float = DEFAULT_VAR_MAX
    init_scale: float | None = None
    max_retries: int = 50
    threads: int = 1
    deterministic: bool = True

    def __post_init__(self) -> None:
        self.mode = self.mode.lower().replace("_", "-")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("dim", "epochs", "batch_size", "num_negatives", "window", "max_retries", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.var_min <= self.var_max:
            raise ValueError("need 0 < var_min <= var_max")

    @property
    def bpr(self) -> bool:
        return self.mode == "neat-bpr"

    @classmethod
    def from_mapping(cls, values: dict, base: TrainConfig | None = None) -> TrainConfig:
        """Overlay string or typed ``values`` onto ``base`` (or the defaults)."""
        current = asdict(base) if base is not None else {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            if raw is None:
                continue
            current[key] = _coerce(types[key], raw)
        return cls(**current)


def _coerce(kind: str, raw):
    if not isinstance(raw, str):
        return raw
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind.startswith("float"):
        return None if raw.strip().lower() == "none" else float(raw)
    return raw


@dataclass
class TrainingSample:
    query: str
    positive: str
    negatives: Sequence[str]
    user: str | None = None
    query_negative: str | None = None
    positive_negative: str | None = None


# --- reference losses and gradients (single sample, plain numpy) -------------


def item_margin_loss(q: GaussianEmbedding, v: GaussianEmbedding, v_neg: GaussianEmbedding,
                     margin: float) -> float:
    return max(0.0, margin - log_expected_likelihood(q, v) + log_expected_likelihood(q, v_neg))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def bpr_loss(theta: np.ndarray, pos_mean: np.ndarray, neg_mean: np.ndarray) -> float:
    if not theta.shape == pos_mean.shape == neg_mean.shape:
        raise ValueError("dimension mismatch")
    return 1.0 - _sigmoid(float(theta @ pos_mean - theta @ neg_mean))


def sample_loss(sample: TrainingSample, table: EmbeddingTable, config: TrainConfig) -> float:
    q = table.item(sample.query)
    v = table.item(sample.positive)
    total = sum(item_margin_loss(q, v, table.item(n), config.margin) for n in sample.negatives)
    if config.bpr:
        theta = table.user(sample.user)
        total += bpr_loss(theta, q.mean, table.item(sample.query_negative).mean)
        total += bpr_loss(theta, v.mean, table.item(sample.positive_negative).mean)
    return total


def _grad_log_el(a: GaussianEmbedding, b: GaussianEmbedding):
    """Partials of logE(a, b) w.r.t. (mu_a, mu_b, var_a or var_b)."""
    delta = a.mean - b.mean
    s = a.variance + b.variance
    dvar = -a.dim / (2.0 * s) + float(delta @ delta) / (2.0 * s * s)
    return -delta / s, delta / s, dvar


def gradients(sample: TrainingSample, table: EmbeddingTable, config: TrainConfig) -> dict:
    """Sparse partial derivatives of :func:`sample_loss`.

    Keys are ``("mean", item)``, ``("var", item)`` and ``("theta", user)``.
    A hinge at exactly zero contributes nothing.
    """
    grads: dict = {}

    def add(key, value):
        grads[key] = grads[key] + value if key in grads else value

    q = table.item(sample.query)
    v = table.item(sample.positive)
    pos_mq, pos_mv, pos_var = _grad_log_el(q, v)
    pos_le = log_expected_likelihood(q, v)
    for name in sample.negatives:
        n = table.item(name)
        if config.margin - pos_le + log_expected_likelihood(q, n) <= 0.0:
            continue
        neg_mq, neg_mn, neg_var = _grad_log_el(q, n)
        add(("mean", sample.query), neg_mq - pos_mq)
        add(("mean", sample.positive), -pos_mv)
        add(("mean", name), neg_mn)
        add(("var", sample.query), neg_var - pos_var)
        add(("var", sample.positive), -pos_var)
        add(("var", name), neg_var)

    if config.bpr:
        theta = table.user(sample.user)
        for pos, neg in ((sample.query, sample.query_negative),
                         (sample.positive, sample.positive_negative)):
            diff = table.item(pos).mean - table.item(neg).mean
            sg = _sigmoid(float(theta @ diff))
            g = -sg * (1.0 - sg)
            add(("theta", sample.user), g * diff)
            add(("mean", pos), g * theta)
            add(("mean", neg), -g * theta)
    return grads


# --- negative sampling -------------------------------------------------------


class RejectionSampler:
    """Draws candidates ~ ``weights`` while rejecting excluded (row, candidate) keys.

    Keys are encoded ``row * n_candidates + candidate``. Small key spaces are
    screened through a dense mask, large ones through a sorted key array.
    Rows whose every weighted candidate is excluded skip the retry loop: the
    outcome is the same as a raw draw after exhausting retries.
    """

    DENSE_LIMIT = 50_000_000

    def __init__(self, weights: np.ndarray, excluded: np.ndarray, max_retries: int = 50,
                 n_rows: int | None = None):
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not total > 0:
            raise ValueError("sampling weights must have positive mass")
        self.n = len(weights)
        self.probabilities = weights / total
        self.cdf = np.cumsum(self.probabilities)
        self.cdf[-1] = 1.0
        self.max_retries = max_retries
        excluded = np.unique(np.asarray(excluded, dtype=np.int64))
        if n_rows is None:
            n_rows = int(excluded.max() // self.n + 1) if len(excluded) else 1
        self.n_rows = n_rows
        if n_rows * self.n <= self.DENSE_LIMIT:
            self.mask = np.zeros(n_rows * self.n, dtype=bool)
            self.mask[excluded] = True
            self.keys = None
        else:
            self.mask = None
            self.keys = excluded
        # probability mass left after exclusion, per row
        blocked_mass = np.bincount(
            excluded // self.n, weights=self.probabilities[excluded % self.n], minlength=n_rows
        )
        self.hopeless = blocked_mass >= 1.0 - 1e-12

    def _blocked(self, rows: np.ndarray, cand: np.ndarray) -> np.ndarray:
        keys = rows * self.n + cand
        if self.mask is not None:
            return self.mask[keys]
        if len(self.keys) == 0:
            return np.zeros(len(rows), dtype=bool)
        pos = np.searchsorted(self.keys, keys)
        pos[pos == len(self.keys)] = 0
        return self.keys[pos] == keys

    def _raw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.searchsorted(self.cdf, rng.random(size), side="right").clip(max=self.n - 1)

    def draw(self, rows: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """One candidate per row; returns ``(candidates, n_exhausted)``."""
        rows = np.asarray(rows, dtype=np.int64)
        out = self._raw(rng, len(rows))
        blocked = self._blocked(rows, out)
        hopeless = blocked & self.hopeless[rows]
        pending = np.flatnonzero(blocked & ~hopeless)
        for _ in range(self.max_retries):
            if len(pending) == 0:
                break
            out[pending] = self._raw(rng, len(pending))
            pending = pending[self._blocked(rows[pending], out[pending])]
        return out, len(pending) + int(hopeless.sum())


class NegativeSampler:
    """Unigram^0.75 negatives that were never co-purchased with the query."""

    def __init__(self, stats: CoPurchaseStats, catalog: Sequence[str], seed: int = 0,
                 power: float = 0.75, max_retries: int = 50):
        self.items = sorted(catalog)
        if len(self.items) < 2:
            raise ValueError("catalog needs at least two items to draw a negative")
        self.index = {item: i for i, item in enumerate(self.items)}
        counts = np.array([stats.marginal.get(i, 0) for i in self.items], dtype=np.float64)
        weights = counts**power if counts.sum() > 0 else np.ones(len(self.items))
        self.sampler = RejectionSampler(
            weights, item_exclusion_keys(stats, self.index), max_retries, n_rows=len(self.items)
        )
        self.rng = np.random.default_rng(seed)

    @property
    def probabilities(self) -> np.ndarray:
        return self.sampler.probabilities

    def draw(self, query: str) -> str:
        row = np.array([self.index[query]])
        out, exhausted = self.sampler.draw(row, self.rng)
        if exhausted:
            logger.warning("no valid negative for %s after %d retries", query, self.sampler.max_retries)
        return self.items[int(out[0])]


def item_exclusion_keys(stats: CoPurchaseStats, index: dict[str, int]) -> np.ndarray:
    n = len(index)
    keys = [index[q] * n + index[r] for q, r in stats.pair_freq if q in index and r in index]
    keys.extend(i * n + i for i in range(n))
    return np.array(keys, dtype=np.int64)


def negative_sampler(stats: CoPurchaseStats, catalog: Sequence[str], seed: int = 0,
                     max_retries: int = 50) -> NegativeSampler:
    return NegativeSampler(stats, catalog, seed, max_retries=max_retries)


# --- training loop -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wallclock_seconds: float


@dataclass
class TrainResult:
    table: EmbeddingTable
    trace: list[EpochRecord] = field(default_factory=list)
    backend: str = kernels.BACKEND


def write_trace(trace: Sequence[EpochRecord], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("epoch", "mean_loss", "wallclock_seconds"))
    for rec in trace:
        writer.writerow((rec.epoch, repr(rec.mean_loss), f"{rec.wallclock_seconds:.3f}"))


class _Batches:
    """Epoch-level index arrays sliced into mini-batches."""

    def __init__(self, q, v, neg, user, qneg, vneg, batch_size):
        self.arrays = (q, v, neg, user, qneg, vneg)
        self.batch_size = batch_size
        self.n = len(q)

    def __len__(self):
        return -(-self.n // self.batch_size)

    def __getitem__(self, b):
        sl = slice(b * self.batch_size, (b + 1) * self.batch_size)
        q, v, neg, user, qneg, vneg = self.arrays
        if len(user):
            return q[sl], v[sl], neg[sl], user[sl], qneg[sl], vneg[sl]
        return q[sl], v[sl], neg[sl], user, qneg, vneg


def train(
    pairs: Sequence[CoPurchasePair],
    config: TrainConfig | None = None,
    catalog: Sequence[str] | None = None,
    backend: str | None = None,
) -> TrainResult:
    """Mini-batch SGD over shuffled co-purchase records.

    Every item in ``catalog`` (default: items seen in ``pairs``) gets an
    embedding. Negatives are re-drawn each epoch. With ``deterministic`` or
    a single thread the run is bit-reproducible under ``config.seed``;
    otherwise batches are spread over ``threads`` workers that update the
    shared arrays without locks.
    """
    config = config or TrainConfig()
    if not pairs:
        raise ValueError("cannot train on an empty pair set")
    step_fn = kernels.get_backend(backend)
    backend_name = "python" if step_fn is kernels.python_sgd_batch else "compiled"

    items = sorted(set(catalog or ()) | {p.query for p in pairs} | {p.rec for p in pairs})
    users = sorted({p.user for p in pairs}) if config.bpr else []
    table = init_table(items, users, config.dim, config.seed, config.init_scale)
    idx = table.item_index
    q_all = np.fromiter((idx[p.query] for p in pairs), dtype=np.int64, count=len(pairs))
    v_all = np.fromiter((idx[p.rec] for p in pairs), dtype=np.int64, count=len(pairs))

    stats = build_stats(pairs)
    neg_sampler = NegativeSampler(stats, items, max_retries=config.max_retries)

    empty = np.empty(0, dtype=np.int64)
    if config.bpr:
        uidx = table.user_index
        u_all = np.fromiter((uidx[p.user] for p in pairs), dtype=np.int64, count=len(pairs))
        n = len(items)
        bought = np.unique(np.concatenate([u_all * n + q_all, u_all * n + v_all]))
        user_sampler = RejectionSampler(neg_sampler.probabilities, bought, config.max_retries,
                                        n_rows=len(users))
    epoch_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])

    workers = 1 if config.deterministic else config.threads
    # every record takes a full-rate step at the parameters left by the one before
    step = config.learning_rate
    result = TrainResult(table, backend=backend_name)
    started = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = epoch_rng.permutation(len(pairs))
        q, v = q_all[perm], v_all[perm]
        rows = np.repeat(q, config.num_negatives)
        neg, exhausted = neg_sampler.sampler.draw(rows, epoch_rng)
        neg = neg.reshape(len(q), config.num_negatives)
        if config.bpr:
            user = u_all[perm]
            qneg, ex_q = user_sampler.draw(user, epoch_rng)
            vneg, ex_v = user_sampler.draw(user, epoch_rng)
            exhausted += ex_q + ex_v
        else:
            user = qneg = vneg = empty
        if exhausted:
            logger.warning("epoch %d: %d negatives kept after %d rejected retries",
                           epoch, exhausted, config.max_retries)
        batches = _Batches(q, v, neg, user, qneg, vneg, config.batch_size)
        losses = _run_epoch(step_fn, table, batches, config, step, workers)
        mean_loss = float(np.mean(losses))
        result.trace.append(EpochRecord(epoch, mean_loss, time.perf_counter() - started))
        logger.info("epoch %d mean batch loss %.6f", epoch, mean_loss)
    return result


def _run_epoch(step_fn, table: EmbeddingTable, batches: _Batches, config: TrainConfig,
               step: float, workers: int) -> np.ndarray:
    losses = np.zeros(len(batches))

    def run(shard: range) -> None:
        slot = np.full(len(table.item_ids), -1, dtype=np.int64)
        uslot = np.full(max(len(table.user_ids), 1), -1, dtype=np.int64)
        for b in shard:
            q, v, neg, user, qneg, vneg = batches[b]
            loss, bad = step_fn(table.means, table.variances, table.theta, q, v, neg,
                                user, qneg, vneg, config.margin, step,
                                config.var_min, config.var_max, slot, uslot)
            if bad:
                raise TrainingDiverged(f"non-finite parameters after batch {b}")
            losses[b] = loss / len(q)

    if workers == 1:
        run(range(len(batches)))
    else:
        with ThreadPoolExecutor(workers) as pool:
            shards = [range(w, len(batches), workers) for w in range(workers)]
            for fut in [pool.submit(run, s) for s in shards]:
                fut.result()
    return losses
