"""Acceptance suite: one or more tests per criterion, tagged with ``criterion``.

The planted-corpus checks (6, 7, 9) run the real pipeline at full size and
take several minutes on one core; the trained models are shared across tests.
"""

from __future__ import annotations

import filecmp
import math
import random
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from neatrec import cli, corpus, gaussian, labelgen, trainer
from neatrec.evaluator import hr_at_k, ndcg_at_k
from neatrec.gaussian import GaussianEmbedding, log_expected_likelihood
from neatrec.trainer import TrainConfig, TrainingSample

criterion = pytest.mark.criterion
SEEDS = (0, 1, 2)
HOLDOUT_TRANSACTIONS = 20_000


# --- 1. closed form vs adaptive quadrature ------------------------------------------


def _quad_log_el(m1, v1, m2, v2):
    """log of the integral of N(x; m1, v1) N(x; m2, v2), integrated numerically.

    The integrand is rescaled by its maximum over a dense grid so that far
    apart, narrow pairs do not underflow; the shift is added back in log space.
    """
    def log_f(x):
        return (-0.5 * math.log(2 * math.pi * v1) - (x - m1) ** 2 / (2 * v1)
                - 0.5 * math.log(2 * math.pi * v2) - (x - m2) ** 2 / (2 * v2))

    width = 12 * math.sqrt(max(v1, v2))
    lo, hi = min(m1, m2) - width, max(m1, m2) + width
    grid = np.linspace(lo, hi, 4001)
    peak = float(grid[int(np.argmax(log_f(grid)))])
    shift = log_f(peak)
    val, _ = integrate.quad(lambda x: math.exp(log_f(x) - shift), lo, hi,
                            points=[peak, m1, m2], epsabs=0, epsrel=1e-13, limit=500)
    return math.log(val) + shift


@criterion(1, "closed-form expected likelihood matches adaptive quadrature (1000 pairs, 1e-6 abs, <10 s)")
def test_c1_expected_likelihood_oracle():
    rng = np.random.default_rng(20)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        m1, m2 = rng.uniform(-5, 5, 2)
        v1, v2 = np.exp(rng.uniform(math.log(0.01), math.log(10), 2))
        closed = log_expected_likelihood(GaussianEmbedding(np.array([m1]), v1),
                                         GaussianEmbedding(np.array([m2]), v2))
        worst = max(worst, abs(closed - _quad_log_el(m1, v1, m2, v2)))
    elapsed = time.perf_counter() - started
    print(f"max |closed - quad| = {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-6
    assert elapsed < 10


# --- 2. gradients vs central differences ---------------------------------------------


def _random_state(rng, d, bpr):
    items = [f"i{k}" for k in range(6)]
    table = gaussian.init_table(items, ["u0"], d=d)
    table.means[:] = rng.normal(scale=rng.uniform(0.05, 1.0), size=table.means.shape)
    table.variances[:] = rng.uniform(0.1, 3.0, size=len(items))
    table.theta[:] = rng.normal(size=table.theta.shape)
    negs = [f"i{k}" for k in rng.integers(2, 6, size=3)]
    sample = TrainingSample("i0", "i1", negs, "u0" if bpr else None,
                            "i4" if bpr else None, "i5" if bpr else None)
    margin = float(rng.uniform(0.1, 5.0))
    return table, sample, TrainConfig(dim=d, margin=margin, mode="neat-bpr" if bpr else "neat")


def _near_kink(table, sample, config, tol=1e-3):
    q, v = table.item(sample.query), table.item(sample.positive)
    pos = log_expected_likelihood(q, v)
    return any(abs(config.margin - pos + log_expected_likelihood(q, table.item(n))) < tol
               for n in sample.negatives)


def _view(table, key):
    kind, name = key
    if kind == "mean":
        return table.means[table.index_of(name)]
    if kind == "var":
        i = table.index_of(name)
        return table.variances[i:i + 1]
    return table.theta[table.user_row(name)]


@criterion(2, "analytic gradients match central differences (500 samples, 1e-4 rel, <30 s)")
def test_c2_gradient_correctness():
    rng = np.random.default_rng(21)
    started = time.perf_counter()
    h = 1e-5
    checked = skipped = 0
    worst = 0.0
    while checked < 500:
        d = (2, 10)[checked % 2]
        bpr = (checked // 2) % 2 == 1
        table, sample, config = _random_state(rng, d, bpr)
        if _near_kink(table, sample, config):
            skipped += 1
            continue
        grads = trainer.gradients(sample, table, config)
        # every parameter the sample touches, including those with zero gradient
        keys = {("mean", i) for i in [sample.query, sample.positive, *sample.negatives]}
        keys |= {("var", name) for _, name in keys}
        if bpr:
            keys |= {("mean", sample.query_negative), ("mean", sample.positive_negative), ("theta", sample.user)}
        for key in keys:
            view = _view(table, key)
            analytic = np.atleast_1d(grads.get(key, np.zeros(view.shape)))
            for j in range(view.shape[0]):
                orig = view[j]
                view[j] = orig + h
                up = trainer.sample_loss(sample, table, config)
                view[j] = orig - h
                down = trainer.sample_loss(sample, table, config)
                view[j] = orig
                numeric = (up - down) / (2 * h)
                scale = max(abs(analytic[j]), abs(numeric))
                if scale == 0.0:
                    continue
                err = abs(analytic[j] - numeric) / scale
                worst = max(worst, err)
                assert err <= 1e-4, (key, j, analytic[j], numeric)
        checked += 1
    elapsed = time.perf_counter() - started
    print(f"{checked} samples ({skipped} near-kink skipped), max rel err {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 30


# --- 3. chi-squared vs raw-count oracle ---------------------------------------------


def _oracle_labels(pairs, p_value):
    """Exact rational chi-squared from raw records; independent of the library path."""
    n = len(pairs)
    joint, marg = {}, {}
    for q, r, _ in pairs:
        joint[(q, r)] = joint.get((q, r), 0) + 1
        marg[q] = marg.get(q, 0) + 1
    threshold = Fraction(labelgen.threshold_for(p_value))
    out = {}
    for (q, r), o1 in joint.items():
        fi, fj = marg[q], marg[r]
        denom = fi * fj * (n - fi) * (n - fj)
        if denom == 0:
            continue
        o2, o3, o4 = fj - o1, fi - o1, n - fi - fj + o1
        chi2 = Fraction(n * (o1 * o4 - o2 * o3) ** 2, denom)
        if chi2 > threshold:
            part = "positive" if o1 * n > fi * fj else "negative"
        else:
            part = "independent"
        out[(q, r)] = (part, chi2)
    return out


def _random_corpus_pairs(rng: random.Random, limit=200):
    n_items = rng.randint(3, 15)
    lines = [",".join(corpus.HEADER)]
    t = 0
    while True:
        size = rng.randint(1, min(6, n_items))
        basket = rng.sample(range(n_items), size)
        candidate = lines + [f"u{t % 4},t{t},{p},i{b},c{b}" for p, b in enumerate(basket)]
        pairs = corpus.sample_pairs(corpus.corpus_from_text("\n".join(candidate) + "\n"), window=5)
        if len(pairs) > limit:
            break
        lines, t = candidate, t + 1
    return corpus.sample_pairs(corpus.corpus_from_text("\n".join(lines) + "\n"), window=5)


@criterion(3, "chi-squared labels equal a raw-count reimplementation; hand table 429.83, e1 = 2")
def test_c3_chi_squared_brute_force():
    rng = random.Random(23)
    compared = 0
    for _ in range(100):
        pairs = _random_corpus_pairs(rng)
        if not pairs:
            continue
        stats = corpus.build_stats(pairs)
        for p in (0.05, 0.01, 0.001):
            res = labelgen.generate_labels(stats, p)
            got = {}
            for part, recs in (("positive", res.qualified), ("negative", res.negatively_dependent),
                               ("independent", res.independent)):
                got.update({(r.query, r.rec): (part, r.chi2) for r in recs})
            expected = _oracle_labels(pairs, p)
            assert {k: v[0] for k, v in got.items()} == {k: v[0] for k, v in expected.items()}
            for key, (_, chi2) in got.items():
                # identical up to the last bits of float rounding
                assert chi2 == pytest.approx(float(expected[key][1]), rel=1e-12, abs=1e-12)
            compared += len(got)
    assert compared > 1000

    table = labelgen.ContingencyTable.from_counts(30, 40, 50, 1000)
    assert table.e1 == 2.0
    assert abs(labelgen.chi_squared(table) - 429.83) <= 0.01


# --- 4. thresholds ------------------------------------------------------------------------


@criterion(4, "critical values: 0.001 -> [10.827, 10.829], 0.05 -> 3.841, 0.01 -> 6.635")
def test_c4_threshold_fidelity():
    assert 10.827 <= labelgen.threshold_for(0.001) <= 10.829
    assert abs(labelgen.threshold_for(0.05) - 3.841) <= 0.001
    assert abs(labelgen.threshold_for(0.01) - 6.635) <= 0.001


# --- 5. nesting ---------------------------------------------------------------------------


def _nested(stats):
    sets = [{(r.query, r.rec) for r in labelgen.generate_labels(stats, p).qualified}
            for p in (0.001, 0.01, 0.05)]
    return sets[0] <= sets[1] <= sets[2], [len(s) for s in sets]


@criterion(5, "qualified(0.001) within qualified(0.01) within qualified(0.05)")
@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.tuples(st.integers(0, 9), st.integers(0, 9)).filter(lambda t: t[0] < t[1]),
                       st.integers(1, 60), min_size=1))
def test_c5_nesting_random_stats(counts):
    freq = {}
    for (a, b), c in counts.items():
        freq[(f"i{a}", f"i{b}")] = freq[(f"i{b}", f"i{a}")] = c
    assert _nested(corpus.stats_from_freq(freq))[0]


@criterion(5, "qualified(0.001) within qualified(0.01) within qualified(0.05)")
def test_c5_nesting_planted(planted):
    ok, sizes = _nested(planted.train_stats)
    print(f"qualified label counts at p=0.001/0.01/0.05: {sizes}")
    assert ok and sizes[0] < sizes[2]


# --- 8. metrics ---------------------------------------------------------------------------


@criterion(8, "HR/NDCG examples exact; NDCG <= HR on 10^4 random rankings")
def test_c8_metric_suite():
    ranked = [f"v{i}" for i in range(1, 21)]
    assert hr_at_k(ranked, "v1", 1) == 1 and ndcg_at_k(ranked, "v1", 1) == 1.0
    assert ndcg_at_k(ranked, "v3", 3) == 0.5
    assert hr_at_k(ranked, "absent", 20) == 0 and ndcg_at_k(ranked, "absent", 20) == 0.0
    rng = np.random.default_rng(28)
    for _ in range(10_000):
        n = int(rng.integers(1, 50))
        ranking = [str(x) for x in rng.permutation(n)]
        label = str(int(rng.integers(0, n + 5)))
        k = int(rng.integers(1, 25))
        assert ndcg_at_k(ranking, label, k) <= hr_at_k(ranking, label, k)


# --- planted corpus pipeline (6, 7, 9) ----------------------------------------------


class PlantedRun:
    """Outputs of one full CLI pipeline run on the planted corpus."""

    def __init__(self, root: Path, seed: int):
        self.root, self.seed = root, seed
        self.spec = corpus.SynthSpec()
        spec_file = root / "synth.cfg"
        spec_file.write_text("".join(f"{k} = {v}\n" for k, v in vars(self.spec).items()))
        holdout = root / "holdout.cfg"
        holdout.write_text(spec_file.read_text() + f"n_transactions = {HOLDOUT_TRANSACTIONS}\n")

        started = time.perf_counter()
        self._run("synth", "--spec", spec_file, "--out", root / "train.csv", "--seed", seed)
        self._run("synth", "--spec", holdout, "--out", root / "holdout.csv", "--seed", seed + 1000)
        self._run("ingest", "--input", root / "train.csv", "--out-dir", root / "train", "--filter-same-category")
        self._run("ingest", "--input", root / "holdout.csv", "--out-dir", root / "test", "--filter-same-category")
        self._run("train", "--data", root / "train", "--out-dir", root / "model", "--seed", seed, "--deterministic")
        self._run("labelgen", "--stats", root / "test" / "stats.tsv", "--p-value", "0.001",
                  "--out", root / "labels.tsv")
        self.labels = self._planted_labels()
        self._run("eval", "--labels", root / "planted_labels.tsv", "--data", root / "train",
                  "--model", root / "model", "--method", "pop,popco,neat", "--out", root / "report.csv")
        self.seconds = time.perf_counter() - started

        with open(root / "train" / "stats.tsv") as fh:
            self.train_stats = corpus.read_stats(fh)
        with open(root / "model" / "items.emb") as fh:
            self.table = gaussian.load_table(fh)
        self.report = {}
        for line in (root / "report.csv").read_text().splitlines()[1:]:
            method, k, hr, ndcg, *_ = line.split(",")
            self.report[(method, int(k))] = (float(hr), float(ndcg))
        self.losses = [float(line.split(",")[1]) for line in
                       (root / "model" / "loss.csv").read_text().splitlines()[1:]]

    @staticmethod
    def _run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv

    def _planted_labels(self):
        """Qualified held-out labels that are planted pairs; noise items never appear."""
        planted = {frozenset(p) for p in self.spec.planted()}
        noise = set(self.spec.noise_ids())
        with open(self.root / "labels.tsv") as fh:
            meta, records = labelgen.read_labels(fh)
        keep = [r for r in records if frozenset((r.query, r.rec)) in planted]
        assert not any({r.query, r.rec} & noise for r in keep)
        with open(self.root / "planted_labels.tsv", "w") as fh:
            labelgen.write_labels(keep, meta["p_value"], meta["threshold"], fh)
        return keep

    def group_variances(self):
        idx = self.table.item_index
        noise = [idx[i] for i in self.spec.noise_ids()]
        planted = [idx[i] for pair in self.spec.planted() for i in pair]
        return float(self.table.variances[noise].mean()), float(self.table.variances[planted].mean())


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    return PlantedRun(tmp_path_factory.mktemp("planted_seed0"), seed=0)


@pytest.fixture(scope="module")
def planted_again(tmp_path_factory, planted):
    return PlantedRun(tmp_path_factory.mktemp("planted_seed0_again"), seed=0)


def _train_seed(seed: int) -> tuple[float, float]:
    spec = corpus.SynthSpec()
    data = corpus.generate_synthetic(spec, seed)
    pairs = corpus.filter_same_category(corpus.sample_pairs(data), data.categories)
    table = trainer.train(pairs, TrainConfig(seed=seed)).table
    idx = table.item_index
    noise = [idx[i] for i in spec.noise_ids()]
    members = [idx[i] for pair in spec.planted() for i in pair]
    return float(table.variances[noise].mean()), float(table.variances[members].mean())


@pytest.mark.slow
@criterion(6, "planted corpus: NEAT >= PopCo >= Pop at HR@5/NDCG@5; Pop HR@1 = 0; full run < 10 min")
def test_c6_noise_resistance_ordering(planted):
    r = planted.report
    print(f"{len(planted.labels)} planted labels; pipeline {planted.seconds:.0f}s")
    for method in ("neat", "popco", "pop"):
        print(f"  {method:6s} HR@5={r[(method, 5)][0]:.4f} NDCG@5={r[(method, 5)][1]:.4f} HR@1={r[(method, 1)][0]:.4f}")
    assert len(planted.labels) >= 25
    for i in (0, 1):
        assert r[("neat", 5)][i] >= r[("popco", 5)][i] >= r[("pop", 5)][i]
    assert r[("pop", 1)][0] == 0.0
    assert planted.seconds < 600


@pytest.mark.slow
@criterion(7, "mean variance of popularity-noise items > planted-pair items, on each of 3 seeds")
def test_c7_variance_popularity(planted):
    results = {0: planted.group_variances()}
    for seed in SEEDS[1:]:
        results[seed] = _train_seed(seed)
    for seed, (noise, members) in results.items():
        print(f"seed {seed}: noise mean var {noise:.4f} vs planted mean var {members:.4f}")
    assert all(noise > members for noise, members in results.values())


@pytest.mark.slow
@criterion(9, "same seed, deterministic mode: byte-identical embeddings and evaluation CSV")
def test_c9_determinism(planted, planted_again):
    for rel in ("model/items.emb", "report.csv", "labels.tsv", "train/stats.tsv"):
        assert filecmp.cmp(planted.root / rel, planted_again.root / rel, shallow=False), rel


@pytest.mark.slow
def test_planted_training_loss_decreases(planted):
    assert planted.losses[-1] < planted.losses[0]
    print("epoch losses:", ", ".join(f"{x:.4f}" for x in planted.losses))


@pytest.mark.slow
def test_planted_recommend_finds_partner(planted, capsys):
    a, b = planted.spec.planted()[0]
    assert cli.main(["recommend", "--model", str(planted.root / "model"), "--query", a, "--n", "3",
                     "--data", str(planted.root / "train")]) == 0
    top = [line.split("\t")[0] for line in capsys.readouterr().out.splitlines()]
    assert b in top
