"""Spherical Gaussian item embeddings and user preference vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_VAR_MIN = 1e-3
DEFAULT_VAR_MAX = 10.0


@dataclass
class GaussianEmbedding:
    """Mean vector plus a single variance shared by every dimension."""

    mean: np.ndarray
    variance: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def log_expected_likelihood(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Log of the integral of the product of the two densities.

    With spherical covariances this is
    ``-(d/2) log(2 pi s) - |mu_a - mu_b|^2 / (2 s)`` for ``s = var_a + var_b``.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    s = a.variance + b.variance
    if not s > 0:
        raise ValueError(f"total variance must be positive, got {s}")
    diff = a.mean - b.mean
    return -0.5 * a.dim * (LOG_2PI + math.log(s)) - float(diff @ diff) / (2.0 * s)


def cosine_score(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    na = float(np.linalg.norm(a.mean))
    nb = float(np.linalg.norm(b.mean))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero-norm mean")
    return float(a.mean @ b.mean) / (na * nb)


class UnknownIdError(KeyError):
    pass


@dataclass
class EmbeddingTable:
    """Dense parameter arrays with id lookups.

    Rows of ``means``/``variances`` follow ``item_ids``; rows of ``theta``
    follow ``user_ids``. The arrays are the training state: the SGD kernels
    update them in place.
    """

    item_ids: list[str]
    means: np.ndarray
    variances: np.ndarray
    user_ids: list[str] = field(default_factory=list)
    theta: np.ndarray | None = None
    item_index: dict[str, int] = field(init=False, repr=False)
    user_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.item_index = {item: i for i, item in enumerate(self.item_ids)}
        self.user_index = {user: i for i, user in enumerate(self.user_ids)}
        if self.theta is None:
            self.theta = np.zeros((len(self.user_ids), self.dim))
        if self.means.shape != (len(self.item_ids), self.dim):
            raise ValueError("means shape does not match item_ids")
        if self.variances.shape != (len(self.item_ids),):
            raise ValueError("variances shape does not match item_ids")
        if self.theta.shape != (len(self.user_ids), self.dim):
            raise ValueError("theta shape does not match user_ids")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def index_of(self, item: str) -> int:
        try:
            return self.item_index[item]
        except KeyError:
            raise UnknownIdError(f"unknown item {item!r}") from None

    def user_row(self, user: str) -> int:
        try:
            return self.user_index[user]
        except KeyError:
            raise UnknownIdError(f"unknown user {user!r}") from None

    def item(self, item: str) -> GaussianEmbedding:
        i = self.index_of(item)
        return GaussianEmbedding(self.means[i], float(self.variances[i]))

    def user(self, user: str) -> np.ndarray:
        return self.theta[self.user_row(user)]

    def __contains__(self, item: str) -> bool:
        return item in self.item_index

    def copy(self) -> EmbeddingTable:
        return EmbeddingTable(
            list(self.item_ids),
            self.means.copy(),
            self.variances.copy(),
            list(self.user_ids),
            self.theta.copy(),
        )


def init_table(
    items: Iterable[str],
    users: Iterable[str] = (),
    d: int = 100,
    seed: int = 0,
    init_scale: float | None = None,
) -> EmbeddingTable:
    """Uniform means in ``[-init_scale, init_scale]``, unit variances.

    ``init_scale`` defaults to ``0.5 / d``. User vectors share the same scheme.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if init_scale is None:
        init_scale = 0.5 / d
    item_ids = list(items)
    user_ids = list(users)
    rng = np.random.default_rng(seed)
    means = rng.uniform(-init_scale, init_scale, size=(len(item_ids), d))
    theta = rng.uniform(-init_scale, init_scale, size=(len(user_ids), d))
    return EmbeddingTable(item_ids, means, np.ones(len(item_ids)), user_ids, theta)


# --- persistence -------------------------------------------------------------
# repr() of a float64 is the shortest string that round-trips exactly.


def _fmt(x: float) -> str:
    return repr(float(x))


def save_items(table: EmbeddingTable, out: TextIO) -> None:
    out.write(f"#dim={table.dim}\n")
    for item, var, mean in zip(table.item_ids, table.variances, table.means):
        out.write(f"{item}\t{_fmt(var)}\t{' '.join(map(_fmt, mean))}\n")


def save_users(table: EmbeddingTable, out: TextIO) -> None:
    out.write(f"#dim={table.dim}\n")
    for user, vec in zip(table.user_ids, table.theta):
        out.write(f"{user}\t{' '.join(map(_fmt, vec))}\n")


def _read_dim(src: TextIO) -> int:
    header = src.readline().strip()
    if not header.startswith("#dim="):
        raise ValueError("embedding file must start with '#dim=<d>'")
    return int(header[5:])


def load_table(items_src: TextIO, users_src: TextIO | None = None) -> EmbeddingTable:
    d = _read_dim(items_src)
    ids, variances, means = [], [], []
    for lineno, line in enumerate(items_src, start=2):
        item, var, vec = line.rstrip("\n").split("\t")
        row = [float(x) for x in vec.split()]
        if len(row) != d:
            raise ValueError(f"line {lineno}: expected {d} components, got {len(row)}")
        ids.append(item)
        variances.append(float(var))
        means.append(row)
    user_ids, theta = [], []
    if users_src is not None:
        if _read_dim(users_src) != d:
            raise ValueError("user file dimension differs from item file")
        for line in users_src:
            user, vec = line.rstrip("\n").split("\t")
            user_ids.append(user)
            theta.append([float(x) for x in vec.split()])
    return EmbeddingTable(
        ids,
        np.array(means, dtype=np.float64).reshape(len(ids), d),
        np.array(variances, dtype=np.float64),
        user_ids,
        np.array(theta, dtype=np.float64).reshape(len(user_ids), d),
    )
