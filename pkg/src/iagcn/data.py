"""Interaction datasets: split-file IO, synthetic block graphs, subsampling."""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

_log = logging.getLogger(__name__)


class DataWarning(UserWarning):
    """Raised (as a warning) when input data needed repair."""


class SplitFormatError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64).reshape(-1, 2)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class InteractionDataset:
    """Train/test user-item edges with dense 0-based ids.

    Edge arrays are ``(E, 2)`` int64 arrays of ``(user, item)`` rows and are
    read-only.
    """

    num_users: int
    num_items: int
    train_edges: np.ndarray
    test_edges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "train_edges", _frozen(self.train_edges))
        object.__setattr__(self, "test_edges", _frozen(self.test_edges))
        self.validate()

    def validate(self):
        for name, edges in (("train", self.train_edges), ("test", self.test_edges)):
            if len(edges) == 0:
                continue
            if edges.min() < 0:
                raise ValueError(f"{name} edges contain negative ids")
            if edges[:, 0].max() >= self.num_users or edges[:, 1].max() >= self.num_items:
                raise ValueError(f"{name} edges reference ids outside the id range")
            keys = _edge_keys(edges, self.num_items)
            if len(np.unique(keys)) != len(keys):
                raise ValueError(f"{name} edges contain duplicates")
        overlap = np.intersect1d(
            _edge_keys(self.train_edges, self.num_items),
            _edge_keys(self.test_edges, self.num_items),
        )
        if len(overlap):
            raise ValueError("train and test edges overlap")

    @property
    def num_interactions(self) -> int:
        return len(self.train_edges) + len(self.test_edges)

    def test_items_by_user(self) -> list[np.ndarray]:
        return _group(self.test_edges, self.num_users)

    def train_items_by_user(self) -> list[np.ndarray]:
        return _group(self.train_edges, self.num_users)


def _edge_keys(edges: np.ndarray, num_items: int) -> np.ndarray:
    return edges[:, 0] * np.int64(max(num_items, 1)) + edges[:, 1]


def _group(edges: np.ndarray, num_users: int) -> list[np.ndarray]:
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    bounds = np.searchsorted(e[:, 0], np.arange(num_users + 1))
    return [e[bounds[u] : bounds[u + 1], 1] for u in range(num_users)]


def parse_split_file(stream: TextIO | Iterable[str]) -> list[tuple[int, int]]:
    """Read ``user item item ...`` lines into a flat edge list, in file order.

    >>> parse_split_file(io.StringIO("0 3 7\\n5\\n"))
    [(0, 3), (0, 7)]
    """
    edges = []
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            ids = [int(t) for t in tokens]
        except ValueError:
            raise SplitFormatError(f"line {lineno}: non-integer token in {line.strip()!r}") from None
        if min(ids) < 0:
            raise SplitFormatError(f"line {lineno}: negative id in {line.strip()!r}")
        user = ids[0]
        edges.extend((user, item) for item in ids[1:])
    return edges


def serialize_split(edges: Iterable[tuple[int, int]]) -> str:
    """Inverse of :func:`parse_split_file`; consecutive edges of a user share a line."""
    lines: list[str] = []
    cur = None
    for u, i in edges:
        u, i = int(u), int(i)
        if u != cur:
            lines.append(str(u))
            cur = u
        lines[-1] += f" {i}"
    return "".join(line + "\n" for line in lines)


def _dedupe(edges: np.ndarray, num_items: int, label: str) -> np.ndarray:
    if len(edges) == 0:
        return edges
    keys = _edge_keys(edges, num_items)
    _, first = np.unique(keys, return_index=True)
    if len(first) < len(edges):
        warnings.warn(f"{label}: dropped {len(edges) - len(first)} duplicate edges", DataWarning, stacklevel=3)
    return edges[np.sort(first)]


def build_dataset(
    train: Iterable[tuple[int, int]] | np.ndarray,
    test: Iterable[tuple[int, int]] | np.ndarray,
    num_users: int | None = None,
    num_items: int | None = None,
) -> InteractionDataset:
    """Assemble a dataset, repairing duplicates and train/test overlap with warnings."""
    train = np.asarray(list(train) if not isinstance(train, np.ndarray) else train, dtype=np.int64).reshape(-1, 2)
    test = np.asarray(list(test) if not isinstance(test, np.ndarray) else test, dtype=np.int64).reshape(-1, 2)
    if len(train) == 0:
        raise ValueError("training set is empty")
    both = np.concatenate([train, test])
    if num_users is None:
        num_users = int(both[:, 0].max()) + 1
    if num_items is None:
        num_items = int(both[:, 1].max()) + 1
    train = _dedupe(train, num_items, "train")
    test = _dedupe(test, num_items, "test")
    clash = np.isin(_edge_keys(test, num_items), _edge_keys(train, num_items))
    if clash.any():
        warnings.warn(f"removed {int(clash.sum())} test edges also present in train", DataWarning, stacklevel=2)
        test = test[~clash]
    return InteractionDataset(num_users, num_items, train, test)


def load_dataset(train_path: str | Path, test_path: str | Path) -> InteractionDataset:
    for p in (train_path, test_path):
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    with open(train_path, encoding="utf-8", newline=None) as f:
        train = parse_split_file(f)
    with open(test_path, encoding="utf-8", newline=None) as f:
        test = parse_split_file(f)
    if not train:
        raise ValueError(f"training set is empty: {train_path}")
    ds = build_dataset(train, test)
    _log.info(
        "loaded %d users, %d items, %d train / %d test edges",
        ds.num_users, ds.num_items, len(ds.train_edges), len(ds.test_edges),
    )
    return ds


def write_dataset(ds: InteractionDataset, train_path: str | Path, test_path: str | Path):
    for edges, path in ((ds.train_edges, train_path), (ds.test_edges, test_path)):
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        Path(path).write_text(serialize_split(edges[order]), encoding="utf-8")


def _split_user(items: np.ndarray, rng: np.random.Generator, test_frac: float):
    items = rng.permutation(items)
    n_test = int(np.floor(test_frac * len(items) + 0.5))
    test, train = items[:n_test], items[n_test:]
    if len(train) == 0 and len(test) > 0:
        train, test = test[:1], test[1:]
    return np.sort(train), np.sort(test)


def _split_per_user(by_user, rng, test_frac):
    train, test = [], []
    for u, items in enumerate(by_user):
        tr, te = _split_user(np.asarray(items), rng, test_frac)
        train.append(np.column_stack([np.full(len(tr), u), tr]))
        test.append(np.column_stack([np.full(len(te), u), te]))
    return np.concatenate(train).astype(np.int64), np.concatenate(test).astype(np.int64)


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_blocks: int,
    p_in: float,
    p_out: float,
    seed: int,
    test_frac: float = 0.2,
) -> InteractionDataset:
    """Stochastic block bipartite graph split 80/20 per user.

    User ``u`` and item ``i`` share a community when
    ``u // (num_users // num_blocks) == i // (num_items // num_blocks)``.
    """
    if num_users < 1 or num_items < 1 or num_blocks < 1:
        raise ValueError("counts must be positive")
    if num_users % num_blocks or num_items % num_blocks:
        raise ValueError("num_blocks must divide both num_users and num_items")
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    rng = np.random.default_rng(seed)
    ub = np.arange(num_users) // (num_users // num_blocks)
    ib = np.arange(num_items) // (num_items // num_blocks)
    prob = np.where(ub[:, None] == ib[None, :], p_in, p_out)
    adj = rng.random((num_users, num_items)) < prob
    by_user = [np.flatnonzero(row) for row in adj]
    train, test = _split_per_user(by_user, rng, test_frac)
    return InteractionDataset(num_users, num_items, train, test)


def subsample_top_users(ds: InteractionDataset, num_users: int, seed: int, test_frac: float = 0.2) -> InteractionDataset:
    """Keep the most active users and the items they touch, relabel densely, re-split."""
    edges = np.concatenate([ds.train_edges, ds.test_edges])
    counts = np.bincount(edges[:, 0], minlength=ds.num_users)
    keep = np.sort(np.argsort(-counts, kind="stable")[:num_users])
    edges = edges[np.isin(edges[:, 0], keep)]
    users = np.searchsorted(keep, edges[:, 0])
    items_kept, items = np.unique(edges[:, 1], return_inverse=True)
    by_user = _group(np.column_stack([users, items]), len(keep))
    train, test = _split_per_user(by_user, np.random.default_rng(seed), test_frac)
    return InteractionDataset(len(keep), len(items_kept), train, test)
