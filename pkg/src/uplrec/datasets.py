"""Explicit-rating ingestion and semi-synthetic implicit-feedback generation.

Explicit star ratings are mapped to relevance probabilities, exposure is
defined by the rated/unrated status of each (user, item) cell, and clicks
are drawn as click = exposure * Bernoulli(relevance).  Generated datasets
keep the ground-truth relevance probabilities so estimators can be checked
against them later.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParseError

DATASET_FORMAT_VERSION = 1


@dataclass
class ExplicitRatings:
    """Sparse (user, item, rating) triplets with dense 0-based indices.

    ``user_ids`` / ``item_ids`` map each dense index back to the raw id it
    was remapped from, so reports can reference original identifiers.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    r_max: int = 5
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.int64)
        self.validate()

    def validate(self):
        if len(self.users) != len(self.items) or len(self.users) != len(self.ratings):
            raise ValueError("users/items/ratings length mismatch")
        if len(self.users) and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise ValueError("user index out of range")
        if len(self.items) and (self.items.min() < 0 or self.items.max() >= self.num_items):
            raise ValueError("item index out of range")
        if len(self.ratings) and (self.ratings.min() < 1 or self.ratings.max() > self.r_max):
            raise ValueError(f"rating outside [1, {self.r_max}]")
        codes = self.users * self.num_items + self.items
        if len(np.unique(codes)) != len(codes):
            raise IntegrityError("duplicate (user, item) pair")

    def __len__(self):
        return len(self.users)


def load_triplets(path, format="triplets", r_max=5) -> ExplicitRatings:
    """Load explicit ratings from disk.

    ``format="triplets"``: lines of "user<TAB>item<TAB>rating" with arbitrary
    integer ids, remapped to contiguous 0-based indices (sorted raw-id order).
    ``format="dense"``: whitespace-separated integer matrix, one row per user,
    0 meaning unrated; indices are the row/column positions.
    """
    path = Path(path)
    if format == "triplets":
        return _load_triplet_file(path, r_max)
    if format == "dense":
        return _load_dense_file(path, r_max)
    raise ValueError(f"unknown format {format!r}")


def _load_triplet_file(path: Path, r_max: int) -> ExplicitRatings:
    raw_users, raw_items, ratings = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                parts = line.split()
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            try:
                u, i, r = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer field in {line!r}") from None
            if not 1 <= r <= r_max:
                raise ParseError(path, lineno, f"rating {r} outside [1, {r_max}]")
            raw_users.append(u)
            raw_items.append(i)
            ratings.append(r)
    raw_users = np.asarray(raw_users, dtype=np.int64)
    raw_items = np.asarray(raw_items, dtype=np.int64)
    user_ids, users = np.unique(raw_users, return_inverse=True)
    item_ids, items = np.unique(raw_items, return_inverse=True)
    return ExplicitRatings(
        num_users=len(user_ids),
        num_items=len(item_ids),
        users=users,
        items=items,
        ratings=np.asarray(ratings),
        r_max=r_max,
        user_ids=user_ids,
        item_ids=item_ids,
    )


def _load_dense_file(path: Path, r_max: int) -> ExplicitRatings:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = [int(tok) for tok in line.split()]
            except ValueError:
                raise ParseError(path, lineno, "non-integer entry") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(path, lineno, f"expected {width} columns, got {len(row)}")
            for r in row:
                if not 0 <= r <= r_max:
                    raise ParseError(path, lineno, f"rating {r} outside [0, {r_max}]")
            rows.append(row)
    if not rows:
        raise ParseError(path, 1, "empty rating matrix")
    mat = np.asarray(rows, dtype=np.int64)
    users, items = np.nonzero(mat)
    return ExplicitRatings(
        num_users=mat.shape[0],
        num_items=mat.shape[1],
        users=users,
        items=items,
        ratings=mat[users, items],
        r_max=r_max,
        user_ids=np.arange(mat.shape[0]),
        item_ids=np.arange(mat.shape[1]),
    )


def align_index_spaces(a: ExplicitRatings, b: ExplicitRatings):
    """Remap two rating sets (e.g. train and test files) onto one shared
    0-based index space, using the union of their raw ids."""
    if a.user_ids is None or b.user_ids is None:
        raise ValueError("raw id mappings required for alignment")
    user_ids = np.union1d(a.user_ids, b.user_ids)
    item_ids = np.union1d(a.item_ids, b.item_ids)

    def remap(r: ExplicitRatings) -> ExplicitRatings:
        return ExplicitRatings(
            num_users=len(user_ids),
            num_items=len(item_ids),
            users=np.searchsorted(user_ids, r.user_ids[r.users]),
            items=np.searchsorted(item_ids, r.item_ids[r.items]),
            ratings=r.ratings,
            r_max=r.r_max,
            user_ids=user_ids,
            item_ids=item_ids,
        )

    return remap(a), remap(b)


def rating_to_relevance(rating, epsilon, r_max=5):
    """Relevance probability of a star rating:
    epsilon + (1 - epsilon) * (2^rating - 1) / (2^r_max - 1).

    Accepts scalars or arrays; ratings must lie in [1, r_max].
    """
    rating = np.asarray(rating)
    if not 0.0 <= float(epsilon) < 1.0:
        raise ValueError("epsilon must be in [0, 1)")
    if np.any(rating < 1) or np.any(rating > r_max):
        raise ValueError(f"rating outside [1, {r_max}]")
    out = epsilon + (1.0 - epsilon) * (np.exp2(rating) - 1.0) / (2.0**r_max - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class ImplicitDataset:
    """Implicit-feedback view of a rated matrix, with ground truth attached.

    One row per *exposed* cell (a rated (user, item) pair), sorted by
    (user, item).  Exposure is 1 on every stored cell, so click == rel there;
    unstored cells have exposure 0 and click 0.  Treat instances as
    immutable after construction.
    """

    num_users: int
    num_items: int
    users: np.ndarray  # per exposed cell
    items: np.ndarray
    gamma: np.ndarray  # ground-truth relevance probability
    rel: np.ndarray  # Bernoulli(gamma) draw
    split_tag: str = "train"
    epsilon: float = 0.0
    seed: int | None = None
    r_max: int | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.rel = np.asarray(self.rel, dtype=np.int8)
        order = np.lexsort((self.items, self.users))
        self.users = self.users[order]
        self.items = self.items[order]
        self.gamma = self.gamma[order]
        self.rel = self.rel[order]
        self.validate()

    def validate(self):
        n = len(self.users)
        if not (len(self.items) == len(self.gamma) == len(self.rel) == n):
            raise ValueError("column length mismatch")
        if n and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise ValueError("user index out of range")
        if n and (self.items.min() < 0 or self.items.max() >= self.num_items):
            raise ValueError("item index out of range")
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ValueError("gamma outside [0, 1]")
        if not np.all(np.isin(self.rel, (0, 1))):
            raise ValueError("rel must be binary")
        codes = self.users * self.num_items + self.items
        if np.any(np.diff(codes) <= 0):
            raise IntegrityError("duplicate (user, item) pair")

    # click = exposure * rel, and exposure is 1 on every stored cell.
    @property
    def click(self) -> np.ndarray:
        return self.rel

    def __len__(self):
        return len(self.users)

    @property
    def num_clicks(self) -> int:
        return int(self.rel.sum())

    @cached_property
    def exposed_codes(self) -> np.ndarray:
        """Sorted u*num_items+i codes of exposed cells, for membership tests."""
        return self.users * self.num_items + self.items

    @cached_property
    def click_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        mask = self.rel == 1
        return self.users[mask], self.items[mask]

    @cached_property
    def clicked_codes(self) -> np.ndarray:
        u, i = self.click_pairs
        return u * self.num_items + i

    @cached_property
    def item_click_counts(self) -> np.ndarray:
        _, items = self.click_pairs
        return np.bincount(items, minlength=self.num_items)

    @cached_property
    def user_click_counts(self) -> np.ndarray:
        users, _ = self.click_pairs
        return np.bincount(users, minlength=self.num_users)

    @cached_property
    def user_indptr(self) -> np.ndarray:
        """CSR-style offsets into the exposed-cell arrays, one slice per user."""
        return np.searchsorted(self.users, np.arange(self.num_users + 1))

    def user_slice(self, u: int) -> slice:
        return slice(self.user_indptr[u], self.user_indptr[u + 1])

    def is_exposed(self, users, items) -> np.ndarray:
        return _sorted_contains(self.exposed_codes,
                                np.asarray(users) * self.num_items + np.asarray(items))

    def is_clicked(self, users, items) -> np.ndarray:
        return _sorted_contains(self.clicked_codes,
                                np.asarray(users) * self.num_items + np.asarray(items))


def _sorted_contains(haystack: np.ndarray, codes: np.ndarray) -> np.ndarray:
    if len(haystack) == 0:
        return np.zeros(np.shape(codes), dtype=bool)
    pos = np.minimum(np.searchsorted(haystack, codes), len(haystack) - 1)
    return haystack[pos] == codes


def generate_semi_synthetic(ratings: ExplicitRatings, epsilon: float, seed: int,
                            split_tag: str = "train") -> ImplicitDataset:
    """Turn explicit ratings into implicit feedback with known ground truth.

    Exposure o=1 exactly on rated cells; relevance r ~ Bernoulli(gamma) with
    gamma from :func:`rating_to_relevance`; click c = o*r.  Regeneration with
    the same seed is bit-identical.
    """
    gamma = rating_to_relevance(ratings.ratings, epsilon, ratings.r_max)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    rng = np.random.default_rng(seed)
    # Draw in (user, item) order so the stream is independent of file order.
    order = np.lexsort((ratings.items, ratings.users))
    rel = np.empty(len(ratings), dtype=np.int8)
    rel[order] = (rng.random(len(ratings)) < gamma[order]).astype(np.int8)
    return ImplicitDataset(
        num_users=ratings.num_users,
        num_items=ratings.num_items,
        users=ratings.users,
        items=ratings.items,
        gamma=gamma,
        rel=rel,
        split_tag=split_tag,
        epsilon=float(epsilon),
        seed=seed,
        r_max=ratings.r_max,
    )


def split_validation(dataset: ImplicitDataset, fraction: float, seed: int):
    """Partition exposed cells uniformly at random into (train, validation).

    Validation size is floor(fraction * cells).  Union equals the input,
    intersection is empty, and the same seed yields the same partition.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = len(dataset)
    n_val = int(np.floor(fraction * n))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    val_mask = np.zeros(n, dtype=bool)
    val_mask[perm[:n_val]] = True

    def take(mask, tag):
        return ImplicitDataset(
            num_users=dataset.num_users,
            num_items=dataset.num_items,
            users=dataset.users[mask],
            items=dataset.items[mask],
            gamma=dataset.gamma[mask],
            rel=dataset.rel[mask],
            split_tag=tag,
            epsilon=dataset.epsilon,
            seed=dataset.seed,
            r_max=dataset.r_max,
        )

    return take(~val_mask, dataset.split_tag), take(val_mask, "validation")


def save_dataset(dataset: ImplicitDataset, out_dir):
    """Write a dataset as a self-describing directory: meta.json + exposed.tsv.

    exposed.tsv columns: user, item, gamma (%.17g, reload-exact), rel.
    Rows are sorted by (user, item).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_exposed": len(dataset),
        "num_clicks": dataset.num_clicks,
        "split_tag": dataset.split_tag,
        "epsilon": dataset.epsilon,
        "seed": dataset.seed,
        "r_max": dataset.r_max,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "exposed.tsv", "w") as fh:
        fh.write("user\titem\tgamma\trel\n")
        for u, i, g, r in zip(dataset.users, dataset.items, dataset.gamma, dataset.rel):
            fh.write(f"{u}\t{i}\t{g:.17g}\t{r}\n")


def load_dataset(in_dir) -> ImplicitDataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {meta['format_version']}")
    users, items, gamma, rel = [], [], [], []
    with open(src / "exposed.tsv") as fh:
        header = fh.readline()
        if header.strip() != "user\titem\tgamma\trel":
            raise ParseError(src / "exposed.tsv", 1, "unexpected header")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(src / "exposed.tsv", lineno, "expected 4 columns")
            users.append(int(parts[0]))
            items.append(int(parts[1]))
            gamma.append(float(parts[2]))
            rel.append(int(parts[3]))
    return ImplicitDataset(
        num_users=meta["num_users"],
        num_items=meta["num_items"],
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        gamma=np.asarray(gamma),
        rel=np.asarray(rel, dtype=np.int8),
        split_tag=meta["split_tag"],
        epsilon=meta["epsilon"],
        seed=meta["seed"],
        r_max=meta.get("r_max"),
    )


def save_index_maps(out_dir, user_ids: np.ndarray, item_ids: np.ndarray):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in (("user_map.tsv", user_ids), ("item_map.tsv", item_ids)):
        with open(out / name, "w") as fh:
            fh.write("index\traw_id\n")
            for idx, raw in enumerate(ids):
                fh.write(f"{idx}\t{raw}\n")
