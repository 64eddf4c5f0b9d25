import numpy as np
import pytest

from uplrec.datasets import ImplicitDataset


def make_implicit(num_users, num_items, cells, split_tag="train"):
    """Build a small ImplicitDataset from (u, i, gamma, rel) tuples."""
    users = np.array([c[0] for c in cells])
    items = np.array([c[1] for c in cells])
    gamma = np.array([c[2] for c in cells], dtype=float)
    rel = np.array([c[3] for c in cells], dtype=np.int8)
    return ImplicitDataset(num_users, num_items, users, items, gamma, rel,
                           split_tag=split_tag)


def write_synthetic_triplets(root, seed=7, num_users=60, num_items=40):
    """Popularity-skewed train ratings plus a uniformly sampled test file."""
    rng = np.random.default_rng(seed)
    item_pop = rng.dirichlet(np.ones(num_items) * 0.6)
    quality = rng.uniform(1, 5, size=num_items)
    train_lines, test_lines = [], []
    for u in range(num_users):
        rated = rng.choice(num_items, size=int(rng.integers(8, 20)),
                           replace=False, p=item_pop)
        for i in rated:
            r = int(np.clip(round(rng.normal(quality[i], 1.0)), 1, 5))
            train_lines.append(f"{u}\t{i}\t{r}")
        rated_set = set(int(x) for x in rated)
        for i in rng.choice(num_items, size=5, replace=False):
            if int(i) not in rated_set:
                r = int(np.clip(round(rng.normal(quality[i], 1.0)), 1, 5))
                test_lines.append(f"{u}\t{i}\t{r}")
    (root / "train.txt").write_text("\n".join(train_lines) + "\n")
    (root / "test.txt").write_text("\n".join(test_lines) + "\n")
    return root / "train.txt", root / "test.txt"


@pytest.fixture
def separable_dataset():
    """2 users x 4 items, everything exposed, clicks exactly on relevant items."""
    relevant = {(0, 0), (0, 1), (1, 2), (1, 3)}
    cells = []
    for u in range(2):
        for i in range(4):
            r = 1 if (u, i) in relevant else 0
            cells.append((u, i, float(r), r))
    return make_implicit(2, 4, cells)
