"""Inner-product matrix-factorization ranker shared by all learning methods.

No bias terms: every method optimizes the same architecture, so performance
differences are attributable to the loss alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"FACT0001"


@dataclass
class FactorModel:
    """User and item latent factor matrices defining f(u, i) = <p_u, q_i>."""

    user_factors: np.ndarray  # num_users x d
    item_factors: np.ndarray  # num_items x d

    def __post_init__(self):
        self.user_factors = np.ascontiguousarray(self.user_factors, dtype=np.float64)
        self.item_factors = np.ascontiguousarray(self.item_factors, dtype=np.float64)
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2:
            raise ValueError("factor matrices must be 2-D")
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ValueError("user/item latent dimensions differ")
        if not (np.isfinite(self.user_factors).all() and np.isfinite(self.item_factors).all()):
            raise ValueError("non-finite factor entries")

    @property
    def num_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_factors.copy(), self.item_factors.copy())

    def score_matrix(self) -> np.ndarray:
        """Dense num_users x num_items score matrix."""
        return self.user_factors @ self.item_factors.T

    def score_users(self, users) -> np.ndarray:
        """Scores of the given users against the full catalog."""
        return self.user_factors[np.asarray(users)] @ self.item_factors.T


@dataclass
class TrainConfig:
    """Hyperparameters shared by every learning method."""

    d: int = 100
    lam: float = 1e-5
    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 5
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("latent dimension must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def init_model(num_users, num_items, d, seed, scale=0.01) -> FactorModel:
    """Gaussian init: entries i.i.d. N(0, scale^2), deterministic per seed."""
    if d < 1:
        raise ValueError("latent dimension must be >= 1")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    return FactorModel(
        user_factors=rng.normal(0.0, scale, size=(num_users, d)),
        item_factors=rng.normal(0.0, scale, size=(num_items, d)),
    )


def score(model: FactorModel, u: int, i: int) -> float:
    """f(u, i) = dot(user_factors[u], item_factors[i])."""
    if not 0 <= u < model.num_users:
        raise ValueError(f"user index {u} out of range")
    if not 0 <= i < model.num_items:
        raise ValueError(f"item index {i} out of range")
    return float(model.user_factors[u] @ model.item_factors[i])


def l2_penalty(model: FactorModel, user_rows=(), item_rows=()) -> float:
    """Sum of squared entries of the touched rows (mini-batch-local reg)."""
    total = 0.0
    if len(user_rows):
        total += float(np.sum(model.user_factors[np.asarray(user_rows)] ** 2))
    if len(item_rows):
        total += float(np.sum(model.item_factors[np.asarray(item_rows)] ** 2))
    return total


def save_checkpoint(model: FactorModel, path, seed=0):
    """Binary checkpoint, layout (little-endian):

    8-byte magic "FACT0001"; int64 d, num_users, num_items, seed;
    float64 user_factors row-major; float64 item_factors row-major.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<qqqq", model.d, model.num_users, model.num_items, seed))
        fh.write(model.user_factors.astype("<f8").tobytes(order="C"))
        fh.write(model.item_factors.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[FactorModel, int]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        d, num_users, num_items, seed = struct.unpack("<qqqq", fh.read(32))
        user = np.frombuffer(fh.read(num_users * d * 8), dtype="<f8").reshape(num_users, d)
        item = np.frombuffer(fh.read(num_items * d * 8), dtype="<f8").reshape(num_items, d)
    return FactorModel(user.copy(), item.copy()), seed
