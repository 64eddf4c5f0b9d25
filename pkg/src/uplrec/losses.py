"""Loss estimators for implicit-feedback ranking, with analytic gradients.

Pairwise base loss is L(s_i, s_j) = -log sigmoid(s_i - s_j).  The estimators
differ only in the weight each (i: clicked, j) pair receives:

* bpr / ideal: weight 1 on (c_i=1, c_j=0) pairs
* ubpr:        (c_i/theta_i) * (1 - c_j/theta_j), j unrestricted; can go
               negative when c_j=1 and theta_j<1
* ubpr_clipped: the ubpr term truncated below at a threshold in [-10, 0]
* upl:         (1 - gamma_j) / (theta_i * (1 - theta_j*gamma_j)) on
               (c_i=1, c_j=0) pairs; non-negative by construction

Pointwise baselines (wmf, relmf, mfdu) are logistic losses on single cells
with their respective confidence / inverse-propensity weightings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularityError

PAIRWISE_METHODS = ("ideal", "bpr", "ubpr", "ubpr_nclip", "ubpr_clipped", "upl")
POINTWISE_METHODS = ("wmf", "relmf", "mfdu")
METHODS = PAIRWISE_METHODS + POINTWISE_METHODS

GAMMA_HAT_MIN = 1e-6
GAMMA_HAT_MAX = 1.0 - 1e-6


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def softplus(x):
    """log(1 + exp(x)), stable for |x| up to at least 700."""
    x = np.asarray(x, dtype=np.float64)
    out = np.logaddexp(0.0, x)
    return float(out) if out.ndim == 0 else out


def sigmoid_pair_loss(s_i, s_j):
    """-log sigmoid(s_i - s_j) and its gradients w.r.t. both scores.

    Returns (loss, dloss_dsi, dloss_dsj) where dloss_dsi = -(1 - sigmoid(d))
    and dloss_dsj = +(1 - sigmoid(d)) for d = s_i - s_j.
    """
    d = np.asarray(s_i, dtype=np.float64) - np.asarray(s_j, dtype=np.float64)
    loss = np.logaddexp(0.0, -d)
    g = sigmoid(-d)  # = 1 - sigmoid(d)
    if np.ndim(loss) == 0:
        return float(loss), float(-g), float(g)
    return loss, -g, +g


def upl_pair_weight(theta_i, theta_j, gamma_hat_j):
    """(1 - gamma_j) / (theta_i * (1 - theta_j * gamma_j)); never negative."""
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_j = np.asarray(theta_j, dtype=np.float64)
    gamma_hat_j = np.asarray(gamma_hat_j, dtype=np.float64)
    if np.any(theta_i <= 0):
        raise SingularityError("theta_i must be positive")
    denom = 1.0 - theta_j * gamma_hat_j
    if np.any(denom <= 0):
        raise SingularityError("theta_j * gamma_j >= 1")
    out = (1.0 - gamma_hat_j) / (theta_i * denom)
    return float(out) if out.ndim == 0 else out


def upl_pair_weight_from_posterior(theta_i, theta_j, posterior_j):
    """Equivalent weight written with the posterior exposure of j:
    posterior_j / (theta_i * theta_j).

    Feeding posterior_exposure(theta_j, gamma_j) reproduces upl_pair_weight;
    feeding theta_j itself gives 1/theta_i, the zero-clipped ubpr weight.
    """
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_j = np.asarray(theta_j, dtype=np.float64)
    if np.any(theta_i <= 0) or np.any(theta_j <= 0):
        raise SingularityError("propensities must be positive")
    out = np.asarray(posterior_j, dtype=np.float64) / (theta_i * theta_j)
    return float(out) if out.ndim == 0 else out


def ubpr_pair_weight(c_i, c_j, theta_i, theta_j):
    """(c_i / theta_i) * (1 - c_j / theta_j); negative when c_j=1, theta_j<1."""
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_j = np.asarray(theta_j, dtype=np.float64)
    if np.any(theta_i <= 0) or np.any(theta_j <= 0):
        raise SingularityError("propensities must be positive")
    out = (np.asarray(c_i) / theta_i) * (1.0 - np.asarray(c_j) / theta_j)
    return float(out) if out.ndim == 0 else out


def clip_term(weighted_loss, threshold):
    """max(weighted_loss, threshold) with threshold <= 0."""
    if np.any(np.asarray(threshold) > 0):
        raise ValueError("clip threshold must be <= 0")
    out = np.maximum(np.asarray(weighted_loss, dtype=np.float64), threshold)
    return float(out) if out.ndim == 0 else out


def pointwise_loss(method, c, s, theta_click=1.0, theta_nonclick=1.0, weight=10.0,
                   gamma_unclicked=0.0):
    """Pointwise losses on a single cell, with gradient w.r.t. the score.

    With p = sigmoid(s):
      wmf:    weight*c*(-log p) + (1-c)*(-log(1-p))
      relmf:  (c/theta_click)*(-log p) + (1 - c/theta_click)*(-log(1-p))
      mfdu:   c*[(1/theta_click)*(-log p) + (1 - 1/theta_click)*(-log(1-p))]
              + (1-c)*[(1 - (1-theta_nonclick)*gamma_unclicked)*(-log(1-p))]
    mfdu's unclicked weight takes the relevance prior of unclicked cells as
    ``gamma_unclicked`` (default 0, which makes the weight exactly 1).
    Returns (loss, dloss_ds).
    """
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    nlog_p = softplus(-s)  # -log sigmoid(s)
    nlog_1mp = softplus(s)  # -log(1 - sigmoid(s))
    p = sigmoid(s)

    if method == "wmf":
        if weight < 1.0:
            raise ValueError("wmf weight must be >= 1")
        w_pos = weight * c
        w_neg = 1.0 - c
    elif method == "relmf":
        theta_click = np.asarray(theta_click, dtype=np.float64)
        if np.any(theta_click <= 0):
            raise SingularityError("theta_click must be positive")
        w_pos = c / theta_click
        w_neg = 1.0 - c / theta_click
    elif method == "mfdu":
        theta_click = np.asarray(theta_click, dtype=np.float64)
        theta_nonclick = np.asarray(theta_nonclick, dtype=np.float64)
        if np.any(theta_click <= 0):
            raise SingularityError("theta_click must be positive")
        w_pos = c / theta_click
        w_neg = c * (1.0 - 1.0 / theta_click) \
            + (1.0 - c) * (1.0 - (1.0 - theta_nonclick) * gamma_unclicked)
    else:
        raise ValueError(f"unknown pointwise method {method!r}")

    loss = w_pos * nlog_p + w_neg * nlog_1mp
    grad = w_pos * (p - 1.0) + w_neg * p
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


@dataclass
class PairSample:
    """One pairwise training example: clicked item i and candidate j."""

    u: int
    i: int
    j: int
    c_j: int = 0
    theta_i: float = 1.0
    theta_j: float = 1.0
    gamma_hat_j: float = 0.0


@dataclass
class LossSpec:
    """Selects an estimator; method-specific fields must be present exactly
    when the method requires them."""

    method: str
    clip_threshold: float | None = None
    wmf_weight: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "ubpr_clipped":
            if self.clip_threshold is None:
                raise ValueError("ubpr_clipped requires clip_threshold")
            if not -10.0 <= self.clip_threshold <= 0.0:
                raise ValueError("clip_threshold must be in [-10, 0]")
        elif self.clip_threshold is not None:
            raise ValueError("clip_threshold only valid for ubpr_clipped")
        if self.method == "wmf":
            if self.wmf_weight is None:
                raise ValueError("wmf requires wmf_weight")
            if self.wmf_weight < 1.0:
                raise ValueError("wmf_weight must be >= 1")
        elif self.wmf_weight is not None:
            raise ValueError("wmf_weight only valid for wmf")

    @property
    def is_pairwise(self) -> bool:
        return self.method in PAIRWISE_METHODS


def pair_term(spec: LossSpec, c_i, c_j, theta_i, theta_j, gamma_j, loss_value):
    """Scalar per-pair estimator term as the full-batch risk computes it.

    ``loss_value`` is L(f(u,i), f(u,j)).  Pairs outside the estimator's index
    set contribute 0: upl/bpr/ideal only use (c_i=1, c_j=0); ubpr uses any
    pair with c_i=1.
    """
    method = spec.method
    if method in ("bpr", "ideal"):
        return float(loss_value) if (c_i == 1 and c_j == 0) else 0.0
    if method == "upl":
        if c_i == 1 and c_j == 0:
            return upl_pair_weight(theta_i, theta_j, gamma_j) * float(loss_value)
        return 0.0
    if method in ("ubpr", "ubpr_nclip"):
        return ubpr_pair_weight(c_i, c_j, theta_i, theta_j) * float(loss_value)
    if method == "ubpr_clipped":
        raw = ubpr_pair_weight(c_i, c_j, theta_i, theta_j) * float(loss_value)
        return clip_term(raw, spec.clip_threshold)
    raise ValueError(f"{method!r} is not a pairwise method")
