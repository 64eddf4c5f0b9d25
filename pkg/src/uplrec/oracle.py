"""Ground-truth verification of the pairwise estimators on small worlds.

A world fixes per-cell exposure and relevance probabilities (theta, gamma)
with clicks generated as c = o * r, o ~ Bern(theta), r ~ Bern(gamma), all
cells independent.  For worlds of up to 10 cells the module enumerates the
full joint of the four (o, r) outcomes per cell and computes each
estimator's exact expectation; Monte Carlo sampling covers anything larger
and supplies variance estimates.  Estimator terms are computed through the
same loss functions the trainer uses, on a full-batch basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import EnumerationBoundError
from .factor_model import FactorModel, init_model
from .losses import LossSpec, pair_term, sigmoid_pair_loss

MAX_EXACT_CELLS = 10
_CHUNK = 1 << 16

ESTIMATORS = ("upl", "ubpr", "ubpr_clipped", "bpr")


@dataclass
class SyntheticWorld:
    """Full num_users x num_items grid of exposure/relevance probabilities."""

    theta: np.ndarray  # num_users x num_items, in (0, 1)
    gamma: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.theta.ndim != 2 or self.theta.shape != self.gamma.shape:
            raise ValueError("theta/gamma must be 2-D with equal shapes")
        if np.any(self.theta <= 0) or np.any(self.theta >= 1):
            raise ValueError("theta must lie strictly inside (0, 1)")
        if np.any(self.gamma <= 0) or np.any(self.gamma >= 1):
            raise ValueError("gamma must lie strictly inside (0, 1)")
        if np.any(self.theta * self.gamma >= 1):
            raise ValueError("theta * gamma must be < 1")

    @property
    def num_users(self) -> int:
        return self.theta.shape[0]

    @property
    def num_items(self) -> int:
        return self.theta.shape[1]

    @property
    def num_cells(self) -> int:
        return self.theta.size


def parse_world_spec(path) -> SyntheticWorld:
    """Read the declarative world format:

        users <U>
        items <I>
        theta
        <U rows of I floats>
        gamma
        <U rows of I floats>

    '#' starts a comment; blank lines are ignored.
    """
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    it = iter(lines)

    def expect(keyword, line):
        parts = line.split()
        if parts[0] != keyword:
            raise ValueError(f"expected {keyword!r}, got {line!r}")
        return parts

    users = int(expect("users", next(it))[1])
    items = int(expect("items", next(it))[1])

    def read_table(keyword):
        expect(keyword, next(it))
        rows = [[float(tok) for tok in next(it).split()] for _ in range(users)]
        table = np.asarray(rows)
        if table.shape != (users, items):
            raise ValueError(f"{keyword} table has shape {table.shape}, "
                             f"expected {(users, items)}")
        return table

    theta = read_table("theta")
    gamma = read_table("gamma")
    return SyntheticWorld(theta=theta, gamma=gamma)


def write_world_spec(world: SyntheticWorld, path):
    with open(path, "w") as fh:
        fh.write(f"users {world.num_users}\nitems {world.num_items}\n")
        for name, table in (("theta", world.theta), ("gamma", world.gamma)):
            fh.write(f"{name}\n")
            for row in table:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


@dataclass
class EstimatorReport:
    """Exact and Monte-Carlo summary of one estimator on one world."""

    estimator: str
    ideal_risk: float
    exact_expectation: float | None = None
    bias: float | None = None
    mc_mean: float | None = None
    mc_variance: float | None = None
    mc_se: float | None = None
    closed_form_variance: float | None = None
    sample_count: int = 0


def _pair_index(world: SyntheticWorld):
    """Ordered same-user cell pairs (i != j), as flat cell indices."""
    n_items = world.num_items
    p_idx, q_idx = [], []
    for u in range(world.num_users):
        base = u * n_items
        for i in range(n_items):
            for j in range(n_items):
                if i != j:
                    p_idx.append(base + i)
                    q_idx.append(base + j)
    return np.asarray(p_idx, dtype=np.int64), np.asarray(q_idx, dtype=np.int64)


def _loss_values(world: SyntheticWorld, model: FactorModel, p_idx, q_idx):
    scores = model.score_matrix().ravel()
    loss, _, _ = sigmoid_pair_loss(scores[p_idx], scores[q_idx])
    return np.atleast_1d(loss)


def _make_spec(estimator: str, clip_threshold: float) -> LossSpec:
    if estimator == "ubpr_clipped":
        return LossSpec("ubpr_clipped", clip_threshold=clip_threshold)
    return LossSpec(estimator)


class _FullBatchEstimator:
    """Evaluates an estimator's full-batch empirical risk for click vectors.

    Every pair term is a function of (c_i, c_j) in {0,1}^2 only, so the
    full-batch sum is a bilinear form in the click vector; the four per-pair
    term values are taken straight from the loss module.
    """

    def __init__(self, world: SyntheticWorld, model: FactorModel, estimator: str,
                 clip_threshold: float = 0.0, gamma_hat=None):
        if estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {estimator!r}")
        spec = _make_spec(estimator, clip_threshold)
        theta = world.theta.ravel()
        gamma = world.gamma.ravel() if gamma_hat is None \
            else np.asarray(gamma_hat, dtype=np.float64).ravel()
        p_idx, q_idx = _pair_index(world)
        losses = _loss_values(world, model, p_idx, q_idx)

        n = world.num_cells
        tables = np.zeros((2, 2, len(p_idx)))
        for ci in (0, 1):
            for cj in (0, 1):
                tables[ci, cj] = [
                    pair_term(spec, ci, cj, theta[p], theta[q], gamma[q], L)
                    for p, q, L in zip(p_idx, q_idx, losses)
                ]

        t00, t01, t10, t11 = tables[0, 0], tables[0, 1], tables[1, 0], tables[1, 1]
        self.const = float(t00.sum())
        self.row_vec = np.zeros(n)
        np.add.at(self.row_vec, p_idx, t10 - t00)
        self.col_vec = np.zeros(n)
        np.add.at(self.col_vec, q_idx, t01 - t00)
        self.cross = np.zeros((n, n))
        np.add.at(self.cross, (p_idx, q_idx), t11 - t10 - t01 + t00)
        self.num_cells = n

    def evaluate(self, clicks: np.ndarray) -> np.ndarray:
        """Empirical risk per click row; clicks is (m, num_cells) in {0,1}."""
        c = np.asarray(clicks, dtype=np.float64)
        single = c.ndim == 1
        c = np.atleast_2d(c)
        out = self.const + c @ (self.row_vec + self.col_vec) \
            + np.einsum("mp,pq,mq->m", c, self.cross, c, optimize=True)
        return out[0] if single else out


def ideal_risk(world: SyntheticWorld, model: FactorModel) -> float:
    """Sum over ordered same-user pairs of gamma_i*(1-gamma_j)*L(s_i, s_j)."""
    p_idx, q_idx = _pair_index(world)
    losses = _loss_values(world, model, p_idx, q_idx)
    gamma = world.gamma.ravel()
    return float(math.fsum(gamma[p_idx] * (1.0 - gamma[q_idx]) * losses))


def exact_expectation(world: SyntheticWorld, model: FactorModel, estimator: str,
                      clip_threshold: float = 0.0, gamma_hat=None) -> float:
    """Expectation of the full-batch empirical risk over the exact joint of
    (o, r) outcomes for every cell.

    Enumerates all 4^cells outcomes (o, r in {0,1} per cell), weighting each
    by its probability and evaluating the estimator on the induced clicks
    c = o*r.  Worlds beyond MAX_EXACT_CELLS cells are rejected.
    """
    n = world.num_cells
    if n > MAX_EXACT_CELLS:
        raise EnumerationBoundError(
            f"world has {n} cells; exact enumeration capped at {MAX_EXACT_CELLS}")
    est = _FullBatchEstimator(world, model, estimator, clip_threshold, gamma_hat)
    theta = world.theta.ravel()
    gamma = world.gamma.ravel()

    total_outcomes = 4**n
    partials = []
    for start in range(0, total_outcomes, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total_outcomes), dtype=np.int64)
        prob = np.ones(len(idx))
        clicks = np.empty((len(idx), n))
        for k in range(n):
            o = (idx >> (2 * k)) & 1
            r = (idx >> (2 * k + 1)) & 1
            prob *= np.where(o == 1, theta[k], 1.0 - theta[k])
            prob *= np.where(r == 1, gamma[k], 1.0 - gamma[k])
            clicks[:, k] = o & r
        partials.append(float(prob @ est.evaluate(clicks)))
    return math.fsum(partials)


def sample_clicks(world: SyntheticWorld, samples: int, seed: int) -> np.ndarray:
    """(samples, num_cells) click draws: o ~ Bern(theta), r ~ Bern(gamma)."""
    rng = np.random.default_rng(seed)
    theta = world.theta.ravel()
    gamma = world.gamma.ravel()
    o = rng.random((samples, world.num_cells)) < theta
    r = rng.random((samples, world.num_cells)) < gamma
    return (o & r).astype(np.float64)


def mc_bias_variance(world: SyntheticWorld, model: FactorModel, estimator: str,
                     samples: int, seed: int, clip_threshold: float = 0.0,
                     gamma_hat=None) -> EstimatorReport:
    """Monte-Carlo mean/variance of an estimator's full-batch risk.

    Draws i.i.d. (o, r) worlds, evaluates the empirical risk per draw and
    reports the sample mean and variance with standard errors.  The exact
    expectation is attached when the world is small enough to enumerate.
    """
    if samples < 10**4:
        raise ValueError("samples must be >= 10^4")
    est = _FullBatchEstimator(world, model, estimator, clip_threshold, gamma_hat)
    values = est.evaluate(sample_clicks(world, samples, seed))
    ideal = ideal_risk(world, model)
    mean = float(values.mean())
    variance = float(values.var(ddof=1))
    report = EstimatorReport(
        estimator=estimator,
        ideal_risk=ideal,
        mc_mean=mean,
        mc_variance=variance,
        mc_se=float(np.sqrt(variance / samples)),
        sample_count=samples,
    )
    if world.num_cells <= MAX_EXACT_CELLS:
        report.exact_expectation = exact_expectation(
            world, model, estimator, clip_threshold, gamma_hat)
        report.bias = report.exact_expectation - ideal
    else:
        report.bias = mean - ideal
    if estimator == "upl" and gamma_hat is None:
        report.closed_form_variance = closed_form_variance_upl(world, model)
    return report


def variance_order_test(world: SyntheticWorld, model: FactorModel,
                        estimator_hi: str, estimator_lo: str,
                        samples: int, seed: int):
    """One-sided paired test that Var(estimator_hi) > Var(estimator_lo).

    Both estimators are evaluated on the same click draws; the test is a
    paired t on the per-draw squared deviations.  Returns
    (var_hi, var_lo, p_value).
    """
    if samples < 10**4:
        raise ValueError("samples must be >= 10^4")
    clicks = sample_clicks(world, samples, seed)
    a = _FullBatchEstimator(world, model, estimator_hi).evaluate(clicks)
    b = _FullBatchEstimator(world, model, estimator_lo).evaluate(clicks)
    dev = (a - a.mean()) ** 2 - (b - b.mean()) ** 2
    t_stat = dev.mean() / (dev.std(ddof=1) / math.sqrt(samples))
    p = float(stats.t.sf(t_stat, df=samples - 1))
    return float(a.var(ddof=1)), float(b.var(ddof=1)), p


def closed_form_variance_upl(world: SyntheticWorld, model: FactorModel) -> float:
    """Two-sum closed-form variance expression for the upl estimator.

    First sum over ordered pairs (i, j):
        (1/theta_i - gamma_i) * gamma_i * (1-gamma_j)^2 * L_ij^2
            / (1 - theta_j*gamma_j)^2
    Second sum over triples (i, j, k), j != k, both != i:
        (1/theta_i - gamma_i) * gamma_i * (1-gamma_j)(1-gamma_k) * L_ij*L_ik
            / ((1 - theta_j*gamma_j)(1 - theta_k*gamma_k))
    Evaluated over the full candidate pair sets of the world; reported as a
    diagnostic, not asserted against the Monte-Carlo variance.
    """
    scores = model.score_matrix()
    theta = world.theta
    gamma = world.gamma
    total = 0.0
    for u in range(world.num_users):
        s = scores[u]
        th, ga = theta[u], gamma[u]
        n = world.num_items
        L = np.empty((n, n))
        for i in range(n):
            L[i], _, _ = sigmoid_pair_loss(s[i], s)
        lead = (1.0 / th - ga) * ga  # indexed by i
        w = (1.0 - ga) / (1.0 - th * ga)  # indexed by j
        for i in range(n):
            others = [j for j in range(n) if j != i]
            wl = np.array([w[j] * L[i, j] for j in others])
            total += lead[i] * float(np.sum(wl**2))
            # cross terms: sum_{j != k} wl_j * wl_k = (sum wl)^2 - sum wl^2
            total += lead[i] * float(np.sum(wl) ** 2 - np.sum(wl**2))
    return total


# ---------------------------------------------------------------------------
# Bundled worlds


def random_world(num_users, num_items, seed, theta_range=(0.1, 0.9),
                 gamma_range=(0.05, 0.95)) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    shape = (num_users, num_items)
    return SyntheticWorld(
        theta=rng.uniform(*theta_range, size=shape),
        gamma=rng.uniform(*gamma_range, size=shape),
    )


def model_for_world(world: SyntheticWorld, seed, d=4, scale=0.6) -> FactorModel:
    """A fixed random ranker whose pair losses vary meaningfully."""
    return init_model(world.num_users, world.num_items, d=d, seed=seed, scale=scale)


_SUITE_SHAPES = [(1, 4), (1, 5), (2, 3), (1, 6), (2, 4),
                 (1, 8), (3, 3), (2, 5), (1, 9), (1, 10)]


def unbiasedness_suite(count=20, seed=90210):
    """Deterministic suite of admissible random worlds (<= 10 cells each)."""
    worlds = []
    for k in range(count):
        users, items = _SUITE_SHAPES[k % len(_SUITE_SHAPES)]
        worlds.append((f"random_{users}x{items}_{k}",
                       random_world(users, items, seed=seed + k)))
    return worlds


def clip_bias_world() -> SyntheticWorld:
    """Moderate exposure world where zero-clipping visibly biases ubpr."""
    shape = (1, 3)
    return SyntheticWorld(theta=np.full(shape, 0.5), gamma=np.full(shape, 0.5))


def low_exposure_worlds(count=3, seed=777):
    """Worlds with all theta <= 0.2, where ubpr's variance blows up."""
    worlds = []
    for k in range(count):
        worlds.append((f"low_theta_{k}",
                       random_world(1, 5, seed=seed + k,
                                    theta_range=(0.05, 0.2),
                                    gamma_range=(0.3, 0.7))))
    return worlds


# ---------------------------------------------------------------------------
# Verification suite consumed by the CLI


def verification_suite(samples=10**5, seed=1234, suite_count=20):
    """Run every oracle invariant; yields (check_name, passed, detail) rows."""
    results = []

    worlds = unbiasedness_suite(count=suite_count)
    max_err_upl = 0.0
    max_err_ubpr = 0.0
    for k, (name, world) in enumerate(worlds):
        model = model_for_world(world, seed=seed + k)
        ideal = ideal_risk(world, model)
        max_err_upl = max(max_err_upl, abs(exact_expectation(world, model, "upl") - ideal))
        max_err_ubpr = max(max_err_ubpr, abs(exact_expectation(world, model, "ubpr") - ideal))
    results.append(("upl_unbiased_exact", max_err_upl < 1e-10,
                    f"max |E[upl] - ideal| = {max_err_upl:.3e} over {len(worlds)} worlds"))
    results.append(("ubpr_unbiased_exact", max_err_ubpr < 1e-10,
                    f"max |E[ubpr] - ideal| = {max_err_ubpr:.3e} over {len(worlds)} worlds"))

    world = clip_bias_world()
    model = model_for_world(world, seed=seed)
    gap = exact_expectation(world, model, "ubpr_clipped", clip_threshold=0.0) \
        - ideal_risk(world, model)
    results.append(("ubpr_clipped_biased", gap > 1e-3,
                    f"E[clipped ubpr] - ideal = {gap:.6f}"))

    ordering_ok = True
    details = []
    for name, world in low_exposure_worlds():
        model = model_for_world(world, seed=seed + 7)
        var_ubpr, var_upl, p = variance_order_test(
            world, model, "ubpr", "upl", samples=samples, seed=seed)
        ordering_ok &= var_ubpr > var_upl and p < 0.01
        details.append(f"{name}: var ratio {var_ubpr / var_upl:.2f}, p={p:.2e}")
    results.append(("variance_ordering", ordering_ok, "; ".join(details)))

    agree_ok = True
    agree_details = []
    world = unbiasedness_suite(count=1)[0][1]
    model = model_for_world(world, seed=seed + 3)
    for estimator in ESTIMATORS:
        rep = mc_bias_variance(world, model, estimator, samples=samples, seed=seed)
        err = abs(rep.exact_expectation - rep.mc_mean)
        ok = err < 4.0 * rep.mc_se
        agree_ok &= ok
        agree_details.append(f"{estimator}: |exact-mc| = {err:.2e} (4se = {4 * rep.mc_se:.2e})")
    results.append(("enumeration_mc_agreement", agree_ok, "; ".join(agree_details)))

    return results


def reports_to_tsv(reports, path):
    cols = ("estimator", "ideal_risk", "exact_expectation", "bias", "mc_mean",
            "mc_variance", "mc_se", "closed_form_variance", "sample_count")
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for rep in reports:
            row = []
            for c in cols:
                v = getattr(rep, c)
                row.append("" if v is None else (f"{v:.10g}" if isinstance(v, float) else str(v)))
            fh.write("\t".join(row) + "\n")
