"""Experiment orchestration: dataset preparation, hyperparameter grids on
validation DCG@5, repeated final runs, aggregation and significance tests.

The experiment method tokens map onto loss estimators as follows: ``ubpr``
is the practical clipped variant (its threshold is grid-tuned alongside d
and lambda), ``ubpr_nclip`` removes clipping, and ``upl`` runs the two-stage
relmf -> upl pipeline.  Outputs are deterministic functions of the config
file: no timestamps, stable ordering, fixed float formatting.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .datasets import (
    ImplicitDataset,
    align_index_spaces,
    generate_semi_synthetic,
    load_triplets,
    save_dataset,
    save_index_maps,
    split_validation,
)
from .evaluation import (
    CohortSpec,
    MetricReport,
    compute_cohorts,
    evaluate,
    one_tailed_t_test,
)
from .factor_model import TrainConfig
from .losses import LossSpec
from .propensity import PropensityTable
from .trainer import run_upl_pipeline, train

METHOD_TOKENS = ("wmf", "relmf", "mfdu", "bpr", "ubpr", "ubpr_nclip", "upl")
DISPLAY_NAMES = {
    "wmf": "WMF", "relmf": "Rel-MF", "mfdu": "MF-DU", "bpr": "BPR",
    "ubpr": "UBPR", "ubpr_nclip": "UBPR_NClip", "upl": "UPL",
}
METRIC_NAMES = ("dcg", "recall", "map")


@dataclass
class ExperimentConfig:
    dataset: str = ""
    format: str = "coat"  # coat (dense matrices) | triplets
    train_file: str = ""
    test_file: str = ""
    methods: tuple = METHOD_TOKENS
    runs: int = 50
    seed: int = 0
    epsilon_train: float = 0.1
    epsilon_test: float = 0.0
    validation_fraction: float = 0.1
    d_grid: tuple = (100, 200, 300)
    lambda_grid: tuple = (1e-7, 1e-5, 1e-3)
    clip_grid: tuple = (0.0, -0.1, -1.0, -10.0)
    ks: tuple = (3, 5, 8)
    cohorts: bool = True
    candidates: str = "catalog"
    batch_size: int = 256
    learning_rate: float = 0.001
    max_epochs: int = 200
    patience: int = 5
    wmf_weight: float = 10.0
    propensity_power: float = 0.5
    propensity_floor: float = 0.01
    threads: int = 1
    out: str = ""

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.d_grid or not self.lambda_grid:
            raise ValueError("hyperparameter grid must be non-empty")
        if "ubpr" in self.methods and not self.clip_grid:
            raise ValueError("clip_grid must be non-empty when ubpr is run")
        for m in self.methods:
            if m not in METHOD_TOKENS:
                raise ValueError(f"unknown method token {m!r}")

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


_PARSERS = {
    "dataset": str, "format": str, "train_file": str, "test_file": str,
    "methods": lambda s: tuple(t.strip() for t in s.split(",") if t.strip()),
    "runs": int, "seed": int,
    "epsilon_train": float, "epsilon_test": float, "validation_fraction": float,
    "d_grid": lambda s: tuple(int(t) for t in s.split(",")),
    "lambda_grid": lambda s: tuple(float(t) for t in s.split(",")),
    "clip_grid": lambda s: tuple(float(t) for t in s.split(",")),
    "ks": lambda s: tuple(int(t) for t in s.split(",")),
    "cohorts": lambda s: s.strip().lower() in ("on", "true", "1", "yes"),
    "candidates": str,
    "batch_size": int, "learning_rate": float, "max_epochs": int, "patience": int,
    "wmf_weight": float, "propensity_power": float, "propensity_floor": float,
    "threads": int, "out": str,
}


def parse_config_file(path, overrides=None) -> ExperimentConfig:
    """Flat key=value config; '#' comments; unknown keys are errors."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in _PARSERS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _PARSERS[key](val.strip())
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _PARSERS:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _PARSERS[key](val) if isinstance(val, str) else val
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# Dataset preparation


@dataclass
class PreparedData:
    train: ImplicitDataset
    validation: ImplicitDataset
    test: ImplicitDataset
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None


_TRIPLET_TRAIN_NAMES = ("train.txt", "ydata-ymusic-rating-study-v1_0-train.txt")
_TRIPLET_TEST_NAMES = ("test.txt", "ydata-ymusic-rating-study-v1_0-test.txt")


def _find_file(root: Path, explicit: str, candidates) -> Path:
    if explicit:
        p = Path(explicit)
        return p if p.is_absolute() else root / p
    for name in candidates:
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"none of {candidates} found under {root}")


def prepare_datasets(dataset_path, format="coat", epsilon_train=0.1, epsilon_test=0.0,
                     validation_fraction=0.1, seed=0, train_file="",
                     test_file="") -> PreparedData:
    """Load explicit ratings and produce (train, validation, test) implicit
    splits.  Generation seeds: train = seed, test = seed + 1, split = seed + 2.
    """
    root = Path(dataset_path)
    if format == "coat":
        train_path = _find_file(root, train_file, ("train.ascii",))
        test_path = _find_file(root, test_file, ("test.ascii",))
        train_ratings = load_triplets(train_path, format="dense")
        test_ratings = load_triplets(test_path, format="dense")
        if (train_ratings.num_users != test_ratings.num_users
                or train_ratings.num_items != test_ratings.num_items):
            raise ValueError("train/test dense matrices have different shapes")
    elif format == "triplets":
        train_path = _find_file(root, train_file, _TRIPLET_TRAIN_NAMES)
        test_path = _find_file(root, test_file, _TRIPLET_TEST_NAMES)
        train_ratings = load_triplets(train_path, format="triplets")
        test_ratings = load_triplets(test_path, format="triplets")
        train_ratings, test_ratings = align_index_spaces(train_ratings, test_ratings)
    else:
        raise ValueError(f"unknown dataset format {format!r}")

    train_full = generate_semi_synthetic(train_ratings, epsilon_train, seed, "train")
    test = generate_semi_synthetic(test_ratings, epsilon_test, seed + 1, "test")
    train, validation = split_validation(train_full, validation_fraction, seed + 2)
    return PreparedData(
        train=train, validation=validation, test=test,
        user_ids=train_ratings.user_ids, item_ids=train_ratings.item_ids,
    )


def save_prepared(data: PreparedData, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data.train, out / "train")
    save_dataset(data.validation, out / "validation")
    save_dataset(data.test, out / "test")
    if data.user_ids is not None:
        save_index_maps(out, data.user_ids, data.item_ids)


# ---------------------------------------------------------------------------
# Single training jobs


def make_loss_spec(token: str, config: ExperimentConfig, clip: float = 0.0) -> LossSpec:
    if token == "ubpr":
        return LossSpec("ubpr_clipped", clip_threshold=clip)
    if token == "wmf":
        return LossSpec("wmf", wmf_weight=config.wmf_weight)
    return LossSpec(token)


def make_train_config(config: ExperimentConfig, d: int, lam: float, seed: int) -> TrainConfig:
    return TrainConfig(
        d=d, lam=lam,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        patience=config.patience,
        seed=seed,
    )


def train_method(token: str, data: PreparedData, propensities: PropensityTable,
                 config: ExperimentConfig, d: int, lam: float, clip: float, seed: int):
    """Train one run of an experiment method; returns the TrainRun."""
    tc = make_train_config(config, d, lam, seed)
    if token == "upl":
        return run_upl_pipeline(data.train, tc, tc, propensities,
                                validation=data.validation)
    spec = make_loss_spec(token, config, clip)
    return train(data.train, tc, spec, propensities, validation=data.validation)


def _grid_for(token: str, config: ExperimentConfig):
    combos = []
    clips = config.clip_grid if token == "ubpr" else (0.0,)
    for d in config.d_grid:
        for lam in config.lambda_grid:
            for clip in clips:
                combos.append((d, lam, clip))
    return combos


# worker globals for process pools (set once per worker via initializer)
_POOL_STATE = {}


def _pool_init(data, propensities, config, cohorts_on):
    _POOL_STATE["data"] = data
    _POOL_STATE["propensities"] = propensities
    _POOL_STATE["config"] = config
    _POOL_STATE["cohorts"] = (
        compute_cohorts(data.train, CohortSpec()) if cohorts_on else None)


def _pool_grid_task(args):
    token, d, lam, clip = args
    config = _POOL_STATE["config"]
    run = train_method(token, _POOL_STATE["data"], _POOL_STATE["propensities"],
                       config, d, lam, clip, seed=config.seed)
    return args, max(run.validation_curve) if run.validation_curve else 0.0


def _pool_final_task(args):
    token, d, lam, clip, run_idx = args
    config = _POOL_STATE["config"]
    data = _POOL_STATE["data"]
    run = train_method(token, data, _POOL_STATE["propensities"], config,
                       d, lam, clip, seed=config.seed + run_idx)
    reports = evaluate(run.final_model, data.test, ks=config.ks,
                       cohorts=_POOL_STATE["cohorts"],
                       candidates=config.candidates, method=token, run=run_idx)
    return args, reports, run.epoch_log


# ---------------------------------------------------------------------------
# The experiment driver


def run_experiment(config: ExperimentConfig, out_dir=None) -> Path:
    """Grid-search, repeated runs, aggregation, significance and tables."""
    out = Path(out_dir or config.out)
    if not str(out):
        raise ValueError("no output directory configured")
    out.mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    cfg_hash = config.hash()
    (out / "config_resolved.cfg").write_text(config.canonical_text())
    (out / "config_hash.txt").write_text(cfg_hash + "\n")

    data = prepare_datasets(
        config.dataset, config.format, config.epsilon_train, config.epsilon_test,
        config.validation_fraction, config.seed, config.train_file, config.test_file)
    save_prepared(data, out / "data")
    propensities = PropensityTable.from_click_counts(
        data.train.item_click_counts, power=config.propensity_power,
        floor=config.propensity_floor)
    propensities.save(out / "propensities")
    cohorts = compute_cohorts(data.train, CohortSpec()) if config.cohorts else None

    grid_rows = []
    all_reports: list[MetricReport] = []
    failures = []
    chosen: dict[str, tuple] = {}

    for token in config.methods:
        try:
            best_combo, method_grid_rows = _grid_search(token, data, propensities,
                                                        config, cohorts)
            grid_rows.extend(method_grid_rows)
            chosen[token] = best_combo
            reports = _final_runs(token, best_combo, data, propensities, config,
                                  cohorts, out)
            all_reports.extend(reports)
        except Exception as exc:  # isolate per-method failures
            failures.append((token, f"{type(exc).__name__}: {exc}"))

    _write_grid(out / "grid_search.tsv", grid_rows, cfg_hash)
    _write_per_run(out / "per_run_metrics.tsv", all_reports, cfg_hash, config.seed)
    write_aggregates(out, all_reports, cfg_hash)
    if failures:
        with open(out / "failures.tsv", "w") as fh:
            fh.write("method\terror\n")
            for token, msg in failures:
                fh.write(f"{token}\t{msg}\n")
    return out


def _run_tasks(task_fn, tasks, data, propensities, config):
    """Run tasks in-process or on a worker pool; output order follows tasks."""
    if config.threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.threads, initializer=_pool_init,
                                 initargs=(data, propensities, config,
                                           config.cohorts)) as pool:
            return list(pool.map(task_fn, tasks))
    _pool_init(data, propensities, config, config.cohorts)
    return [task_fn(t) for t in tasks]


def _grid_search(token, data, propensities, config, cohorts):
    combos = _grid_for(token, config)
    tasks = [(token, d, lam, clip) for d, lam, clip in combos]
    results = _run_tasks(_pool_grid_task, tasks, data, propensities, config)
    rows = []
    best_combo, best_val = None, -np.inf
    for (tok, d, lam, clip), val in results:
        rows.append((token, d, lam, clip, val))
        if val > best_val:
            best_val = val
            best_combo = (d, lam, clip)
    return best_combo, rows


def _final_runs(token, combo, data, propensities, config, cohorts, out: Path):
    d, lam, clip = combo
    tasks = [(token, d, lam, clip, r) for r in range(config.runs)]
    results = _run_tasks(_pool_final_task, tasks, data, propensities, config)
    results.sort(key=lambda r: r[0][4])
    reports = []
    for (tok, dd, ll, cc, run_idx), run_reports, epoch_log in results:
        reports.extend(run_reports)
        log_path = out / "logs" / f"{token}_run{run_idx:03d}.log"
        with open(log_path, "w") as fh:
            for epoch, loss, val in epoch_log:
                val_str = "" if val is None else f"{val:.10g}"
                fh.write(f"epoch={epoch}\ttrain_loss={loss:.10g}\tval_dcg5={val_str}\n")
    return reports


# ---------------------------------------------------------------------------
# Report files


def _write_grid(path, rows, cfg_hash):
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write("method\td\tlambda\tclip\tval_dcg5\n")
        for token, d, lam, clip, val in rows:
            fh.write(f"{token}\t{d}\t{lam:.17g}\t{clip:.17g}\t{val:.17g}\n")


def _write_per_run(path, reports, cfg_hash, base_seed):
    rows = []
    for rep in reports:
        for metric in METRIC_NAMES:
            rows.append((rep.method, rep.run, rep.cohort, metric, rep.k,
                         getattr(rep, metric)))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    with open(path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\tbase_seed={base_seed}\n")
        fh.write("method\trun\tcohort\tmetric\tk\tvalue\n")
        for method, run, cohort, metric, k, value in rows:
            fh.write(f"{method}\t{run}\t{cohort}\t{metric}\t{k}\t{value:.17g}\n")


def read_per_run(path):
    """Parse per_run_metrics.tsv back into row tuples."""
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("method\t") or not line.strip():
                continue
            method, run, cohort, metric, k, value = line.rstrip("\n").split("\t")
            rows.append((method, int(run), cohort, metric, int(k), float(value)))
    return rows


def write_aggregates(out_dir, reports, cfg_hash):
    """aggregate.tsv, significance.tsv and tables.md from MetricReports."""
    out = Path(out_dir)
    rows = []
    for rep in reports:
        for metric in METRIC_NAMES:
            rows.append((rep.method, rep.run, rep.cohort, metric, rep.k,
                         getattr(rep, metric)))
    write_aggregates_from_rows(out, rows, cfg_hash)


def write_aggregates_from_rows(out_dir, rows, cfg_hash):
    out = Path(out_dir)
    groups: dict[tuple, dict[str, list]] = {}
    for method, run, cohort, metric, k, value in rows:
        groups.setdefault((cohort, metric, k), {}).setdefault(method, []).append(value)

    with open(out / "aggregate.tsv", "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write("method\tcohort\tmetric\tk\tmean\tstd\tn_runs\n")
        for (cohort, metric, k) in sorted(groups):
            for method in sorted(groups[(cohort, metric, k)]):
                vals = np.asarray(groups[(cohort, metric, k)][method])
                std = vals.std(ddof=1) if len(vals) > 1 else 0.0
                fh.write(f"{method}\t{cohort}\t{metric}\t{k}\t"
                         f"{vals.mean():.17g}\t{std:.17g}\t{len(vals)}\n")

    with open(out / "significance.tsv", "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write("cohort\tmetric\tk\tmethod\tbest_competitor\tp_value\n")
        for (cohort, metric, k) in sorted(groups):
            methods = sorted(groups[(cohort, metric, k)])
            if len(methods) < 2:
                continue
            means = {m: float(np.mean(groups[(cohort, metric, k)][m])) for m in methods}
            for method in methods:
                others = [m for m in methods if m != method]
                best = max(others, key=lambda m: (means[m], m))
                a = groups[(cohort, metric, k)][method]
                b = groups[(cohort, metric, k)][best]
                if len(a) < 2 or len(b) < 2:
                    continue
                p = one_tailed_t_test(a, b)
                fh.write(f"{cohort}\t{metric}\t{k}\t{method}\t{best}\t{p:.6g}\n")

    _write_tables_md(out / "tables.md", groups, cfg_hash)


def _write_tables_md(path, groups, cfg_hash):
    cohorts = sorted({c for (c, _, _) in groups})
    with open(path, "w") as fh:
        fh.write(f"<!-- config_hash={cfg_hash} -->\n")
        for cohort in cohorts:
            keys = [(m, k) for m in METRIC_NAMES
                    for k in sorted({kk for (c, mm, kk) in groups
                                     if c == cohort and mm == m})]
            methods = sorted({meth for (c, m, k) in groups if c == cohort
                              for meth in groups[(c, m, k)]},
                             key=lambda t: METHOD_TOKENS.index(t)
                             if t in METHOD_TOKENS else 99)
            fh.write(f"\n## Ranking performance (cohort: {cohort})\n\n")
            header = "| Method | " + " | ".join(
                f"{m.upper()}@{k}" for m, k in keys) + " |\n"
            fh.write(header)
            fh.write("|---" * (len(keys) + 1) + "|\n")
            for method in methods:
                cells = []
                for m, k in keys:
                    vals = groups.get((cohort, m, k), {}).get(method)
                    cells.append(f"{np.mean(vals):.5f}" if vals else "-")
                fh.write(f"| {DISPLAY_NAMES.get(method, method)} | "
                         + " | ".join(cells) + " |\n")
