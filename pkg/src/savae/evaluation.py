"""Regression metrics, sex/age-group breakdowns, cross-validation and paired ablations."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, FeatureMask, StandardizationStats, select_features
from .errors import ConfigError
from .networks import VARIANTS, predict, variant_flags
from .training import TrainConfig, fit, kfold_split

log = logging.getLogger(__name__)

AGE_GROUPS = {"G1": (0.0, 25.0), "G2": (25.0, 35.0), "G3": (35.0, 45.0), "G4": (45.0, 55.0)}


@dataclass
class MetricsReport:
    mae: float
    mae_std: float  # population std of the absolute errors
    rmse: float
    r2: float | None  # None when the targets have zero variance
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return None if d is None else cls(**d)


def compute_metrics(y, y_hat) -> MetricsReport:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size == 0 or y.size != y_hat.size:
        raise ValueError(f"need equal, non-zero lengths, got {y.size} and {y_hat.size}")
    err = y - y_hat
    abs_err = np.abs(err)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(err**2)) / ss_tot
    return MetricsReport(float(abs_err.mean()), float(abs_err.std()), float(np.sqrt(np.mean(err**2))),
                         r2, int(y.size))


@dataclass
class GroupMetrics:
    """Metrics overall, by sex and by age group; empty cells are ``None``."""

    overall: MetricsReport
    male: MetricsReport | None
    female: MetricsReport | None
    groups: dict[str, MetricsReport | None]
    unbinned: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "male": None if self.male is None else self.male.to_dict(),
            "female": None if self.female is None else self.female.to_dict(),
            "groups": {k: None if v is None else v.to_dict() for k, v in self.groups.items()},
            "unbinned": self.unbinned,
        }

    @classmethod
    def from_dict(cls, d) -> "GroupMetrics":
        return cls(
            MetricsReport.from_dict(d["overall"]),
            MetricsReport.from_dict(d["male"]),
            MetricsReport.from_dict(d["female"]),
            {k: MetricsReport.from_dict(v) for k, v in d["groups"].items()},
            d["unbinned"],
        )


def _cell(y, y_hat, mask):
    return compute_metrics(y[mask], y_hat[mask]) if mask.any() else None


def group_breakdown(records, y_hat, sex=None) -> GroupMetrics:
    """Break predictions down by sex and by the G1-G4 age bins (left-inclusive).

    ``records`` is a :class:`Dataset`, a list of subject records, or an age
    vector (then ``sex`` must be given). Subjects of 55 or older appear only in
    the overall and per-sex cells and are counted in ``unbinned``.
    """
    if isinstance(records, Dataset):
        ages, sex = records.age, records.sex
    elif sex is not None:
        ages = np.asarray(records, dtype=np.float64)
    else:
        ages = np.array([r.age for r in records], dtype=np.float64)
        sex = np.array([r.sex for r in records])
    sex = np.asarray(sex)
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y_hat.size != ages.size:
        raise ValueError("predictions are not aligned with the subjects")
    groups = {}
    binned = np.zeros(ages.size, dtype=bool)
    for name, (lo, hi) in AGE_GROUPS.items():
        mask = (ages >= lo) & (ages < hi)
        binned |= mask
        groups[name] = _cell(ages, y_hat, mask)
    return GroupMetrics(
        compute_metrics(ages, y_hat),
        _cell(ages, y_hat, sex == 1),
        _cell(ages, y_hat, sex == 0),
        groups,
        int((~binned).sum()),
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class PrepConfig:
    """Per-fold preprocessing: feature selection then standardization."""

    n_features: int | None = 128  # None keeps every feature
    n_features2: int | None = None  # defaults to n_features
    scorer: str = "abs_corr"


def preprocess(train: Dataset, test: Dataset, prep: PrepConfig, seed: int = 0):
    """Fit selection and scaling on ``train`` only and apply both to ``test``."""
    mask = None
    if prep.n_features is not None:
        m2 = prep.n_features if prep.n_features2 is None else prep.n_features2
        mask = select_features(train, prep.n_features, prep.scorer, m2=m2, seed=seed)
        train, test = mask.apply(train), mask.apply(test)
    stats = StandardizationStats.fit(train)
    return stats.transform(train), stats.transform(test), mask, stats


def _fold_job(args):
    dataset, config, prep, fold_seed, train_idx, test_idx = args
    train, test, _mask, _stats = preprocess(dataset.subset(train_idx), dataset.subset(test_idx),
                                            prep, seed=fold_seed)
    bundle, history = fit(train, replace(config, seed=fold_seed))
    x2 = None if bundle.arch.unimodal else test.x2
    return predict(bundle, test.x1, x2, test.sex), history.best_epoch, len(history.epochs)


def fold_seed(seed: int, fold: int) -> int:
    return int(seed) * 1000 + int(fold)


@dataclass
class CVResult:
    """Pooled held-out predictions and metrics of one variant, for each seed."""

    variant: str
    mode: str
    seeds: list[int]
    k: int
    per_seed: list[GroupMetrics]
    fold_mae: list[list[float]]
    predictions: list[list[float | None]]
    fold_digests: list[str]
    epochs: list[list[int]] = field(default_factory=list)

    @property
    def mae(self) -> list[float]:
        return [g.overall.mae for g in self.per_seed]

    def summary(self) -> dict:
        out = {}
        for key in ("mae", "rmse", "r2"):
            vals = [getattr(g.overall, key) for g in self.per_seed]
            vals = [v for v in vals if v is not None]
            out[key] = {"mean": float(np.mean(vals)) if vals else None,
                        "std": float(np.std(vals)) if vals else None}
        out["mae_abs_err_std"] = float(np.mean([g.overall.mae_std for g in self.per_seed]))
        fold = [m for seed_folds in self.fold_mae for m in seed_folds]
        out["fold_mae_std"] = float(np.std(fold)) if fold else None
        return out

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mode": self.mode,
            "seeds": list(self.seeds),
            "k": self.k,
            "summary": self.summary(),
            "per_seed": [g.to_dict() for g in self.per_seed],
            "fold_mae": self.fold_mae,
            "fold_digests": self.fold_digests,
            "epochs": self.epochs,
            "predictions": self.predictions,
        }

    @classmethod
    def from_dict(cls, d) -> "CVResult":
        return cls(d["variant"], d["mode"], d["seeds"], d["k"],
                   [GroupMetrics.from_dict(g) for g in d["per_seed"]], d["fold_mae"],
                   d["predictions"], d["fold_digests"], d.get("epochs", []))


def _run_jobs(jobs, n_workers: int):
    if n_workers <= 1 or len(jobs) <= 1:
        return [_fold_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_fold_job, jobs))


def _cv_jobs(dataset, config, k, seeds, prep, max_folds):
    jobs, keys, digests = [], [], []
    for seed in seeds:
        folds = kfold_split(dataset.n, k, seed)
        digests.append(folds.digest())
        for f in range(k if max_folds is None else min(k, max_folds)):
            test_idx = folds.test_indices(f)
            if test_idx.size < 1:
                raise ConfigError(f"fold {f} is empty")
            jobs.append((dataset, config, prep, fold_seed(seed, f), folds.train_indices(f), test_idx))
            keys.append((seed, f, test_idx))
    return jobs, keys, digests


def _assemble(dataset, config, k, seeds, keys, digests, results) -> CVResult:
    per_seed, fold_mae, preds, epochs = [], [], [], []
    for seed in seeds:
        pooled = np.full(dataset.n, np.nan)
        maes, eps = [], []
        for (s, _f, test_idx), (y_hat, best_epoch, n_epochs) in zip(keys, results):
            if s != seed:
                continue
            if not np.all(np.isnan(pooled[test_idx])):
                raise RuntimeError("a subject was predicted twice")
            pooled[test_idx] = y_hat
            maes.append(float(np.mean(np.abs(y_hat - dataset.age[test_idx]))))
            eps.append(n_epochs)
        covered = ~np.isnan(pooled)
        per_seed.append(group_breakdown(dataset.age[covered], pooled[covered], dataset.sex[covered]))
        fold_mae.append(maes)
        epochs.append(eps)
        preds.append([None if np.isnan(v) else float(v) for v in pooled])
    return CVResult(config.variant, config.mode, list(seeds), k, per_seed, fold_mae, preds, digests, epochs)


def evaluate_cv(dataset: Dataset, config: TrainConfig, k: int = 10, seeds=(0,),
                prep: PrepConfig = PrepConfig(), max_folds: int | None = None,
                jobs: int = 1) -> CVResult:
    """k-fold CV: per fold, refit feature selection, scaling and the model on the other folds.

    ``max_folds`` evaluates only the first folds (a hold-out shortcut); by default
    every subject is predicted exactly once per seed.
    """
    config.validate()
    if k < 2:
        raise ConfigError("k must be at least 2")
    job_list, keys, digests = _cv_jobs(dataset, config, k, seeds, prep, max_folds)
    results = _run_jobs(job_list, jobs)
    return _assemble(dataset, config, k, seeds, keys, digests, results)


@dataclass
class AblationTable:
    entries: dict[str, CVResult]

    def to_dict(self) -> dict:
        return {name: entry.to_dict() for name, entry in self.entries.items()}

    @classmethod
    def from_dict(cls, d) -> "AblationTable":
        return cls({name: CVResult.from_dict(v) for name, v in d.items()})

    def mean_mae(self, variant: str) -> float:
        return float(np.mean(self.entries[variant].mae))

    def format(self) -> str:
        """Human-readable table: overall / male / female MAE and the G1-G4 breakdown."""
        head = (f"{'variant':<10} {'MAE':>16} {'RMSE':>7} {'R2':>7} {'male MAE':>9} {'female MAE':>10}"
                + "".join(f" {g:>6}" for g in AGE_GROUPS))
        lines = [head, "-" * len(head)]

        def mean_of(entry, get):
            vals = [get(g) for g in entry.per_seed]
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else float("nan")

        for name, entry in self.entries.items():
            mae = mean_of(entry, lambda g: g.overall.mae)
            sd = mean_of(entry, lambda g: g.overall.mae_std)
            row = (f"{name:<10} {mae:>8.3f} ± {sd:<5.3f} {mean_of(entry, lambda g: g.overall.rmse):>7.3f}"
                   f" {mean_of(entry, lambda g: g.overall.r2):>7.3f}"
                   f" {mean_of(entry, lambda g: g.male and g.male.mae):>9.3f}"
                   f" {mean_of(entry, lambda g: g.female and g.female.mae):>10.3f}")
            for gname in AGE_GROUPS:
                row += f" {mean_of(entry, lambda g, n=gname: g.groups[n] and g.groups[n].mae):>6.2f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def run_ablation(dataset: Dataset, variants, config: TrainConfig, k: int = 10, seeds=(0,),
                 prep: PrepConfig = PrepConfig(), max_folds: int | None = None,
                 jobs: int = 1) -> AblationTable:
    """Evaluate each variant on identical folds, preprocessing and init seeds."""
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        variant_flags(v)
    all_jobs, layout = [], []
    for v in variants:
        cfg = replace(config, variant=v).validate()
        jl, keys, digests = _cv_jobs(dataset, cfg, k, seeds, prep, max_folds)
        layout.append((v, cfg, keys, digests, len(all_jobs), len(jl)))
        all_jobs.extend(jl)
    results = _run_jobs(all_jobs, jobs)
    entries = {}
    for v, cfg, keys, digests, start, count in layout:
        entries[v] = _assemble(dataset, cfg, k, seeds, keys, digests, results[start:start + count])
    return AblationTable(entries)


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for arr in (dataset.x1, dataset.x2, dataset.age, dataset.sex):
        if arr is not None:
            h.update(np.ascontiguousarray(arr).tobytes())
    h.update("\n".join(dataset.ids).encode())
    return h.hexdigest()[:16]
