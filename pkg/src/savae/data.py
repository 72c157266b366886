"""Datasets of per-subject feature vectors, preprocessing and the synthetic benchmark."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

FEMALE, MALE = 0, 1


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    sex: int
    age: float
    x1: np.ndarray
    x2: np.ndarray | None = None

    @property
    def multimodal(self) -> bool:
        return self.x2 is not None


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


class Dataset:
    """Immutable column-oriented collection of subjects.

    Features are stored as ``N x m1`` (and optionally ``N x m2``) arrays; use
    :attr:`records` for a per-subject view.
    """

    def __init__(self, ids: Sequence[str], sex, age, x1, x2=None, provenance: str = "file"):
        ids = tuple(str(i) for i in ids)
        sex = np.asarray(sex)
        age = np.asarray(age, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        n = len(ids)
        if n < 1:
            raise DataError("dataset is empty")
        if x1.ndim != 2 or x1.shape[0] != n:
            raise DataError(f"x1 must be {n} x m1, got {x1.shape}")
        if sex.shape != (n,) or age.shape != (n,):
            raise DataError("sex and age must be vectors with one entry per subject")
        if not np.all((sex == FEMALE) | (sex == MALE)):
            raise DataError("sex must be 0 (female) or 1 (male)")
        if not np.all((age > 0) & (age < 120)):
            raise DataError("ages must lie in (0, 120)")
        if len(set(ids)) != n:
            raise DataError("subject ids must be unique")
        if x2 is not None:
            x2 = np.asarray(x2, dtype=np.float64)
            if x2.ndim != 2 or x2.shape[0] != n:
                raise DataError(f"x2 must be {n} x m2, got {x2.shape}")
        self.ids = ids
        self.sex = _frozen(sex, np.int64)
        self.age = _frozen(age)
        self.x1 = _frozen(x1)
        self.x2 = None if x2 is None else _frozen(x2)
        self.provenance = provenance

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], provenance: str = "file") -> "Dataset":
        records = list(records)
        if not records:
            raise DataError("dataset is empty")
        has2 = {r.x2 is not None for r in records}
        if len(has2) > 1:
            raise DataError("mixing multimodal and unimodal records is not supported")
        x2 = np.stack([r.x2 for r in records]) if has2 == {True} else None
        return cls(
            [r.id for r in records],
            [r.sex for r in records],
            [r.age for r in records],
            np.stack([r.x1 for r in records]),
            x2,
            provenance,
        )

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same2 = (self.x2 is None and other.x2 is None) or (
            self.x2 is not None and other.x2 is not None and np.array_equal(self.x2, other.x2)
        )
        return (
            self.ids == other.ids
            and np.array_equal(self.sex, other.sex)
            and np.array_equal(self.age, other.age)
            and np.array_equal(self.x1, other.x1)
            and same2
        )

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def m1(self) -> int:
        return self.x1.shape[1]

    @property
    def m2(self) -> int | None:
        return None if self.x2 is None else self.x2.shape[1]

    @property
    def multimodal(self) -> bool:
        return self.x2 is not None

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(
                self.ids[i],
                int(self.sex[i]),
                float(self.age[i]),
                self.x1[i],
                None if self.x2 is None else self.x2[i],
            )
            for i in range(self.n)
        ]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in idx],
            self.sex[idx],
            self.age[idx],
            self.x1[idx],
            None if self.x2 is None else self.x2[idx],
            self.provenance,
        )

    def with_features(self, x1, x2=None) -> "Dataset":
        return Dataset(self.ids, self.sex, self.age, x1, x2, self.provenance)

    def unimodal(self) -> "Dataset":
        """Same subjects with modality 2 dropped."""
        return self.with_features(self.x1, None)


# ---------------------------------------------------------------------------
# CSV I/O

_F1 = re.compile(r"^f1_(\d+)$")
_F2 = re.compile(r"^f2_(\d+)$")


def _feature_columns(header, pattern, name):
    cols = [(i, int(m.group(1))) for i, h in enumerate(header) if (m := pattern.match(h))]
    if cols and [k for _, k in cols] != list(range(len(cols))):
        raise DataError(f"{name} columns must be numbered 0..m-1 in order", row=1)
    return [i for i, _ in cols]


def load_dataset(path) -> Dataset:
    """Read ``id,sex,age,f1_0..f1_{m1-1}[,f2_0..f2_{m2-1}]`` CSV with a header row."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        for required in ("id", "sex", "age"):
            if required not in header:
                raise DataError(f"missing required column {required!r}", row=1)
        i_id, i_sex, i_age = header.index("id"), header.index("sex"), header.index("age")
        c1 = _feature_columns(header, _F1, "f1_")
        c2 = _feature_columns(header, _F2, "f2_")
        if not c1:
            raise DataError("no modality-1 feature columns (f1_0, ...)", row=1)

        ids, sex, age, x1, x2 = [], [], [], [], []
        seen = set()
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} cells, found {len(row)}", row=line)

            def num(col):
                cell = row[col].strip()
                try:
                    val = float(cell)
                except ValueError:
                    raise DataError(f"malformed number {cell!r}", row=line, column=header[col]) from None
                if not np.isfinite(val):
                    raise DataError(f"non-finite value {cell!r}", row=line, column=header[col])
                return val

            sid = row[i_id].strip()
            if sid in seen:
                raise DataError(f"duplicate id {sid!r}", row=line, column="id")
            seen.add(sid)
            s = num(i_sex)
            if s not in (0.0, 1.0):
                raise DataError(f"sex must be 0 or 1, got {row[i_sex]!r}", row=line, column="sex")
            a = num(i_age)
            if not 0.0 < a < 120.0:
                raise DataError(f"age {a} outside (0, 120)", row=line, column="age")
            ids.append(sid)
            sex.append(int(s))
            age.append(a)
            x1.append([num(c) for c in c1])
            if c2:
                x2.append([num(c) for c in c2])
    if not ids:
        raise DataError(f"{path} has no data rows")
    return Dataset(ids, sex, age, np.array(x1), np.array(x2) if c2 else None, provenance="file")


def save_dataset(dataset: Dataset, path) -> Path:
    """Write ``dataset`` as CSV; floats use ``repr`` so a reload is bit-exact."""
    path = Path(path)
    header = ["id", "sex", "age"] + [f"f1_{j}" for j in range(dataset.m1)]
    if dataset.multimodal:
        header += [f"f2_{j}" for j in range(dataset.m2)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [dataset.ids[i], int(dataset.sex[i]), repr(float(dataset.age[i]))]
            row += [repr(v) for v in dataset.x1[i].tolist()]
            if dataset.multimodal:
                row += [repr(v) for v in dataset.x2[i].tolist()]
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# standardization


def _moments(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std <= 1e-12
    return mean, np.where(constant, 1.0, std), constant


@dataclass
class StandardizationStats:
    """Per-feature mean/std for each modality; constant features get std 1 and a flag."""

    mean1: np.ndarray
    std1: np.ndarray
    constant1: np.ndarray
    age_mean: float
    age_std: float
    mean2: np.ndarray | None = None
    std2: np.ndarray | None = None
    constant2: np.ndarray | None = None

    @classmethod
    def fit(cls, dataset: Dataset) -> "StandardizationStats":
        if dataset.n < 2:
            raise DataError("standardization needs at least 2 subjects")
        m1, s1, c1 = _moments(dataset.x1)
        stats = cls(m1, s1, c1, float(dataset.age.mean()), float(dataset.age.std()))
        if dataset.multimodal:
            stats.mean2, stats.std2, stats.constant2 = _moments(dataset.x2)
        return stats

    def transform(self, dataset: Dataset) -> Dataset:
        if dataset.m1 != self.mean1.size:
            raise DataError(f"modality 1 has {dataset.m1} features, stats expect {self.mean1.size}")
        x1 = (dataset.x1 - self.mean1) / self.std1
        x2 = None
        if dataset.multimodal:
            if self.mean2 is None or dataset.m2 != self.mean2.size:
                raise DataError("modality 2 does not match the standardization stats")
            x2 = (dataset.x2 - self.mean2) / self.std2
        return dataset.with_features(x1, x2)

    def inverse_transform(self, dataset: Dataset) -> Dataset:
        x1 = dataset.x1 * self.std1 + self.mean1
        x2 = None if dataset.x2 is None else dataset.x2 * self.std2 + self.mean2
        return dataset.with_features(x1, x2)

    @property
    def flagged(self) -> list[str]:
        names = [f"f1_{j}" for j in np.flatnonzero(self.constant1)]
        if self.constant2 is not None:
            names += [f"f2_{j}" for j in np.flatnonzero(self.constant2)]
        return names

    def to_arrays(self, prefix: str = "std.") -> dict[str, np.ndarray]:
        out = {
            prefix + "mean1": self.mean1,
            prefix + "std1": self.std1,
            prefix + "constant1": self.constant1,
            prefix + "age": np.array([self.age_mean, self.age_std]),
        }
        if self.mean2 is not None:
            out.update({prefix + "mean2": self.mean2, prefix + "std2": self.std2,
                        prefix + "constant2": self.constant2})
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "std.") -> "StandardizationStats":
        age = arrays[prefix + "age"]
        stats = cls(arrays[prefix + "mean1"], arrays[prefix + "std1"],
                    arrays[prefix + "constant1"].astype(bool), float(age[0]), float(age[1]))
        if prefix + "mean2" in arrays:
            stats.mean2 = arrays[prefix + "mean2"]
            stats.std2 = arrays[prefix + "std2"]
            stats.constant2 = arrays[prefix + "constant2"].astype(bool)
        return stats


def standardize(dataset: Dataset) -> tuple[Dataset, StandardizationStats]:
    """Fit zero-mean/unit-variance scaling on ``dataset`` and apply it. Ages stay in years."""
    stats = StandardizationStats.fit(dataset)
    return stats.transform(dataset), stats


# ---------------------------------------------------------------------------
# feature selection


@dataclass(frozen=True)
class FeatureMask:
    """Selected column indices (ascending) per modality."""

    idx1: tuple[int, ...]
    idx2: tuple[int, ...] | None = None

    def apply(self, dataset: Dataset) -> Dataset:
        if max(self.idx1) >= dataset.m1:
            raise DataError(f"feature mask needs {max(self.idx1) + 1} modality-1 features, dataset has {dataset.m1}")
        x1 = dataset.x1[:, list(self.idx1)]
        x2 = None
        if dataset.multimodal and self.idx2 is not None:
            if max(self.idx2) >= dataset.m2:
                raise DataError("feature mask does not fit modality 2")
            x2 = dataset.x2[:, list(self.idx2)]
        return dataset.with_features(x1, x2)


def abs_corr_scores(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|Pearson r| of every column with ``y``; zero-variance columns score 0."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum(axis=0) * (yc @ yc))
    num = xc.T @ yc
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, np.abs(num) / safe, 0.0)


def tree_importance_scores(x: np.ndarray, y: np.ndarray, seed: int = 0,
                           n_trees: int = 32, max_depth: int = 5) -> np.ndarray:
    """Mean impurity decrease over a small bagged ensemble of shallow regression trees."""
    from sklearn.ensemble import RandomForestRegressor

    forest = RandomForestRegressor(n_estimators=n_trees, max_depth=max_depth,
                                   max_features="sqrt", random_state=seed, n_jobs=1)
    forest.fit(x, y)
    return forest.feature_importances_


SCORERS = {"abs_corr": abs_corr_scores, "tree_importance": tree_importance_scores}


def _top(scores: np.ndarray, m: int) -> tuple[int, ...]:
    order = np.lexsort((np.arange(scores.size), -scores))
    return tuple(sorted(int(i) for i in order[:m]))


def select_features(train: Dataset, m: int, scorer: str = "abs_corr",
                    m2: int | None = None, seed: int = 0) -> FeatureMask:
    """Rank each modality's features by relevance to age and keep the top ``m`` (``m2``).

    Only ``train`` is read; callers pass the training split so held-out rows never
    influence the ranking.
    """
    if scorer not in SCORERS:
        raise ConfigError(f"unknown feature scorer {scorer!r}; choose from {sorted(SCORERS)}")
    m2 = m if m2 is None else m2

    def score(x):
        if scorer == "tree_importance":
            return tree_importance_scores(x, train.age, seed=seed)
        return abs_corr_scores(x, train.age)

    if not 1 <= m <= train.m1:
        raise ConfigError(f"cannot select {m} of {train.m1} modality-1 features")
    idx1 = _top(score(train.x1), m)
    idx2 = None
    if train.multimodal:
        if not 1 <= m2 <= train.m2:
            raise ConfigError(f"cannot select {m2} of {train.m2} modality-2 features")
        idx2 = _top(score(train.x2), m2)
    return FeatureMask(idx1, idx2)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    """Generative settings for the planted-factor benchmark.

    Each modality mixes ``k_shared`` common factors and ``k_distinct`` private
    factors through a column-normalized Gaussian matrix. Age depends on the shared
    factors with a sex-specific slope, plus a small contribution from modality 1's
    private factors.
    """

    n: int = 2000
    k_shared: int = 8
    k_distinct: int = 8
    d1: int = 256
    d2: int = 256
    noise_std: float = 0.3
    beta_female: float = 6.0
    beta_male: float = 9.6
    age_intercept: float = 40.0
    distinct_age_weight: float = 0.3
    age_noise: float = 0.5
    multimodal: bool = True
    seed: int = 0

    def validate(self):
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.k_shared < 1 or self.k_distinct < 1:
            raise ConfigError("factor counts must be positive")
        if self.k_shared + self.k_distinct > min(self.d1, self.d2):
            raise ConfigError("k_shared + k_distinct must not exceed the raw feature dims")
        if self.noise_std < 0 or self.age_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SyntheticGroundTruth:
    shared: np.ndarray  # n x k_shared
    distinct1: np.ndarray  # n x k_distinct
    distinct2: np.ndarray
    mix1: np.ndarray  # d1 x (k_shared + k_distinct)
    mix2: np.ndarray
    age_direction: np.ndarray  # unit vector over shared factors
    distinct_direction: np.ndarray  # unit vector over modality-1 private factors
    slope: np.ndarray  # per-subject sex slope
    noise1: np.ndarray = field(repr=False, default=None)
    noise2: np.ndarray = field(repr=False, default=None)


def _mixing(rng, d, k):
    a = rng.standard_normal((d, k))
    return a / np.linalg.norm(a, axis=0, keepdims=True)


def _unit(rng, k):
    v = rng.standard_normal(k)
    return v / np.linalg.norm(v)


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, SyntheticGroundTruth]:
    """Sample subjects from the planted-factor model described by ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ks, kd = spec.k_shared, spec.k_distinct
    mix1 = _mixing(rng, spec.d1, ks + kd)
    mix2 = _mixing(rng, spec.d2, ks + kd)
    w = _unit(rng, ks)
    v = _unit(rng, kd)
    s = rng.standard_normal((spec.n, ks))
    d1 = rng.standard_normal((spec.n, kd))
    d2 = rng.standard_normal((spec.n, kd))
    sex = (rng.random(spec.n) < 0.5).astype(np.int64)
    e1 = spec.noise_std * rng.standard_normal((spec.n, spec.d1))
    e2 = spec.noise_std * rng.standard_normal((spec.n, spec.d2))
    eps_age = spec.age_noise * rng.standard_normal(spec.n)

    x1 = np.hstack([s, d1]) @ mix1.T + e1
    x2 = np.hstack([s, d2]) @ mix2.T + e2
    slope = np.where(sex == MALE, spec.beta_male, spec.beta_female)
    age = spec.age_intercept + slope * (s @ w) + spec.distinct_age_weight * (d1 @ v) + eps_age
    age = np.clip(age, 18.0, 86.0)

    ids = [f"s{i:05d}" for i in range(spec.n)]
    ds = Dataset(ids, sex, age, x1, x2 if spec.multimodal else None, provenance="synthetic")
    truth = SyntheticGroundTruth(s, d1, d2, mix1, mix2, w, v, slope, e1, e2)
    return ds, truth


def save_ground_truth(truth: SyntheticGroundTruth, spec: SyntheticSpec, path) -> Path:
    """Companion file: all generating matrices (row-major) plus the spec as JSON."""
    path = Path(path)
    arrays = {k: np.ascontiguousarray(v) for k, v in vars(truth).items() if v is not None}
    with path.open("wb") as fh:
        np.savez(fh, spec_json=np.array(spec.to_json()), **arrays)
    return path


def load_ground_truth(path) -> tuple[SyntheticGroundTruth, SyntheticSpec]:
    with np.load(path, allow_pickle=False) as z:
        spec = SyntheticSpec(**json.loads(str(z["spec_json"])))
        fields = {k: z[k] for k in z.files if k != "spec_json"}
    return SyntheticGroundTruth(**fields), spec


def stratified_split(sex: np.ndarray, fraction: float, rng: np.random.Generator):
    """Split indices into (train, held) with roughly ``fraction`` of each sex held out."""
    train, held = [], []
    for value in (FEMALE, MALE):
        idx = np.flatnonzero(sex == value)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        if idx.size >= 2:
            k = min(max(k, 1), idx.size - 1)
        else:
            k = 0
        held.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))
