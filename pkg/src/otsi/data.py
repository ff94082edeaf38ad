"""
Datasets: the rotated two-moons benchmark, CSV ingestion, splitting,
standardization and PCA.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .core import PointCloud
from .errors import InputError, ParseError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabeledDataset:
    """Points with optional per-point subset labels and ground-truth pair ids."""

    points: np.ndarray
    labels: np.ndarray = None
    pair_ids: np.ndarray = None
    feature_names: tuple = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise InputError(f"points must be 2-D, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)
        n = pts.shape[0]
        for name in ("labels", "pair_ids"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.shape != (n,):
                    raise InputError(f"{name} has length {arr.shape}, expected {n}")
                object.__setattr__(self, name, arr)
        names = self.feature_names
        if names is None:
            names = tuple(f"x{k}" for k in range(pts.shape[1]))
        object.__setattr__(self, "feature_names", tuple(names))

    def __len__(self):
        return self.points.shape[0]

    @property
    def cloud(self):
        return PointCloud(self.points)

    def take(self, index):
        index = np.asarray(index, dtype=int)
        return LabeledDataset(
            self.points[index],
            None if self.labels is None else self.labels[index],
            None if self.pair_ids is None else self.pair_ids[index],
            self.feature_names,
        )

    def with_points(self, points, feature_names=None):
        return LabeledDataset(points, self.labels, self.pair_ids, feature_names)


@dataclass(frozen=True)
class MoonSpec:
    """Rotated two-moons benchmark.

    Each split draws ``n_*`` points per moon on the unit-radius arcs
    ``(cos t, sin t)`` and ``(1 - cos t, 1/2 - sin t)`` with ``t`` uniform on
    ``[0, pi]``. The target copies every source point, adds isotropic noise
    of std ``noise_sigma`` and rotates by ``rotation_degrees`` about the
    source centroid. ``scale`` multiplies all coordinates afterwards, so
    the noise level is relative to the unit arcs. With the default scale of
    3 the squared spacing of neighbouring points is large compared with
    ``1/lam`` at ``lam = 1e3``, so entropic plans are sharp enough to
    distinguish neighbours.
    """

    n_train: int = 100
    n_val: int = 50
    n_test: int = 100
    rotation_degrees: float = 60.0
    noise_sigma: float = 0.02
    source_noise: float = 0.0
    scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be at least 1")
        if self.noise_sigma < 0 or self.source_noise < 0:
            raise InputError("noise levels must be nonnegative")
        if not self.scale > 0:
            raise InputError("scale must be positive")

    def size(self, split):
        return int(getattr(self, f"n_{split}"))


def _rotation(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def make_two_moons(spec, split="train"):
    """Source and target `LabeledDataset` for one split of the benchmark.

    Rows are ordered moon 0 then moon 1; target row ``j`` was generated from
    source row ``j`` (``pair_ids`` record this). Every split has its own
    seed spawned from ``spec.seed``.
    """
    if split not in SPLITS:
        raise InputError(f"unknown split {split!r}; expected one of {SPLITS}")
    ss = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))[SPLITS.index(split)]
    rng = np.random.default_rng(ss)
    n = spec.size(split)
    t0 = rng.uniform(0.0, np.pi, n)
    t1 = rng.uniform(0.0, np.pi, n)
    X = np.vstack([np.column_stack([np.cos(t0), np.sin(t0)]),
                   np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])])
    if spec.source_noise > 0:
        X = X + spec.source_noise * rng.standard_normal(X.shape)
    noise = rng.standard_normal(X.shape)
    center = X.mean(axis=0)
    Y = X + spec.noise_sigma * noise
    if spec.rotation_degrees % 360 != 0:  # a full turn keeps the points bit-exact
        Y = (Y - center) @ _rotation(spec.rotation_degrees).T + center
    labels = np.repeat([0, 1], n)
    ids = np.arange(2 * n)
    s = spec.scale
    return (LabeledDataset(s * X, labels, ids, ("x0", "x1")),
            LabeledDataset(s * Y, labels.copy(), ids.copy(), ("x0", "x1")))


def two_moons_splits(spec):
    """``{split: (source, target)}`` for train, val and test."""
    return {split: make_two_moons(spec, split) for split in SPLITS}


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of a dataset CSV.

    ``features=None`` takes every column that is not the label or pair id.
    """

    features: tuple = None
    label: str = None
    pair_id: str = None


def load_csv(path, schema=None):
    """Read a UTF-8, comma-separated file with a header row."""
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty; a header row is required", line=1) from None
        header = [h.strip() for h in header]
        col = {h: k for k, h in enumerate(header)}
        for role in (schema.label, schema.pair_id, *(schema.features or ())):
            if role is not None and role not in col:
                raise ParseError(f"missing column {role!r}", line=1)
        special = {schema.label, schema.pair_id} - {None}
        features = list(schema.features) if schema.features else [h for h in header if h not in special]
        if not features:
            raise ParseError("no feature columns", line=1)
        fidx = [col[f] for f in features]
        rows, labels, ids = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                rows.append([float(row[k]) for k in fidx])
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno) from None
            if schema.label is not None:
                labels.append(row[col[schema.label]].strip())
            if schema.pair_id is not None:
                try:
                    ids.append(int(row[col[schema.pair_id]]))
                except ValueError:
                    raise ParseError("pair id must be an integer", line=lineno) from None
    if not rows:
        raise ParseError("dataset has no rows")
    pts = np.array(rows, dtype=float)
    if not np.all(np.isfinite(pts)):
        raise ParseError("features contain NaN or Inf")
    lab = None
    if schema.label is not None:
        lab = np.array(labels)
        try:
            lab = lab.astype(int)
        except ValueError:
            pass
    return LabeledDataset(pts, lab, np.array(ids) if schema.pair_id is not None else None,
                          tuple(features))


def save_csv(dataset, path):
    """Write features, then ``label`` and ``pair_id`` columns when present."""
    header = list(dataset.feature_names)
    if dataset.labels is not None:
        header.append("label")
    if dataset.pair_ids is not None:
        header.append("pair_id")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.points[i]]
            if dataset.labels is not None:
                row.append(str(dataset.labels[i]))
            if dataset.pair_ids is not None:
                row.append(str(int(dataset.pair_ids[i])))
            w.writerow(row)


def dataset_schema(dataset):
    """The `CsvSchema` that `save_csv` output loads back with."""
    return CsvSchema(tuple(dataset.feature_names),
                     "label" if dataset.labels is not None else None,
                     "pair_id" if dataset.pair_ids is not None else None)


def _apportion(n, ratios):
    """Largest-remainder split of ``n`` items by ``ratios``."""
    raw = np.asarray(ratios, dtype=float) * n
    sizes = np.floor(raw).astype(int)
    short = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes


def split(dataset, ratios=(0.5, 0.2, 0.3), stratify_by_label=False, seed=0):
    """Disjoint, exhaustive ``(train, val, test)`` partition.

    With ``stratify_by_label`` each label class is apportioned separately.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1) > 1e-9:
        raise InputError(f"ratios must be three nonnegative numbers summing to 1, got {ratios.tolist()}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    if stratify_by_label:
        if dataset.labels is None:
            raise InputError("stratified split needs labels")
        n_parts = int(np.count_nonzero(ratios))
        parts = [[], [], []]
        for c in np.unique(dataset.labels):
            idx = np.flatnonzero(dataset.labels == c)
            if len(idx) < n_parts:
                raise InputError(f"class {c!r} has {len(idx)} points, fewer than {n_parts} splits")
            idx = rng.permutation(idx)
            bounds = np.cumsum(_apportion(len(idx), ratios))
            for k, chunk in enumerate(np.split(idx, bounds[:-1])):
                parts[k].extend(chunk.tolist())
        index = [np.sort(np.array(p, dtype=int)) for p in parts]
    else:
        perm = rng.permutation(n)
        bounds = np.cumsum(_apportion(n, ratios))
        index = [np.sort(p) for p in np.split(perm, bounds[:-1])]
    return tuple(dataset.take(i) for i in index)


@dataclass(frozen=True)
class Standardizer:
    """Per-feature zero mean / unit variance, with statistics from one fit set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, points):
        points = np.asarray(points, dtype=float)
        mean = points.mean(axis=0)
        std = points.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def transform(self, points):
        return (np.asarray(points, dtype=float) - self.mean) / self.std


def standardize(train, *others):
    """Fit on `train`, apply to every dataset; returns the transformed datasets."""
    st = Standardizer.fit(train.points)
    return tuple(d.with_points(st.transform(d.points), d.feature_names) for d in (train, *others))


@dataclass(frozen=True)
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    variances: np.ndarray

    def transform(self, points):
        return (np.asarray(points, dtype=float) - self.mean) @ self.components.T


def fit_pca(points, k):
    """Top-``k`` principal axes of the mean-centred covariance.

    Each axis is signed so that its largest-magnitude coordinate is positive.
    """
    X = np.asarray(points, dtype=float)
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise InputError(f"k={k} must lie in [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1) if n > 1 else np.zeros((d, d))
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), pivot])[:, None]
    return PCA(mean, comps, vals[order])


def pca_project(train, others=(), k=10):
    """Fit PCA on `train` only and project `train` and every cloud in `others`.

    Accepts arrays, `PointCloud` or `LabeledDataset`; returns the same kinds.
    """
    def pts(obj):
        return obj.points if isinstance(obj, (PointCloud, LabeledDataset)) else np.asarray(obj, float)

    def wrap(obj, Z):
        if isinstance(obj, LabeledDataset):
            return obj.with_points(Z, tuple(f"pc{j}" for j in range(Z.shape[1])))
        if isinstance(obj, PointCloud):
            return PointCloud(Z, obj.weights)
        return Z

    pca = fit_pca(pts(train), k)
    projected = [wrap(o, pca.transform(pts(o))) for o in (train, *others)]
    return projected[0], projected[1:]
