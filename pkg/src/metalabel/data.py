"""Synthetic datasets, splits, label-noise injection, unlabeled marking.

All operations are pure: they return a new Dataset and never mutate their
input. Verified-clean rows (meta and test splits) are never touched by any
injector. Reads of an unlabeled row's training label go through a guard that
raises, so no training path can consume a masked label by accident.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import Tensor, no_grad, softmax
from .nn import Mlp

TRAIN, META, TEST = "train", "meta", "test"
SPLITS = (TRAIN, META, TEST)

DATASET_FORMAT_VERSION = 1


class UnlabeledLabelError(RuntimeError):
    """A training path asked for the label of a row marked unlabeled."""


class DegenerateOracleError(ValueError):
    """The margin oracle produces (near-)uniform outputs everywhere."""


@dataclass
class NoiseSpec:
    kind: str  # "uniform" | "feature-dependent"
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "feature-dependent"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"noise.ratio must be in [0, 1], got {self.ratio}")


@dataclass
class Dataset:
    """Feature matrix plus clean/noisy labels, labeled mask and split tags.

    Invariants (checked on construction): meta and test rows keep
    y_noisy == y_clean and are always labeled; unlabeled rows occur only in
    the train split; class indices lie in [0, n_classes).
    """

    x: np.ndarray          # (N, D) float64
    y_clean: np.ndarray    # (N,) int64
    y_noisy: np.ndarray    # (N,) int64
    labeled: np.ndarray    # (N,) bool
    split: np.ndarray      # (N,) {train, meta, test}
    n_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y_clean = np.asarray(self.y_clean, dtype=np.int64)
        self.y_noisy = np.asarray(self.y_noisy, dtype=np.int64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        self.split = np.asarray(self.split, dtype="<U5")
        n = self.x.shape[0]
        if self.x.ndim != 2:
            raise ValueError("x must be a matrix")
        for name in ("y_clean", "y_noisy", "labeled", "split"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} length does not match x")
        if not np.all(np.isin(self.split, SPLITS)):
            raise ValueError("split tags must be train/meta/test")
        for y in (self.y_clean, self.y_noisy):
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError("class index out of range")
        clean_rows = self.split != TRAIN
        if not np.array_equal(self.y_noisy[clean_rows], self.y_clean[clean_rows]):
            raise ValueError("meta/test rows must keep clean labels")
        if not np.all(self.labeled[clean_rows]):
            raise ValueError("unlabeled rows may occur only in the train split")

    # -- accessors ---------------------------------------------------------

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dims(self) -> int:
        return self.x.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def labeled_train_indices(self) -> np.ndarray:
        return np.flatnonzero((self.split == TRAIN) & self.labeled)

    def train_labels(self, rows: np.ndarray) -> np.ndarray:
        """Guarded read of training labels (the noisy ones).

        Raises UnlabeledLabelError if any requested row is masked unlabeled,
        and ValueError for rows outside the train split.
        """
        rows = np.asarray(rows)
        if np.any(self.split[rows] != TRAIN):
            raise ValueError("train_labels is only defined on the train split")
        if not np.all(self.labeled[rows]):
            bad = rows[~self.labeled[rows]][:5]
            raise UnlabeledLabelError(
                f"label read on unlabeled row(s) {bad.tolist()}")
        return self.y_noisy[rows].copy()

    def copy(self) -> "Dataset":
        return Dataset(self.x.copy(), self.y_clean.copy(), self.y_noisy.copy(),
                       self.labeled.copy(), self.split.copy(), self.n_classes,
                       dict(self.provenance))


# ---------------------------------------------------------------------------
# synthesis and splitting


def make_synthetic(n: int, classes: int, dims: int, seed: int,
                   center_scale: float = 3.0) -> Dataset:
    """Balanced Gaussian class blobs with unit isotropic covariance.

    Cluster centers sit on a scaled simplex (center_scale times the standard
    basis), so all class pairs are equidistant; larger center_scale means
    less overlap. Rows are shuffled; labels start clean (y_noisy == y_clean).
    """
    if classes < 2 or n < classes * 10:
        raise ValueError(f"degenerate counts: n={n}, classes={classes} (need n >= 10*classes)")
    if dims < classes:
        raise ValueError(f"need dims >= classes to place simplex centers ({dims} < {classes})")
    rng = np.random.default_rng(seed)
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    y = np.repeat(np.arange(classes), counts)
    centers = np.zeros((classes, dims))
    centers[np.arange(classes), np.arange(classes)] = center_scale
    x = centers[y] + rng.standard_normal((n, dims))
    order = rng.permutation(n)
    x, y = x[order], y[order]
    return Dataset(
        x=x, y_clean=y, y_noisy=y.copy(),
        labeled=np.ones(n, dtype=bool),
        split=np.full(n, TRAIN, dtype="<U5"),
        n_classes=classes,
        provenance={"synthetic": {"n": n, "classes": classes, "dims": dims,
                                  "seed": seed, "center_scale": center_scale}},
    )


def _largest_remainder(total: int, fracs: list[float]) -> list[int]:
    raw = [f * total for f in fracs]
    base = [math.floor(r) for r in raw]
    short = total - sum(base)
    remainders = sorted(range(len(fracs)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in remainders[:short]:
        base[i] += 1
    return base


def split_dataset(ds: Dataset, train_frac: float, meta_frac: float,
                  test_frac: float, seed: int) -> Dataset:
    """Class-stratified assignment of train/meta/test tags.

    Per-class sizes follow largest-remainder rounding of the fractions, so
    balanced data yields exact global split sizes. Meta and test rows keep
    clean labels permanently; splitting resets y_noisy to the clean labels
    and clears any unlabeled marks (noise is injected after splitting).
    """
    fracs = (train_frac, meta_frac, test_frac)
    if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fracs}")
    rng = np.random.default_rng(seed)
    tags = np.empty(ds.n, dtype="<U5")
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.y_clean == c)
        rng.shuffle(idx)
        n_train, n_meta, n_test = _largest_remainder(idx.size, list(fracs))
        tags[idx[:n_train]] = TRAIN
        tags[idx[n_train:n_train + n_meta]] = META
        tags[idx[n_train + n_meta:]] = TEST
    out = replace(ds, split=tags, y_noisy=ds.y_clean.copy(),
                  labeled=np.ones(ds.n, dtype=bool))
    return out


# ---------------------------------------------------------------------------
# noise injection


def inject_uniform(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Flip each train label with probability `ratio` to a uniformly random
    other class. Meta/test rows are untouched."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    train_idx = ds.indices(TRAIN)
    y_noisy = ds.y_clean.copy()
    flip = rng.random(train_idx.size) < ratio
    offsets = rng.integers(1, ds.n_classes, size=train_idx.size)
    rows = train_idx[flip]
    y_noisy[rows] = (ds.y_clean[rows] + offsets[flip]) % ds.n_classes
    prov = dict(ds.provenance)
    prov["noise"] = {"kind": "uniform", "ratio": ratio, "seed": seed}
    return replace(ds, y_noisy=y_noisy, provenance=prov)


def margins(oracle: Mlp, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row confidence margin (top softmax prob minus runner-up) and the
    runner-up class under the oracle."""
    with no_grad():
        logits, _ = oracle.forward(Tensor(x))
        probs = softmax(logits).value
    order = np.argsort(-probs, axis=1, kind="stable")
    top, runner = order[:, 0], order[:, 1]
    rows = np.arange(x.shape[0])
    return probs[rows, top] - probs[rows, runner], runner


def inject_feature_dependent(ds: Dataset, ratio: float, oracle: Mlp,
                             seed: int) -> Dataset:
    """Flip the ceil(ratio * n_train) train rows with the smallest oracle
    margin to the oracle's runner-up class for that row.

    Rank-based: the flipped set is exactly the lowest-margin quota, ties in
    margin broken by the seed. Mimics annotator confusion near decision
    boundaries. Raises DegenerateOracleError for an untrained oracle.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must be in [0, 1], got {ratio}")
    train_idx = ds.indices(TRAIN)
    margin, runner = margins(oracle, ds.x[train_idx])
    if margin.max(initial=0.0) < 1e-8:
        raise DegenerateOracleError("oracle margins are uniformly ~0; train it first")
    y_noisy = ds.y_clean.copy()
    k = math.ceil(ratio * train_idx.size)
    if k > 0:
        rng = np.random.default_rng(seed)
        tiebreak = rng.permutation(train_idx.size)
        order = np.lexsort((tiebreak, margin))
        chosen = order[:k]
        y_noisy[train_idx[chosen]] = runner[chosen]
    prov = dict(ds.provenance)
    prov["noise"] = {"kind": "feature-dependent", "ratio": ratio, "seed": seed}
    return replace(ds, y_noisy=y_noisy, provenance=prov)


def mark_unlabeled(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Mask a uniform random fraction of train rows as unlabeled.

    Their y_noisy stays stored (for serialization) but any guarded label
    read on them raises UnlabeledLabelError.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"unlabeled fraction must be in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx = ds.indices(TRAIN)
    k = int(round(fraction * train_idx.size))
    masked = rng.choice(train_idx, size=k, replace=False)
    labeled = np.ones(ds.n, dtype=bool)
    labeled[masked] = False
    prov = dict(ds.provenance)
    prov["unlabeled"] = {"fraction": fraction, "seed": seed}
    return replace(ds, labeled=labeled, provenance=prov)


# ---------------------------------------------------------------------------
# persistence: one file, JSON header line + CSV body, bit-exact floats


def save_dataset(ds: Dataset, path: str) -> None:
    header = {
        "version": DATASET_FORMAT_VERSION,
        "n": ds.n,
        "d": ds.dims,
        "c": ds.n_classes,
        "provenance": ds.provenance,
    }
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x_{j}" for j in range(ds.dims)]
                    + ["y_clean", "y_noisy", "labeled", "split"])
    for i in range(ds.n):
        row = [repr(float(v)) for v in ds.x[i]]
        row += [str(int(ds.y_clean[i])), str(int(ds.y_noisy[i])),
                str(int(ds.labeled[i])), str(ds.split[i])]
        writer.writerow(row)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(buf.getvalue())


def load_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset file version {header.get('version')}")
        reader = csv.reader(fh)
        cols = next(reader)
        d = header["d"]
        if cols != [f"x_{j}" for j in range(d)] + ["y_clean", "y_noisy", "labeled", "split"]:
            raise ValueError("dataset file column header mismatch")
        x, y_clean, y_noisy, labeled, split = [], [], [], [], []
        for row in reader:
            x.append([float(v) for v in row[:d]])
            y_clean.append(int(row[d]))
            y_noisy.append(int(row[d + 1]))
            labeled.append(bool(int(row[d + 2])))
            split.append(row[d + 3])
    ds = Dataset(
        x=np.array(x, dtype=np.float64).reshape(header["n"], d),
        y_clean=np.array(y_clean), y_noisy=np.array(y_noisy),
        labeled=np.array(labeled), split=np.array(split, dtype="<U5"),
        n_classes=header["c"], provenance=header.get("provenance", {}),
    )
    return ds
