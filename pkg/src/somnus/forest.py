"""Random-forest classifier with resample bookkeeping and variance estimates.

Trees are grown from scratch on bootstrap (or without-replacement subsample)
draws, recording how many times each training row entered each tree's
resample. Those inclusion counts drive the infinitesimal-jackknife variance
estimate for every prediction, with a finite-ensemble Monte Carlo bias
correction subtracted off.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _tree
from .errors import ConfigError, EmptyDataset, InsufficientUserData, MissingCounts
from .features import LabeledDataset

_MAX_BINS = 2048
_DEPTH_UNLIMITED = 1 << 30


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    features_per_split: int = 5
    min_samples_split: int = 5
    max_depth: int | None = None
    resample_mode: str = "bootstrap"  # "bootstrap" (s=n, with replacement) or "subsample"
    subsample_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.features_per_split < 1:
            raise ConfigError("features_per_split must be >= 1")
        if self.min_samples_split < 2:
            raise ConfigError("min_samples_split must be >= 2")
        if self.resample_mode not in ("bootstrap", "subsample"):
            raise ConfigError(f"unknown resample_mode {self.resample_mode!r}")
        if self.resample_mode == "subsample" and not self.subsample_size:
            raise ConfigError("subsample mode requires subsample_size")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "features_per_split": self.features_per_split,
            "min_samples_split": self.min_samples_split,
            "max_depth": self.max_depth,
            "resample_mode": self.resample_mode,
            "subsample_size": self.subsample_size,
            "seed": self.seed,
        }


@dataclass
class Forest:
    """Trained ensemble plus per-tree inclusion counts."""

    params: ForestParams
    n_features: int
    feature_names: tuple[str, ...]
    node_feature: np.ndarray  # int32, -1 marks a leaf
    node_threshold: np.ndarray  # float64
    node_left: np.ndarray  # int32 tree-local child offsets
    node_right: np.ndarray
    node_value: np.ndarray  # float64 positive-label fraction at the node
    tree_offsets: np.ndarray  # int64 (B+1)
    inclusion_counts: np.ndarray  # uint16 (B, n_train)
    n_train: int
    single_class: bool
    train_meta_hash: str
    _gram: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.tree_offsets) - 1

    @property
    def resample_size(self) -> int:
        if self.params.resample_mode == "bootstrap":
            return self.n_train
        return int(self.params.subsample_size)

    def tree_values(self, X: np.ndarray) -> np.ndarray:
        """Per-tree leaf value for each row of X, shape (B, len(X))."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        out = np.empty((self.n_trees, X.shape[0]))
        _tree.forest_values(
            X,
            self.node_feature,
            self.node_threshold,
            self.node_left,
            self.node_right,
            self.node_value,
            self.tree_offsets,
            out,
        )
        return out


def _training_bins(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, f = X.shape
    xb = np.empty((n, f), np.uint16)
    vals = []
    for j in range(f):
        u = np.unique(X[:, j])
        if u.shape[0] > _MAX_BINS:
            qs = np.quantile(X[:, j], np.linspace(0.0, 1.0, _MAX_BINS), method="nearest")
            u = np.unique(qs)
        xb[:, j] = np.searchsorted(u, X[:, j], side="right") - 1
        vals.append(u)
    bin_off = np.zeros(f + 1, np.int64)
    bin_off[1:] = np.cumsum([v.shape[0] for v in vals])
    return xb, np.concatenate(vals).astype(np.float64), bin_off


def _meta_hash(params: ForestParams, X: np.ndarray, y: np.ndarray,
               feature_names: tuple[str, ...]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(params.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(list(feature_names)).encode())
    h.update(np.ascontiguousarray(X).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()


def train_forest(dataset: LabeledDataset, params: ForestParams, jobs: int = 1) -> Forest:
    """Grow the ensemble; deterministic in ``params.seed``.

    Per-tree resamples and feature-sampling streams are derived from the
    seed up front, so the result is identical regardless of scheduling.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    X = np.ascontiguousarray(dataset.X, dtype=np.float64)
    y = np.ascontiguousarray(dataset.y, dtype=np.uint8)
    n, n_feat = X.shape
    if params.features_per_split > n_feat:
        raise ConfigError(
            f"features_per_split={params.features_per_split} exceeds "
            f"feature count {n_feat}"
        )
    s = params.subsample_size if params.resample_mode == "subsample" else n
    if s > n:
        raise ConfigError(f"subsample_size {s} exceeds training size {n}")
    single_class = bool((y == y[0]).all())

    xb, bin_vals, bin_off = _training_bins(X)
    max_depth = params.max_depth if params.max_depth else _DEPTH_UNLIMITED

    B = params.n_trees
    root = np.random.SeedSequence(params.seed)
    tree_seeds = root.spawn(B)
    counts = np.zeros((B, n), np.uint16)
    node_seeds = np.empty(B, np.uint64)
    for b in range(B):
        draw_ss, split_ss = tree_seeds[b].spawn(2)
        rng = np.random.default_rng(draw_ss)
        if params.resample_mode == "bootstrap":
            counts[b] = np.bincount(rng.integers(0, n, size=n), minlength=n)
        else:
            counts[b, rng.choice(n, size=s, replace=False)] = 1
        node_seeds[b] = split_ss.generate_state(1, np.uint64)[0]

    def grow(b: int):
        w = counts[b].astype(np.float64)
        idx0 = np.flatnonzero(counts[b]).astype(np.int64)
        cap = 2 * idx0.shape[0] + 1
        nf = np.empty(cap, np.int32)
        nt = np.zeros(cap, np.float64)
        nl = np.zeros(cap, np.int32)
        nr = np.zeros(cap, np.int32)
        nv = np.zeros(cap, np.float64)
        used = _tree.build_tree(
            xb, bin_vals, bin_off, y, w, idx0,
            params.features_per_split, params.min_samples_split, max_depth,
            node_seeds[b], nf, nt, nl, nr, nv,
        )
        return nf[:used].copy(), nt[:used].copy(), nl[:used].copy(), nr[:used].copy(), nv[:used].copy()

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(grow, range(B)))
    else:
        trees = [grow(b) for b in range(B)]

    sizes = [t[0].shape[0] for t in trees]
    tree_offsets = np.zeros(B + 1, np.int64)
    tree_offsets[1:] = np.cumsum(sizes)
    return Forest(
        params=params,
        n_features=n_feat,
        feature_names=tuple(dataset.feature_names),
        node_feature=np.concatenate([t[0] for t in trees]),
        node_threshold=np.concatenate([t[1] for t in trees]),
        node_left=np.concatenate([t[2] for t in trees]),
        node_right=np.concatenate([t[3] for t in trees]),
        node_value=np.concatenate([t[4] for t in trees]),
        tree_offsets=tree_offsets,
        inclusion_counts=counts,
        n_train=n,
        single_class=single_class,
        train_meta_hash=_meta_hash(params, X, y, tuple(dataset.feature_names)),
    )


def predict_proba(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Ensemble probability: exactly the mean of per-tree leaf values."""
    vals = forest.tree_values(X)
    return np.sum(vals, axis=0) / forest.n_trees


def predict_state(forest: Forest, X: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(forest, X) >= threshold).astype(np.uint8)


def _resample_gram(forest: Forest) -> np.ndarray:
    """Gram matrix G = A A^T with A[b, i] = N[b, i] - s/n, cached per forest.

    The raw jackknife variance at x is then t^T G t / B^2 where t is the
    vector of centered tree predictions, identical to summing the squared
    per-example covariances without materializing them.
    """
    if forest._gram is None:
        counts = forest.inclusion_counts
        B, n = counts.shape
        frac = forest.resample_size / forest.n_train
        G = np.zeros((B, B))
        step = max(1, (1 << 22) // max(B, 1))
        for k in range(0, n, step):
            A = counts[:, k : k + step].astype(np.float64) - frac
            G += A @ A.T
        forest._gram = G
    return forest._gram


@dataclass
class IJVariance:
    raw: np.ndarray
    corrected: np.ndarray
    floored: int  # count of points whose corrected value was clipped at 0


def ij_variance_batch(forest: Forest, X: np.ndarray) -> IJVariance:
    """Infinitesimal-jackknife variance per row of X.

    raw = sum_i C_i^2 with C_i = (1/B) sum_b (N[b,i] - s/n)(T_b - T_mean).
    The Monte Carlo correction is n*v/B in bootstrap mode and
    s(n-s)/n * v/B in subsample mode, with v the per-point variance of tree
    predictions; corrected values are floored at zero.
    """
    if forest.inclusion_counts is None or forest.inclusion_counts.size == 0:
        raise MissingCounts("forest has no inclusion-count bookkeeping")
    B = forest.n_trees
    n = forest.n_train
    s = forest.resample_size
    T = forest.tree_values(X)
    t = T - np.sum(T, axis=0) / B
    G = _resample_gram(forest)
    raw = np.einsum("bm,bm->m", G @ t, t) / (B * B)
    raw = np.maximum(raw, 0.0)  # guards float round-off; true value is a sum of squares
    v_hat = np.einsum("bm,bm->m", t, t) / B
    if forest.params.resample_mode == "bootstrap":
        correction = n * v_hat / B
    else:
        correction = (s * (n - s) / n) * v_hat / B
    corrected = raw - correction
    floored = int(np.sum(corrected < 0))
    return IJVariance(raw=raw, corrected=np.maximum(corrected, 0.0), floored=floored)


def ij_variance(forest: Forest, x: np.ndarray) -> tuple[float, float]:
    """(raw, bias-corrected) variance for a single feature vector."""
    res = ij_variance_batch(forest, np.atleast_2d(x))
    return float(res.raw[0]), float(res.corrected[0])


def feature_importance(forest: Forest, normalize: bool = False) -> np.ndarray:
    """Split-count importance: how many internal nodes test each feature."""
    internal = forest.node_feature[forest.node_feature >= 0]
    weights = np.bincount(internal, minlength=forest.n_features).astype(np.float64)
    if normalize and weights.max() > 0:
        weights = weights / weights.max()
    return weights


def sample_personal_days(
    user_days: list, fraction: float, seed: int
) -> tuple[list, list]:
    """Split a user's days into (personalization, held-out) by whole days."""
    if not 0 <= fraction < 1:
        raise ConfigError(f"personalization fraction must be in [0, 1), got {fraction}")
    days = sorted(user_days)
    k = int(round(fraction * len(days)))
    if fraction > 0 and k == 0:
        raise InsufficientUserData(
            f"fraction {fraction} of {len(days)} days rounds to zero"
        )
    if k == 0:
        return [], days
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    chosen = sorted(rng.choice(len(days), size=k, replace=False).tolist())
    chosen_set = set(chosen)
    train = [days[i] for i in chosen]
    held = [days[i] for i in range(len(days)) if i not in chosen_set]
    return train, held


def train_semi_personalized(
    general: LabeledDataset,
    target_user: LabeledDataset,
    fraction: float = 0.4,
    params: ForestParams = ForestParams(),
    day_seed: int = 0,
    jobs: int = 1,
) -> tuple[Forest, list]:
    """Train on the general pool plus a whole-day sample of the target user.

    Returns the forest and the list of the user's held-out days (never seen
    in training), keeping night-level separation between train and test.
    """
    user_days = sorted(set(target_user.days.tolist()))
    personal, held_out = sample_personal_days(user_days, fraction, day_seed)
    if personal:
        mask = np.isin(target_user.days, personal)
        train_ds = LabeledDataset.concat([general, target_user.subset(mask)])
    else:
        train_ds = general
    forest = train_forest(train_ds, params, jobs=jobs)
    return forest, held_out
