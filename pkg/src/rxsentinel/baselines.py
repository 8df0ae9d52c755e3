"""Frequency baseline and LSI + isolation-forest anomaly detector.

The frequency model scores a profile by the inverse of how often that exact
drug set appeared in training (unseen sets rank above everything). The LSI
detector embeds 0/1 profile count vectors with a truncated SVD computed by a
seeded randomized range finder, then isolates outliers with a forest of
random-split trees whose score threshold pins the training contamination
fraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyCorpusError
from .orders import Profile

EULER_GAMMA = 0.5772156649015329


# ---------------------------------------------------------------------------
# exact-profile frequency baseline


def profile_key(drugs: Iterable[str]) -> str:
    # drug codes never contain whitespace, so a space join cannot collide
    return " ".join(sorted(drugs))


@dataclass
class FrequencyModel:
    counts: dict[str, int] = field(default_factory=dict)


def freq_fit(profiles: list[Profile]) -> FrequencyModel:
    if not profiles:
        raise EmptyCorpusError("no profiles to fit the frequency model on")
    counts: dict[str, int] = {}
    for p in profiles:
        k = profile_key(p.drugs)
        counts[k] = counts.get(k, 0) + 1
    return FrequencyModel(counts=counts)


def freq_score(model: FrequencyModel, drugs: Iterable[str]) -> float:
    """1 / training count; profiles never seen in training score +inf."""
    count = model.counts.get(profile_key(drugs))
    return math.inf if count is None else 1.0 / count


# ---------------------------------------------------------------------------
# latent semantic indexing (truncated SVD by randomized range finder)


@dataclass
class LsiBasis:
    components: np.ndarray  # V x k, orthonormal columns
    singular_values: np.ndarray  # length k, non-increasing
    explained_variance_ratio: np.ndarray  # sigma_i^2 / ||X||_F^2
    k: int


def lsi_fit(x: np.ndarray, k: int, seed: int = 0, oversample: int | None = None,
            power_iters: int = 2) -> LsiBasis:
    """Top-k singular triplets of the n x V count matrix.

    Sketch width is k plus an oversampling margin; when the matrix is thin
    enough that the sketch would cover a quarter of its short side, the sketch
    is widened to the full short side, which makes the factorization exact at
    negligible cost. Two power iterations (with QR re-orthonormalization)
    sharpen the captured subspace on genuinely large inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    n, v = x.shape
    if not (1 <= k <= min(n, v)):
        raise ConfigError(f"k={k} out of range for a {n}x{v} matrix")
    if oversample is None:
        oversample = max(10, k // 10)
    ncols = k + oversample
    short = min(n, v)
    if short <= 4 * ncols:
        ncols = short
    ncols = min(ncols, short)

    rng = np.random.Generator(np.random.PCG64(seed))
    omega = rng.standard_normal((v, ncols))
    q, _ = np.linalg.qr(x @ omega)
    for _ in range(power_iters):
        w, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ w)
    b = q.T @ x
    _, s, vt = np.linalg.svd(b, full_matrices=False)
    total_sq = float((x * x).sum())
    sv = s[:k].copy()
    evr = sv**2 / total_sq if total_sq > 0 else np.zeros(k)
    return LsiBasis(components=vt[:k].T.copy(), singular_values=sv,
                    explained_variance_ratio=evr, k=k)


def lsi_transform(basis: LsiBasis, x: np.ndarray) -> np.ndarray:
    """Project count vectors (single row or matrix) onto the k components."""
    x = np.asarray(x, dtype=np.float64)
    return x @ basis.components


# ---------------------------------------------------------------------------
# isolation forest


def _c_table(max_size: int) -> np.ndarray:
    """Average unsuccessful-search path length c(n) for n = 0..max_size."""
    c = np.zeros(max_size + 1)
    for n in range(2, max_size + 1):
        if n == 2:
            c[n] = 1.0
        else:
            c[n] = 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n
    return c


@dataclass
class IsolationForest:
    feature: np.ndarray  # int32, -1 marks a leaf
    threshold: np.ndarray  # float64 split values
    left: np.ndarray  # int32 child indices
    right: np.ndarray
    adjust: np.ndarray  # float64, c(leaf size) at leaves, 0 elsewhere
    roots: np.ndarray  # int32, one per tree
    psi: int
    tree_count: int
    contamination: float
    c_psi: float
    score_threshold: float = math.nan


def _grow_tree(x, rows, depth, limit, rng, nodes):
    """Append a subtree over `rows`; returns its node index."""
    n = rows.shape[0]
    if depth >= limit or n <= 1:
        return _leaf(nodes, n)
    sub = x[rows]
    lo = sub.min(axis=0)
    hi = sub.max(axis=0)
    usable = np.flatnonzero(hi > lo)
    if usable.size == 0:
        return _leaf(nodes, n)
    f = int(usable[rng.integers(usable.size)])
    s = float(rng.uniform(lo[f], hi[f]))
    mask = sub[:, f] < s
    left_rows = rows[mask]
    right_rows = rows[~mask]
    if left_rows.size == 0 or right_rows.size == 0:
        return _leaf(nodes, n)
    idx = len(nodes["feature"])
    nodes["feature"].append(f)
    nodes["threshold"].append(s)
    nodes["left"].append(-1)
    nodes["right"].append(-1)
    nodes["adjust"].append(0.0)
    left_idx = _grow_tree(x, left_rows, depth + 1, limit, rng, nodes)
    right_idx = _grow_tree(x, right_rows, depth + 1, limit, rng, nodes)
    nodes["left"][idx] = left_idx
    nodes["right"][idx] = right_idx
    return idx


def _leaf(nodes, size):
    idx = len(nodes["feature"])
    nodes["feature"].append(-1)
    nodes["threshold"].append(0.0)
    nodes["left"].append(-1)
    nodes["right"].append(-1)
    nodes["adjust"].append(float(nodes["c_table"][size]))
    return idx


def iforest_fit(x: np.ndarray, tree_count: int = 100, psi: int = 256,
                contamination: float = 0.20, seed: int = 0) -> IsolationForest:
    """Fit isolation trees on row subsamples of size psi.

    The score threshold is the (1 - contamination) quantile of the training
    scores, so that fraction of the training set lands strictly above it.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if psi > n:
        raise ConfigError(f"subsample size {psi} exceeds {n} training rows")
    if not (0.0 < contamination < 1.0):
        raise ConfigError(f"contamination must be in (0, 1), got {contamination}")
    rng = np.random.Generator(np.random.PCG64(seed))
    limit = math.ceil(math.log2(psi)) if psi > 1 else 0
    c_tab = _c_table(psi)
    nodes = {"feature": [], "threshold": [], "left": [], "right": [],
             "adjust": [], "c_table": c_tab}
    roots = []
    for _ in range(tree_count):
        rows = rng.choice(n, size=psi, replace=False)
        roots.append(_grow_tree(x, rows, 0, limit, rng, nodes))
    forest = IsolationForest(
        feature=np.asarray(nodes["feature"], dtype=np.int32),
        threshold=np.asarray(nodes["threshold"], dtype=np.float64),
        left=np.asarray(nodes["left"], dtype=np.int32),
        right=np.asarray(nodes["right"], dtype=np.int32),
        adjust=np.asarray(nodes["adjust"], dtype=np.float64),
        roots=np.asarray(roots, dtype=np.int32),
        psi=psi,
        tree_count=tree_count,
        contamination=contamination,
        c_psi=float(c_tab[psi]),
    )
    scores = iforest_scores(forest, x)
    order = np.sort(scores)
    idx = math.ceil((1.0 - contamination) * n) - 1
    forest.score_threshold = float(order[idx])
    return forest


def iforest_scores(forest: IsolationForest, x: np.ndarray) -> np.ndarray:
    """Anomaly scores s = 2^(-E[h] / c(psi)), higher = more isolated."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    paths = kernels.tree_path_lengths(
        x, forest.feature, forest.threshold, forest.left, forest.right,
        forest.adjust, forest.roots,
    )
    mean_path = paths.mean(axis=1)
    return np.power(2.0, -mean_path / forest.c_psi)


def iforest_classify(forest: IsolationForest, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(labels, scores); atypical iff score strictly above the fit threshold."""
    if math.isnan(forest.score_threshold):
        raise ConfigError("forest has no score threshold; fit it first")
    scores = iforest_scores(forest, np.atleast_2d(x))
    labels = np.where(scores > forest.score_threshold, "atypical", "typical")
    return labels, scores
