"""Comparison estimators: naive benchmarks, bag-of-words, trees, forests,
nearest-neighbour retrieval, least squares, lasso selection, and the
hand-crafted issue feature encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Vocabulary


class BaselineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Naive benchmarks
# ---------------------------------------------------------------------------

def mean_effort(train_points) -> float:
    """Mean story points of past issues."""
    pts = list(train_points)
    if not pts:
        raise BaselineError("no past issues")
    return float(sum(pts) / len(pts))


def median_effort(train_points) -> float:
    """Median story points of past issues (mean of middles for even n)."""
    pts = sorted(train_points)
    if not pts:
        raise BaselineError("no past issues")
    n = len(pts)
    if n % 2 == 1:
        return float(pts[n // 2])
    return float((pts[n // 2 - 1] + pts[n // 2]) / 2)


def random_guess(train_points, rng: np.random.Generator) -> float:
    """Story points of one uniformly chosen past issue."""
    pts = list(train_points)
    if not pts:
        raise BaselineError("no past issues")
    return float(pts[rng.integers(len(pts))])


# ---------------------------------------------------------------------------
# Bag of words
# ---------------------------------------------------------------------------

def bow_vectorize(tokens: list[str], vocab: Vocabulary) -> np.ndarray:
    """Token counts over the vocabulary; unknown tokens count under unk.

    The end-of-sequence sentinel is a tokenizer artifact, not a word, so it
    is left out of the counts.
    """
    vec = np.zeros(len(vocab), dtype=np.float64)
    eos = vocab.tokens[vocab.eos_id]
    for tok in tokens:
        if tok == eos:
            continue
        vec[vocab.index.get(tok, vocab.unk_id)] += 1.0
    return vec


# ---------------------------------------------------------------------------
# Regression trees and forests
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    value: float
    count: int
    feature: int | None = None
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


def _best_split(x: np.ndarray, y: np.ndarray, rows: np.ndarray, feat_ids,
                min_leaf_size: int):
    """Lowest-SSE split over the candidate features; None if no legal split.

    Ties keep the first candidate in (feature, threshold) order so the tree
    is deterministic.
    """
    best = None
    best_sse = None
    for j in feat_ids:
        xs = x[rows, j]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        ys_sorted = y[rows][order]
        csum = np.cumsum(ys_sorted)
        csq = np.cumsum(ys_sorted**2)
        total_sum, total_sq = csum[-1], csq[-1]
        n = len(rows)
        for i in range(min_leaf_size - 1, n - min_leaf_size):
            if xs_sorted[i] == xs_sorted[i + 1]:
                continue
            nl = i + 1
            nr = n - nl
            sse = (total_sq - csq[i] - (total_sum - csum[i]) ** 2 / nr) + (
                csq[i] - csum[i] ** 2 / nl
            )
            if best_sse is None or sse < best_sse - 1e-12:
                best_sse = sse
                best = (j, (xs_sorted[i] + xs_sorted[i + 1]) / 2.0)
    return best


def _grow_tree(x, y, rows, min_leaf_size, n_features, rng):
    node = TreeNode(value=float(y[rows].mean()), count=len(rows))
    if len(rows) < 2 * min_leaf_size or np.all(y[rows] == y[rows][0]):
        return node
    p = x.shape[1]
    if n_features is None or n_features >= p:
        feat_ids = range(p)
    else:
        feat_ids = sorted(rng.choice(p, size=n_features, replace=False))
    split = _best_split(x, y, rows, feat_ids, min_leaf_size)
    if split is None:
        return node
    node.feature, node.threshold = split
    go_left = x[rows, node.feature] <= node.threshold
    node.left = _grow_tree(x, y, rows[go_left], min_leaf_size, n_features, rng)
    node.right = _grow_tree(x, y, rows[~go_left], min_leaf_size, n_features, rng)
    return node


def _tree_height(node: TreeNode) -> int:
    if node.is_leaf:
        return 0
    return 1 + max(_tree_height(node.left), _tree_height(node.right))


def _collapse_at_depth(node: TreeNode, depth: int, target: int) -> TreeNode:
    if node.is_leaf:
        return node
    if depth == target:
        return TreeNode(value=node.value, count=node.count)
    node.left = _collapse_at_depth(node.left, depth + 1, target)
    node.right = _collapse_at_depth(node.right, depth + 1, target)
    return node


def prune_tree(root: TreeNode, levels: int) -> TreeNode:
    """Collapse the deepest level of the tree `levels` times."""
    for _ in range(levels):
        height = _tree_height(root)
        if height == 0:
            break
        root = _collapse_at_depth(root, 0, height - 1)
    return root


def cart_fit(features, targets, min_leaf_size: int = 5, prune_level: int = 5,
             n_features: int | None = None,
             rng: np.random.Generator | None = None) -> TreeNode:
    """Grow a variance-reduction regression tree, then prune its deepest
    levels. Splits never create a leaf smaller than min_leaf_size."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise BaselineError("features and targets must have matching rows")
    if x.shape[0] < 1:
        raise BaselineError("need at least one training row")
    if min_leaf_size < 1:
        raise BaselineError("min_leaf_size must be >= 1")
    root = _grow_tree(x, y, np.arange(x.shape[0]), min_leaf_size, n_features, rng)
    return prune_tree(root, prune_level)


def cart_predict(tree: TreeNode, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    node = tree
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


@dataclass
class Forest:
    trees: list[TreeNode] = field(default_factory=list)


def rf_fit(features, targets, n_trees: int = 100,
           rng: np.random.Generator | None = None, bootstrap: bool = True,
           n_features: int | str | None = "sqrt", min_leaf_size: int = 1) -> Forest:
    """Random forest of unpruned regression trees.

    Each tree sees a bootstrap resample and considers sqrt(p) features per
    split by default; per-tree seeds derive from rng so the forest is
    reproducible regardless of training order.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape[0] < 1:
        raise BaselineError("need at least one training row")
    if rng is None:
        rng = np.random.default_rng(0)
    if n_features == "sqrt":
        n_features = max(1, round(math.sqrt(x.shape[1])))
    tree_seeds = rng.integers(0, 2**63 - 1, size=n_trees)
    forest = Forest()
    for seed in tree_seeds:
        tree_rng = np.random.default_rng(int(seed))
        rows = (
            tree_rng.integers(0, x.shape[0], size=x.shape[0])
            if bootstrap
            else np.arange(x.shape[0])
        )
        forest.trees.append(
            cart_fit(x[rows], y[rows], min_leaf_size=min_leaf_size, prune_level=0,
                     n_features=n_features, rng=tree_rng)
        )
    return forest


def rf_predict(forest: Forest, x) -> float:
    return float(np.mean([cart_predict(t, x) for t in forest.trees]))


# ---------------------------------------------------------------------------
# Case-based reasoning (k nearest neighbours)
# ---------------------------------------------------------------------------

def cbr_estimate(train_features, train_points, x, k: int = 3) -> float:
    """Mean story points of the k nearest past issues (Euclidean distance).

    Distance ties break by training index, so repeated calls and copied
    training sets give identical answers.
    """
    feats = np.asarray(train_features, dtype=np.float64)
    pts = np.asarray(train_points, dtype=np.float64)
    if not 1 <= k <= len(pts):
        raise BaselineError(f"k={k} outside 1..{len(pts)}")
    dists = np.sqrt(((feats - np.asarray(x, dtype=np.float64)) ** 2).sum(axis=1))
    nearest = np.argsort(dists, kind="stable")[:k]
    return float(pts[nearest].mean())


# ---------------------------------------------------------------------------
# Linear models
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    intercept: float
    coef: np.ndarray

    def predict(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return x @ self.coef + self.intercept


RIDGE_DAMPING = 1e-8


def ols_fit(features, targets) -> LinearModel:
    """Ordinary least squares via the normal equations on centered columns.

    Centering keeps the intercept out of the coefficient system, so
    rank-deficient feature blocks fall back to a tiny ridge term without
    contaminating the intercept (a constant column gets coefficient 0).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise BaselineError("features and targets must have matching rows")
    x_mean = x.mean(axis=0)
    y_mean = float(y.mean())
    xc = x - x_mean
    gram = xc.T @ xc
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        gram = gram + RIDGE_DAMPING * np.eye(gram.shape[0])
    coef = np.linalg.solve(gram, xc.T @ (y - y_mean)) if gram.size else np.zeros(0)
    return LinearModel(intercept=y_mean - float(coef @ x_mean), coef=coef)


@dataclass
class LassoModel:
    intercept: float
    coef: np.ndarray
    budget: float
    lam: float
    selected: list[int]

    def predict(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return x @ self.coef + self.intercept


def _coordinate_descent(xs: np.ndarray, yc: np.ndarray, lam: float,
                        max_iter: int = 20000, tol: float = 1e-12) -> np.ndarray:
    """Solve min ||yc - xs b||^2 + lam * ||b||_1 on standardized columns."""
    n, p = xs.shape
    z = (xs**2).sum(axis=0)
    b = np.zeros(p)
    resid = yc.copy()
    for _ in range(max_iter):
        max_step = 0.0
        for j in range(p):
            if z[j] == 0.0:
                continue
            rho = xs[:, j] @ resid + z[j] * b[j]
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / z[j]
            if new != b[j]:
                resid += xs[:, j] * (b[j] - new)
                max_step = max(max_step, abs(new - b[j]))
                b[j] = new
        if max_step < tol * max(1.0, float(np.max(np.abs(b)))):
            break
    return b


def _standardize(x: np.ndarray):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    return (x - mu) / safe, mu, safe


def lasso_fit(features, targets, s: float | None = None, lam: float | None = None,
              valid_features=None, valid_targets=None, grid_size: int = 30) -> LassoModel:
    """L1-constrained least squares with feature selection.

    Exactly one mode applies: a budget `s` on the L1 norm of the
    coefficients (solved by bisecting the equivalent penalty), a direct
    penalty `lam`, or neither, in which case the penalty grid is scored on
    the validation rows (the last 20% of the data when none are given).
    Features are standardized internally and coefficients are reported on
    the original scale; exact zeros define the selected feature set.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise BaselineError("features and targets must have matching rows")
    if s is not None and lam is not None:
        raise BaselineError("pass either a budget s or a penalty lam, not both")
    xs, mu, sd = _standardize(x)
    y_mean = float(y.mean())
    yc = y - y_mean

    def model_at(lam_value: float) -> LassoModel:
        b_std = _coordinate_descent(xs, yc, lam_value)
        coef = b_std / sd
        intercept = y_mean - float(coef @ mu)
        return LassoModel(
            intercept=intercept, coef=coef,
            budget=float(np.abs(coef).sum()), lam=lam_value,
            selected=[int(j) for j in np.flatnonzero(coef)],
        )

    if lam is not None:
        return model_at(lam)

    lam_max = 2.0 * float(np.max(np.abs(xs.T @ yc))) if x.shape[1] else 0.0
    if s is not None:
        if s <= 0:  # fully binding constraint: intercept-only model
            return LassoModel(intercept=y_mean, coef=np.zeros(x.shape[1]),
                              budget=float(s), lam=lam_max, selected=[])
        ols = ols_fit(x, y)
        if float(np.abs(ols.coef).sum()) <= s:
            return LassoModel(
                intercept=ols.intercept, coef=ols.coef, budget=float(s), lam=0.0,
                selected=[int(j) for j in np.flatnonzero(ols.coef)],
            )
        lo, hi = 0.0, lam_max
        best = model_at(hi)
        for _ in range(100):
            mid = (lo + hi) / 2.0
            candidate = model_at(mid)
            if candidate.budget <= s:
                hi = mid
                best = candidate
            else:
                lo = mid
        best.budget = float(s)
        return best

    # Penalty unspecified: pick from a geometric grid by validation error.
    if valid_features is None:
        n_valid = max(1, x.shape[0] // 5)
        valid_features, valid_targets = x[-n_valid:], y[-n_valid:]
        fit_x, fit_y = x[:-n_valid], y[:-n_valid]
        if len(fit_y) == 0:
            fit_x, fit_y = x, y
    else:
        fit_x, fit_y = x, y
    vx = np.asarray(valid_features, dtype=np.float64)
    vy = np.asarray(valid_targets, dtype=np.float64)
    grid = lam_max * np.logspace(0.0, -4.0, grid_size) if lam_max > 0 else [0.0]
    best_lam, best_err = None, None
    for lam_value in grid:
        xs_fit, mu_fit, sd_fit = _standardize(fit_x)
        b_std = _coordinate_descent(xs_fit, fit_y - fit_y.mean(), float(lam_value))
        coef = b_std / sd_fit
        intercept = float(fit_y.mean()) - float(coef @ mu_fit)
        err = float(np.mean((vy - (vx @ coef + intercept)) ** 2))
        if best_err is None or err < best_err - 1e-12:
            best_err, best_lam = err, float(lam_value)
    return model_at(best_lam)


# ---------------------------------------------------------------------------
# Hand-crafted issue features
# ---------------------------------------------------------------------------

ISSUE_TYPES = (
    "bug", "task", "new feature", "improvement", "documentation", "epic",
    "sub-task", "story", "ux story", "technical story", "third-party issue",
)
PRIORITIES = ("blocker", "critical", "major", "minor", "trivial", "to be reviewed")

COUNT_FIELDS = (
    "n_subtasks", "n_issue_links", "n_blocking", "n_blocked_by",
    "n_affect_versions", "n_fix_versions", "n_components",
    "n_description_changes", "n_priority_changes",
)
REPORTER_FIELDS = ("reporter_tested", "reporter_reviewed", "reporter_resolved")
ASSIGNEE_FIELDS = ("assignee_tested", "assignee_reviewed", "assignee_resolved")
ESTIMATOR_FIELDS = ("estimator_tested", "estimator_reviewed", "estimator_resolved")


@dataclass
class IssueFeatureInput:
    """Raw per-issue inputs to the hand-crafted encoding. Assignee counts are
    None when no assignee existed at estimation time."""

    issue_type: str = ""
    priority: str = ""
    n_subtasks: int = 0
    n_issue_links: int = 0
    n_blocking: int = 0
    n_blocked_by: int = 0
    n_affect_versions: int = 0
    n_fix_versions: int = 0
    n_components: int = 0
    n_description_changes: int = 0
    n_priority_changes: int = 0
    reporter_opened: int = 0
    reporter_opened_fixed: int = 0
    reporter_tested: int = 0
    reporter_reviewed: int = 0
    reporter_resolved: int = 0
    assignee_tested: int | None = None
    assignee_reviewed: int | None = None
    assignee_resolved: int | None = None
    estimator_tested: int = 0
    estimator_reviewed: int = 0
    estimator_resolved: int = 0


@dataclass
class FeatureVector:
    names: list[str]
    values: np.ndarray
    missing: np.ndarray  # boolean, aligned with values


def reporter_reputation(opened: int, opened_and_fixed: int) -> float:
    """Share of a reporter's opened issues they also fixed, damped by +1 so
    new reporters score 0 rather than dividing by zero."""
    if opened < 0 or not 0 <= opened_and_fixed <= opened:
        raise BaselineError("need 0 <= opened_and_fixed <= opened")
    return opened_and_fixed / (opened + 1)


def _one_hot(value: str, categories: tuple[str, ...]) -> list[float]:
    normalized = value.strip().lower()
    hot = [1.0 if normalized == cat else 0.0 for cat in categories]
    hot.append(0.0 if any(hot) else 1.0)  # "other" bucket
    return hot


def feature_names() -> list[str]:
    names = [f"type_{t.replace(' ', '_')}" for t in ISSUE_TYPES] + ["type_other"]
    names += [f"priority_{p.replace(' ', '_')}" for p in PRIORITIES] + ["priority_other"]
    names += list(COUNT_FIELDS)
    names += ["reporter_reputation"]
    names += list(REPORTER_FIELDS)
    names += list(ASSIGNEE_FIELDS)
    names += list(ESTIMATOR_FIELDS)
    return names


def assemble_features(record: IssueFeatureInput) -> FeatureVector:
    """Encode one issue's raw fields into the fixed-order numeric vector.

    Unknown type/priority strings land in the "other" bucket. Missing
    assignee data is marked in the mask instead of being conflated with 0.
    """
    values = _one_hot(record.issue_type, ISSUE_TYPES)
    values += _one_hot(record.priority, PRIORITIES)
    values += [float(getattr(record, f)) for f in COUNT_FIELDS]
    values += [reporter_reputation(record.reporter_opened, record.reporter_opened_fixed)]
    values += [float(getattr(record, f)) for f in REPORTER_FIELDS]
    assignee_missing = any(getattr(record, f) is None for f in ASSIGNEE_FIELDS)
    if assignee_missing:
        values += [0.0, 0.0, 0.0]
    else:
        values += [float(getattr(record, f)) for f in ASSIGNEE_FIELDS]
    values += [float(getattr(record, f)) for f in ESTIMATOR_FIELDS]
    names = feature_names()
    missing = np.zeros(len(names), dtype=bool)
    if assignee_missing:
        for f in ASSIGNEE_FIELDS:
            missing[names.index(f)] = True
    return FeatureVector(names=names, values=np.array(values), missing=missing)


def feature_matrix(vectors: list[FeatureVector], impute: str = "mean",
                   train_vectors: list[FeatureVector] | None = None,
                   append_mask: bool = False) -> np.ndarray:
    """Stack feature vectors into a matrix, resolving missing entries.

    impute="mean" substitutes per-feature means of the non-missing training
    values (linear models); impute="zero" leaves zeros in place, and
    append_mask=True adds the missing-indicator columns (tree models).
    """
    if not vectors:
        raise BaselineError("no feature vectors")
    values = np.stack([v.values for v in vectors])
    missing = np.stack([v.missing for v in vectors])
    if impute == "mean":
        ref_vals = values if train_vectors is None else np.stack([v.values for v in train_vectors])
        ref_miss = missing if train_vectors is None else np.stack([v.missing for v in train_vectors])
        for j in range(values.shape[1]):
            present = ~ref_miss[:, j]
            fill = ref_vals[present, j].mean() if present.any() else 0.0
            values[missing[:, j], j] = fill
    elif impute != "zero":
        raise BaselineError(f"unknown imputation {impute!r}")
    if append_mask:
        values = np.hstack([values, missing.astype(np.float64)])
    return values
