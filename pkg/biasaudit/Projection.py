import logging
import numbers
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .Errors import DegenerateInputError, DimensionError

VARIANCE_TOLERANCE = 1e-9
SIGN_TIE_TOLERANCE = 1e-9

# t-SNE defaults
PERPLEXITY = 30.0
ITERATIONS = 1000
LEARNING_RATE = 200.0
MIN_LEARNING_RATE = 50.0
EARLY_EXAGGERATION = 12.0
EXAGGERATION_ITERATIONS = 250
INITIAL_MOMENTUM = 0.5
FINAL_MOMENTUM = 0.8
INIT_SD = 1e-4
MIN_GAIN = 0.01
ENTROPY_TOLERANCE = 1e-5
MAX_BISECTION_STEPS = 200


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    n_samples: int = 0
    total_variance: float = 0.0

    @property
    def k(self):
        return self.components.shape[0]

    @property
    def d(self):
        return self.components.shape[1]

    @property
    def cumulative_ratio(self):
        return np.cumsum(self.explained_variance_ratio)

    def to_dict(self):
        return {
            'mean': self.mean.tolist(),
            'components': self.components.tolist(),
            'explained_variance': self.explained_variance.tolist(),
            'explained_variance_ratio': self.explained_variance_ratio.tolist(),
            'cumulative_ratio': self.cumulative_ratio.tolist(),
            'n_samples': int(self.n_samples),
            'total_variance': float(self.total_variance),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            mean=np.asarray(data['mean'], dtype=np.float64),
            components=np.asarray(data['components'], dtype=np.float64),
            explained_variance=np.asarray(data['explained_variance'], dtype=np.float64),
            explained_variance_ratio=np.asarray(data['explained_variance_ratio'], dtype=np.float64),
            n_samples=int(data.get('n_samples', 0)),
            total_variance=float(data.get('total_variance', 0.0)),
        )


@dataclass(frozen=True, eq=False)
class TsneResult:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    perplexity: float
    iterations: int
    seed: int
    kl_history: list = field(default_factory=list)
    learning_rate: float = LEARNING_RATE

    def config_echo(self):
        return {'perplexity': self.perplexity, 'iterations': self.iterations, 'seed': self.seed,
                'learning_rate': self.learning_rate}


def resolve_mode_count(ratios, target):
    """Smallest mode count whose cumulative explained-variance ratio reaches the target."""
    if not 0.0 < target <= 1.0:
        raise ValueError(f"variance target must lie in (0, 1], got {target}")
    cumulative = np.cumsum(np.asarray(ratios, dtype=np.float64))
    reached = np.nonzero(cumulative >= target - VARIANCE_TOLERANCE)[0]
    return int(reached[0]) + 1 if reached.size else len(cumulative)


def orient_components(components, tolerance=SIGN_TIE_TOLERANCE):
    """Flip each row so its largest-magnitude entry is positive.

    Entries within ``tolerance`` (relative to the row's largest magnitude) of the maximum are tied and the
    lowest index among them decides, so rounding noise in the SVD cannot flip a component between runs.
    """
    components = np.array(components, dtype=np.float64, ndmin=2)
    magnitude = np.abs(components)
    peak = magnitude.max(axis=1, keepdims=True)
    pivots = np.argmax(magnitude >= peak * (1.0 - tolerance), axis=1)
    signs = np.sign(components[np.arange(len(components)), pivots])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def pca_fit(X, k):
    """Fit a PCA basis by SVD of the centered (not scaled) data.

    ``k`` is either a mode count (int) or a variance target in (0, 1] (float).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"PCA input must be 2-D, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise DegenerateInputError(f"PCA needs at least 2 samples, got {n}")

    mean = X.mean(axis=0)
    centered = X - mean
    if not np.any(centered):
        raise DegenerateInputError("degenerate: no variance")

    _, singular, vt = linalg.svd(centered, full_matrices=False)
    variance = singular ** 2 / (n - 1)
    total = variance.sum()
    if total <= 0:
        raise DegenerateInputError("degenerate: no variance")
    ratio = variance / total

    if isinstance(k, numbers.Integral) and not isinstance(k, bool):
        limit = min(n - 1, d)
        if not 1 <= k <= limit:
            raise ValueError(f"mode count must lie in [1, min(n-1, d)] = [1, {limit}], got {k}")
        modes = int(k)
    else:
        modes = resolve_mode_count(ratio, float(k))

    components = orient_components(vt[:modes])

    logging.debug(f"PCA fit: n={n}, d={d}, modes={modes}, cumulative ratio={ratio[:modes].sum():.4f}")
    return ProjectionModel(
        mean=mean,
        components=components,
        explained_variance=variance[:modes].copy(),
        explained_variance_ratio=ratio[:modes].copy(),
        n_samples=n,
        total_variance=float(total),
    )


def pca_transform(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionError(f"expected {model.d} columns, got shape {X.shape}")
    return (X - model.mean) @ model.components.T


def pca_inverse_transform(model, coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != model.k:
        raise DimensionError(f"expected {model.k} coordinate columns, got shape {coords.shape}")
    return coords @ model.components + model.mean


def squared_distances(X):
    sum_sq = np.sum(X ** 2, axis=1)
    dist = sum_sq[:, None] + sum_sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(dist, 0.0)
    return np.maximum(dist, 0.0)


def _row_entropy(distances, beta):
    # distances exclude the point itself; shifted by their minimum for stability
    shifted = distances - distances.min()
    weights = np.exp(-shifted * beta)
    total = weights.sum()
    probabilities = weights / total
    entropy = np.log(total) + beta * np.sum(shifted * probabilities)
    return entropy, probabilities


def conditional_probabilities(X, perplexity, tol=ENTROPY_TOLERANCE):
    """Per-point Gaussian bandwidths by bisection on the precision so that H(P_i) = ln(perplexity).

    Returns the n x n conditional matrix P[i, j] = p(j | i), the precisions and achieved entropies.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    target = np.log(perplexity)
    distances = squared_distances(X)
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)

    for i in range(n):
        others = np.concatenate([distances[i, :i], distances[i, i + 1:]])
        nearest = np.isclose(others, others.min(), rtol=0.0, atol=1e-12)
        if nearest.sum() >= perplexity:
            tied = [j if j < i else j + 1 for j in np.nonzero(nearest)[0]]
            kind = "duplicate points" if others.min() == 0.0 else "equidistant nearest neighbours"
            raise DegenerateInputError(
                f"bandwidth search infeasible for point {i}: {kind} {sorted([i] + tied)} "
                f"({len(tied)} ties >= perplexity {perplexity})")

        beta, beta_min, beta_max = 1.0 / max(np.median(others), 1e-12), 0.0, np.inf
        entropy, probabilities = _row_entropy(others, beta)
        for _ in range(MAX_BISECTION_STEPS):
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = (beta + beta_min) / 2.0
            entropy, probabilities = _row_entropy(others, beta)
        else:
            logging.warning(f"t-SNE bandwidth search for point {i} stopped at |H - ln(perplexity)| = {abs(diff):.2e}")

        P[i, :i] = probabilities[:i]
        P[i, i + 1:] = probabilities[i:]
        betas[i] = beta
        entropies[i] = entropy
    return P, betas, entropies


def joint_probabilities(X, perplexity):
    conditional, _, _ = conditional_probabilities(X, perplexity)
    P = conditional + conditional.T
    return P / P.sum()


def kl_divergence_and_gradient(P, Y, exaggeration=1.0):
    """KL(P || Q) for a Student-t Q over the map Y and its gradient with respect to Y.

    With exaggeration != 1 the gradient is that of the exaggerated attraction term while the
    returned divergence is always the plain KL(P || Q).
    """
    W = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(W, 0.0)
    Q = W / W.sum()
    positive = P > 0
    kl = float(np.sum(P[positive] * np.log(P[positive] / Q[positive])))
    PQ = (exaggeration * P - Q) * W
    gradient = 4.0 * (PQ.sum(axis=1)[:, None] * Y - PQ @ Y)
    return kl, gradient


def tsne_embed(X, perplexity=PERPLEXITY, iterations=ITERATIONS, seed=0, learning_rate=LEARNING_RATE,
               early_exaggeration=EARLY_EXAGGERATION, exaggeration_iterations=EXAGGERATION_ITERATIONS):
    """Exact O(n^2) t-SNE into two dimensions.

    Gradient descent with momentum (0.5, then 0.8 once exaggeration ends), delta-bar-delta gains and
    early exaggeration. Returns the lowest-KL iterate seen after the exaggeration phase, or the
    initial iterate when none improves on it.

    The step size is ``learning_rate`` capped at max(n / early_exaggeration / 4, 50), so small inputs
    take smaller steps.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise DegenerateInputError(f"t-SNE needs at least 4 points, got {n}")
    if not 1.0 < perplexity < n:
        raise ValueError(f"perplexity must satisfy 1 < perplexity < n = {n}, got {perplexity}")

    step = min(float(learning_rate), max(n / early_exaggeration / 4.0, MIN_LEARNING_RATE))
    P = joint_probabilities(X, perplexity)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, INIT_SD, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)

    kl_initial, _ = kl_divergence_and_gradient(P, Y)
    best_kl, best_Y = kl_initial, Y.copy()
    history = [(0, kl_initial)]

    for t in range(iterations):
        exaggerating = t < exaggeration_iterations
        momentum = INITIAL_MOMENTUM if t < exaggeration_iterations else FINAL_MOMENTUM
        kl, gradient = kl_divergence_and_gradient(P, Y, early_exaggeration if exaggerating else 1.0)
        if not exaggerating and kl < best_kl:
            best_kl, best_Y = kl, Y.copy()

        same_sign = np.sign(gradient) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, MIN_GAIN, out=gains)
        update = momentum * update - step * gains * gradient
        Y = Y + update
        Y = Y - Y.mean(axis=0)

        if (t + 1) % 50 == 0:
            history.append((t + 1, kl))
            logging.debug(f"t-SNE iteration {t + 1}: KL={kl:.5f}")

    kl_last, _ = kl_divergence_and_gradient(P, Y)
    if kl_last < best_kl:
        best_kl, best_Y = kl_last, Y.copy()

    if not np.all(np.isfinite(best_Y)):
        raise DegenerateInputError("t-SNE diverged to non-finite coordinates")
    logging.info(f"t-SNE finished: n={n}, KL {kl_initial:.4f} -> {best_kl:.4f}")
    return TsneResult(coords=best_Y, kl_initial=kl_initial, kl_final=best_kl, perplexity=float(perplexity),
                      iterations=int(iterations), seed=int(seed), kl_history=history, learning_rate=step)
