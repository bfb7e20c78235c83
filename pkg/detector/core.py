"""
Shared numeric primitives and score-map algebra.

All arithmetic is float64. Feature vectors are plain 1-D numpy arrays;
token grids and score maps are 2-D/3-D arrays wrapped by small dataclasses.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6


class NumericDomainError(Exception):
    """Exception for inputs outside an operation's domain."""
    pass


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise NumericDomainError(f"Expected a vector, got shape {arr.shape}")
    return arr


def cosine(a, b) -> float:
    """
    Cosine similarity between two feature vectors.

    Raises:
        NumericDomainError: On dimension mismatch or a zero-norm argument
    """
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise NumericDomainError(f"Dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericDomainError("cosine of a zero-norm vector is undefined")
    value = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, value))


def cosine_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """
    Pairwise cosines between the rows of two matrices.

    Args:
        rows: (n, d) array
        cols: (m, d) array

    Returns:
        (n, m) array with entry (i, k) = cosine(rows[i], cols[k])
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_2d(np.asarray(cols, dtype=np.float64))
    if rows.shape[1] != cols.shape[1]:
        raise NumericDomainError(f"Dimension mismatch: {rows.shape[1]} vs {cols.shape[1]}")
    rn = np.linalg.norm(rows, axis=1)
    cn = np.linalg.norm(cols, axis=1)
    if np.any(rn == 0.0) or np.any(cn == 0.0):
        raise NumericDomainError("cosine of a zero-norm vector is undefined")
    sims = (rows / rn[:, None]) @ (cols / cn[:, None]).T
    return np.clip(sims, -1.0, 1.0)


def l2_normalize(v) -> np.ndarray:
    """
    Scales a vector to unit Euclidean norm.

    Raises:
        NumericDomainError: For the zero vector
    """
    v = _as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise NumericDomainError("cannot normalize a zero or non-finite vector")
    return v / n


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize for an (n, d) array."""
    m = np.asarray(m, dtype=np.float64)
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise NumericDomainError("cannot normalize a zero row")
    return m / n


def normalize_vjp(u: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """
    Vector-Jacobian product of y = u/|u| evaluated at u.

    Returns (I - y y^T) grad_out / |u|.
    """
    n = np.linalg.norm(u)
    y = u / n
    return (grad_out - y * np.dot(y, grad_out)) / n


def harmonic_combine(a, b):
    """
    Harmonic fusion ab/(a+b) of two scores.

    Works elementwise on arrays. Where either input is zero the result is 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a < 0) or np.any(b < 0):
        raise NumericDomainError("harmonic_combine expects nonnegative scores")
    denom = a + b
    safe = np.where(denom > 0, denom, 1.0)
    out = np.where((a > 0) & (b > 0), a * b / safe, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def token_softmax_weights(values, scale: float = 1.0) -> np.ndarray:
    """
    Softmax over the token axis with max-subtraction.

    Args:
        values: T real values
        scale: positive logit multiplier

    Raises:
        NumericDomainError: For an empty input or a nonpositive scale
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise NumericDomainError("token_softmax_weights needs at least one value")
    check_logit_scale(scale)
    z = scale * values
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def check_logit_scale(scale: float) -> float:
    if not scale > 0:
        raise NumericDomainError(f"logit scale must be positive, got {scale}")
    return float(scale)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if out.ndim == 0:
        return float(out)
    return out


def is_unit(v, tol: float = NORM_TOLERANCE) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


@dataclass(frozen=True)
class ScoreMap:
    """An h x w grid of anomaly scores in [0, 1]."""
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise NumericDomainError(f"ScoreMap must be 2-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
            raise NumericDomainError("ScoreMap values must lie in [0, 1]")
        object.__setattr__(self, "scores", s)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    def max(self) -> float:
        return float(self.scores.max())
