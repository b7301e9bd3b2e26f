"""Per-weight importance scores computed from weights and calibration inputs.

Every scorer returns a non-negative matrix shaped like ``W``; lower scores
mean "prune first".
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import InputDomainError, NumericalError, ShapeError
from .model import as_matrix


class Metric(str, Enum):
    MAGNITUDE = "magnitude"
    WANDA = "wanda"
    RIA = "ria"
    SPARSEGPT_DIAG = "sparsegpt_diag"

    @classmethod
    def parse(cls, name) -> "Metric":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InputDomainError(
                f"unknown metric {name!r}; expected one of {[m.value for m in cls]}"
            ) from None


def feature_norms(activations) -> np.ndarray:
    """l2 norm of each input feature (column) over all calibration tokens."""
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise InputDomainError("activations must be a non-empty 2-D matrix")
    return np.sqrt(np.sum(x * x, axis=0))


def _check_norms(W: np.ndarray, norms) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 1 or norms.shape[0] != W.shape[1]:
        raise ShapeError(f"need {W.shape[1]} feature norms, got shape {norms.shape}")
    if np.any(norms < 0):
        raise InputDomainError("feature norms must be non-negative")
    return norms


def score_magnitude(W) -> np.ndarray:
    return np.abs(as_matrix(W, "W"))


def score_wanda(W, norms) -> np.ndarray:
    W = as_matrix(W, "W")
    norms = _check_norms(W, norms)
    return np.abs(W) * norms[None, :]


def score_ria(W, norms, alpha: float = 0.5) -> np.ndarray:
    """Relative importance times ``norms ** alpha``.

    A row or column of ``|W|`` that sums to zero contributes a zero ratio
    term instead of 0/0.
    """
    W = as_matrix(W, "W")
    norms = _check_norms(W, norms)
    a = np.abs(W)
    col_sum = a.sum(axis=0, keepdims=True)
    row_sum = a.sum(axis=1, keepdims=True)
    col_term = np.divide(a, col_sum, out=np.zeros_like(a), where=col_sum > 0)
    row_term = np.divide(a, row_sum, out=np.zeros_like(a), where=row_sum > 0)
    return (col_term + row_term) * norms[None, :] ** alpha


def default_damping(gram: np.ndarray) -> float:
    return max(0.01 * float(np.mean(np.diag(gram))), 1e-8)


def score_sparsegpt_diag(W, activations, lam: float | None = None) -> np.ndarray:
    """``W**2 / diag((X^T X + lam I)^-1)``; the weight update step is not performed.

    ``lam=None`` uses 1% of the mean Gram diagonal, floored at 1e-8.
    """
    W = as_matrix(W, "W")
    X = np.asarray(activations, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputDomainError("activations must be a non-empty 2-D matrix")
    if X.shape[1] != W.shape[1]:
        raise ShapeError(f"activations have {X.shape[1]} columns, W has {W.shape[1]}")
    gram = X.T @ X
    if lam is None:
        lam = default_damping(gram)
    if not lam > 0:
        raise InputDomainError("damping lambda must be positive")
    try:
        inv = np.linalg.inv(gram + lam * np.eye(gram.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"damped Hessian not invertible (lambda={lam:g}): {exc}") from exc
    d = np.diag(inv)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise NumericalError(
            f"inverse Hessian diagonal not positive/finite (lambda={lam:g}, min={d.min():g})"
        )
    return W * W / d[None, :]


def resolve_lambda(rule: str) -> float | None:
    """Map a damping rule name to a value: ``"mean_diag"`` -> None (default rule), or a float literal."""
    if rule in (None, "", "mean_diag"):
        return None
    try:
        return float(rule)
    except ValueError:
        raise InputDomainError(f"unknown sparsegpt lambda rule {rule!r}") from None


def compute_scores(metric, W, activations, *, ria_alpha: float = 0.5,
                   sparsegpt_lambda: str = "mean_diag") -> np.ndarray:
    """Dispatch to the scorer named by ``metric`` using one layer's calibration inputs."""
    metric = Metric.parse(metric)
    if metric is Metric.MAGNITUDE:
        return score_magnitude(W)
    if metric is Metric.WANDA:
        return score_wanda(W, feature_norms(activations))
    if metric is Metric.RIA:
        return score_ria(W, feature_norms(activations), ria_alpha)
    return score_sparsegpt_diag(W, activations, resolve_lambda(sparsegpt_lambda))
