"""Free-energy scoring over the logits of a bias-free linear classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ShapeError
from .linalg import as_matrix


def logsumexp(v) -> float:
    """Stable ``log(sum(exp(v)))`` via the max-shift trick."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("logsumexp of an empty vector")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp of a 2-D array."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] == 0:
        raise EmptyInput("logsumexp over an empty axis")
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def free_energy(logits) -> float:
    """F = -logsumexp(logits). Higher means more out-of-distribution."""
    return -logsumexp(logits)


def free_energy_rows(logits: np.ndarray) -> np.ndarray:
    return -logsumexp_rows(logits)


@dataclass(frozen=True)
class ClassifierHead:
    """Last linear layer ``logits = w_cls.T @ features`` with an optional
    dimension-reducing layer ``nsr`` (d_in × r) applied first.

    There is no bias term.
    """

    w_cls: np.ndarray
    nsr: np.ndarray | None = None

    def __post_init__(self):
        w = as_matrix(self.w_cls)
        object.__setattr__(self, "w_cls", w)
        if self.nsr is not None:
            g = as_matrix(self.nsr)
            if g.shape[1] != w.shape[0]:
                raise ShapeError(
                    f"NSR output dimension {g.shape[1]} does not match head input {w.shape[0]}"
                )
            if g.shape[1] >= g.shape[0]:
                raise ShapeError(
                    f"NSR must reduce dimension: r={g.shape[1]} is not < d_in={g.shape[0]}"
                )
            object.__setattr__(self, "nsr", g)

    @property
    def d_in(self) -> int:
        return self.nsr.shape[0] if self.nsr is not None else self.w_cls.shape[0]

    @property
    def feature_dim(self) -> int:
        """Dimension of the space ``w_cls`` acts on (d' in the analysis)."""
        return self.w_cls.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w_cls.shape[1]


def effective_features(head: ClassifierHead, features) -> np.ndarray:
    """Map features (a vector or a batch of row vectors) into the space ``w_cls`` sees."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != head.d_in:
        raise ShapeError(f"features have dimension {x.shape[-1]}, head expects {head.d_in}")
    return x @ head.nsr if head.nsr is not None else x


def head_forward(head: ClassifierHead, features) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(effective_features, logits)`` for one vector or a batch of rows."""
    eff = effective_features(head, features)
    return eff, eff @ head.w_cls


def head_energy(head: ClassifierHead, features) -> np.ndarray | float:
    _, logits = head_forward(head, features)
    if logits.ndim == 1:
        return free_energy(logits)
    return free_energy_rows(logits)
