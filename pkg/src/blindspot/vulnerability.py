"""Blind-spot perturbations of penultimate features.

Three directions are built for a head ``w_cls`` (d' × K):

* null-space: ``w_cls.T @ delta == 0``, so the free energy is unchanged;
* least singular: ``delta = d_b * u_min`` gives the smallest logit shift of
  any ``delta`` of norm ``d_b`` orthogonal to the null space;
* random perpendicular: a control drawn at random from that same complement.

All perturbations act on effective features (after the NSR layer, if any).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .energy import ClassifierHead, effective_features, free_energy
from .errors import DegenerateSpectrum, NoNullSpace
from .linalg import (
    DEFAULT_REL_TOL,
    SubspaceBasis,
    null_space_of_transpose,
    rank,
    sigma_extremes,
    svd,
)


class AttackKind(str, Enum):
    NULL_SPACE = "NullSpace"
    LEAST_SINGULAR = "LeastSingular"
    RANDOM_PERP = "RandomPerp"


@dataclass(frozen=True)
class AttackResult:
    kind: AttackKind
    delta: np.ndarray
    d_b: float
    energy_before: float
    energy_after: float
    logit_shift_norm: float

    @property
    def energy_gap(self) -> float:
        return abs(self.energy_after - self.energy_before)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["delta"] = [float(x) for x in self.delta]
        return d


def _check_db(d_b: float) -> float:
    d_b = float(d_b)
    if not d_b > 0:
        raise ValueError(f"d_b must be positive, got {d_b}")
    return d_b


def _result(kind, head, eff, delta, d_b) -> AttackResult:
    shift = head.w_cls.T @ delta
    before = free_energy(head.w_cls.T @ eff)
    after = free_energy(head.w_cls.T @ (eff + delta))
    return AttackResult(
        kind=kind,
        delta=delta,
        d_b=d_b,
        energy_before=before,
        energy_after=after,
        logit_shift_norm=float(np.linalg.norm(shift)),
    )


def _rescale(direction: np.ndarray, d_b: float) -> np.ndarray:
    return direction * (d_b / np.linalg.norm(direction))


def head_null_basis(head: ClassifierHead, rel_tol: float = DEFAULT_REL_TOL) -> SubspaceBasis:
    return null_space_of_transpose(head.w_cls, rel_tol)


def nsv_attack(head: ClassifierHead, features, d_b: float, seed: int,
               rel_tol: float = DEFAULT_REL_TOL, basis: SubspaceBasis | None = None) -> AttackResult:
    """Perturb along a seeded uniformly random direction of Null(w_cls.T).

    Raises NoNullSpace when ``w_cls.T`` has full column rank (nullity 0).
    """
    d_b = _check_db(d_b)
    eff = effective_features(head, features)
    if basis is None:
        basis = head_null_basis(head, rel_tol)
    if basis.dim == 0:
        raise NoNullSpace(
            f"head {head.w_cls.shape} has no null space for its transpose"
        )
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(basis.dim)
    delta = _rescale(basis.vectors @ coeffs, d_b)
    return _result(AttackKind.NULL_SPACE, head, eff, delta, d_b)


def lsv_attack(head: ClassifierHead, features, d_b: float,
               rel_tol: float = DEFAULT_REL_TOL) -> AttackResult:
    """Perturb by ``d_b`` along the left singular vector of the least non-zero singular value."""
    d_b = _check_db(d_b)
    eff = effective_features(head, features)
    ext = sigma_extremes(svd(head.w_cls), rel_tol)
    delta = d_b * ext.u_min
    return _result(AttackKind.LEAST_SINGULAR, head, eff, delta, d_b)


def _random_perp_directions(s, r: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` random unit vectors (rows) in the span of the first ``r`` left singular vectors."""
    z = rng.standard_normal((n, s.u.shape[0]))
    u_r = s.u[:, :r]
    z = (z @ u_r) @ u_r.T
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_perp_attack(head: ClassifierHead, features, d_b: float, seed: int,
                       rel_tol: float = DEFAULT_REL_TOL) -> AttackResult:
    """Seeded random direction projected onto Null(w_cls.T)^⊥, rescaled to ``d_b``."""
    d_b = _check_db(d_b)
    eff = effective_features(head, features)
    s = svd(head.w_cls)
    r = rank(s, rel_tol)
    if r == 0:
        raise DegenerateSpectrum("head is zero at the rank tolerance")
    rng = np.random.default_rng(seed)
    delta = d_b * _random_perp_directions(s, r, 1, rng)[0]
    return _result(AttackKind.RANDOM_PERP, head, eff, delta, d_b)


@dataclass(frozen=True)
class MinDirectionReport:
    empirical_min: float
    analytic_min: float
    achieved_at_lsv: bool
    n_samples: int

    @property
    def bound_holds(self) -> bool:
        return self.empirical_min >= self.analytic_min - 1e-8


def verify_min_direction(head: ClassifierHead, d_b: float, n_samples: int, seed: int,
                         include_lsv: bool = False,
                         rel_tol: float = DEFAULT_REL_TOL) -> MinDirectionReport:
    """Brute-force check that no direction orthogonal to the null space beats
    ``d_b * sigma_min`` in logit-shift norm.

    With ``include_lsv`` the least singular direction is added to the sample
    set, so ``achieved_at_lsv`` reports whether the minimum is attained there.
    """
    d_b = _check_db(d_b)
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    s = svd(head.w_cls)
    ext = sigma_extremes(s, rel_tol)
    rng = np.random.default_rng(seed)
    dirs = _random_perp_directions(s, ext.rank, n_samples, rng)
    if include_lsv:
        dirs = np.vstack([dirs, ext.u_min[None, :]])
    shifts = np.linalg.norm((d_b * dirs) @ head.w_cls, axis=1)
    empirical = float(shifts.min())
    analytic = d_b * ext.sigma_min
    return MinDirectionReport(
        empirical_min=empirical,
        analytic_min=analytic,
        achieved_at_lsv=abs(empirical - analytic) <= 1e-8,
        n_samples=len(dirs),
    )


def default_boundary_distance(eff_features: np.ndarray, labels: np.ndarray, scale: float = 3.0) -> float:
    """``scale`` times the median distance of a feature to its own class centroid."""
    eff_features = np.asarray(eff_features, dtype=np.float64)
    labels = np.asarray(labels)
    dists = np.empty(len(labels))
    for k in np.unique(labels):
        idx = labels == k
        centroid = eff_features[idx].mean(axis=0)
        dists[idx] = np.linalg.norm(eff_features[idx] - centroid, axis=1)
    return float(scale * np.median(dists))

