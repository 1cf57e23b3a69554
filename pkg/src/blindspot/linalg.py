"""Dense real linear algebra used by the attack and regularisation code.

Matrices are plain ``float64`` numpy arrays. The SVD is computed with
one-sided Jacobi rotations (Hestenes' method) using a round-robin pair
ordering, so every rotation inside one round touches disjoint columns and
the whole round is applied as a single vectorised update.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateSpectrum, MatrixParseError, NumericalFailure, ShapeError

DEFAULT_REL_TOL = 1e-10
MAX_SWEEPS = 100
_EPS = np.finfo(np.float64).eps


def as_matrix(a) -> np.ndarray:
    """Validate and convert ``a`` into a finite 2-D float64 array (a copy)."""
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf entries")
    return m


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``a = u @ diag(sigma) @ v.T`` with ``u`` m×m and ``v`` n×n."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def reconstruct(self) -> np.ndarray:
        m, n = self.shape
        p = len(self.sigma)
        return (self.u[:, :p] * self.sigma) @ self.v[:, :p].T


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal basis stored as the columns of ``vectors`` (dim_ambient × k)."""

    dim_ambient: int
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.dim


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of ``range(n)`` such that each round holds disjoint pairs and
    every pair appears exactly once per sweep (circle method)."""
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= n or b >= n:
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of ``a`` (m ≥ n). Returns (a @ v, v)."""
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    tol = max(np.sqrt(m), 1.0) * _EPS
    rounds = _round_robin(n)
    residual = 0.0
    for _ in range(MAX_SWEEPS):
        residual = 0.0
        rotated = False
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            nonzero = scale > 0
            rel = np.zeros_like(gamma)
            rel[nonzero] = np.abs(gamma[nonzero]) / scale[nonzero]
            residual = max(residual, float(rel.max(initial=0.0)))
            act = rel > tol
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            ap, aq = ap[:, act], aq[:, act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return work, v
    raise NumericalFailure(
        f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps", residual=residual
    )


def _complement(q: np.ndarray) -> np.ndarray:
    """Orthonormal basis (m × (m-k)) of the complement of the columns of q.

    Uses the trailing columns of the Householder Q factor of ``q``.
    """
    m, k = q.shape
    r = q.copy()
    reflectors = []
    for j in range(k):
        x = r[j:, j]
        nx = np.linalg.norm(x)
        h = x.copy()
        h[0] += nx if x[0] >= 0 else -nx
        hn = np.linalg.norm(h)
        if hn == 0.0:
            reflectors.append(None)
            continue
        h /= hn
        r[j:, j:] -= 2.0 * np.outer(h, h @ r[j:, j:])
        reflectors.append(h)
    comp = np.zeros((m, m - k))
    comp[k:, :] = np.eye(m - k)
    for j in reversed(range(k)):
        h = reflectors[j]
        if h is not None:
            comp[j:, :] -= 2.0 * np.outer(h, h @ comp[j:, :])
    return comp


def _svd_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m, n = a.shape
    work, v = _jacobi_tall(a)
    norms = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    work = work[:, order]
    v = v[:, order]
    cutoff = sigma[0] * max(m, n) * _EPS if sigma[0] > 0 else 0.0
    k = int(np.count_nonzero((sigma > cutoff) & (sigma > np.finfo(np.float64).tiny)))
    u = np.empty((m, m))
    u[:, :k] = work[:, :k] / sigma[:k]
    u[:, k:] = _complement(u[:, :k])
    return u, sigma, v


def _first_significant_sign(col: np.ndarray) -> float:
    idx = np.flatnonzero(np.abs(col) > 1e-12)
    if idx.size == 0:
        return 1.0
    return -1.0 if col[idx[0]] < 0 else 1.0


def svd(a) -> SvdResult:
    """Full singular value decomposition.

    Singular values come back sorted descending. Each column of ``v`` is
    signed so that its first non-negligible entry is non-negative, and the
    paired column of ``u`` is flipped with it.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m >= n:
        u, sigma, v = _svd_tall(a)
    else:
        v, sigma, u = _svd_tall(a.T)
    p = min(m, n)
    for j in range(n):
        if _first_significant_sign(v[:, j]) < 0:
            v[:, j] = -v[:, j]
            if j < p:
                u[:, j] = -u[:, j]
    return SvdResult(u=_frozen(u), sigma=_frozen(sigma), v=_frozen(v))


def rank_tolerance(s: SvdResult, rel_tol: float = DEFAULT_REL_TOL) -> float:
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    m, n = s.shape
    smax = s.sigma[0] if len(s.sigma) else 0.0
    return rel_tol * smax * max(m, n)


def rank(s: SvdResult, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """Number of singular values above ``rel_tol * sigma_max * max(m, n)``."""
    tol = rank_tolerance(s, rel_tol)
    if len(s.sigma) == 0 or s.sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(s.sigma > tol))


def null_space_of_transpose(w, rel_tol: float = DEFAULT_REL_TOL, s: SvdResult | None = None) -> SubspaceBasis:
    """Orthonormal basis of ``{d : w.T @ d = 0}`` for a d'×K matrix ``w``.

    These are the left singular vectors of ``w`` beyond its numerical rank.
    An empty basis is a valid answer.
    """
    w = as_matrix(w)
    if s is None:
        s = svd(w)
    r = rank(s, rel_tol)
    return SubspaceBasis(dim_ambient=w.shape[0], vectors=_frozen(np.array(s.u[:, r:])))


def decompose(basis: SubspaceBasis, v) -> tuple[np.ndarray, np.ndarray]:
    """Split ``v`` into its projection onto ``basis`` and the orthogonal remainder."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (basis.dim_ambient,):
        raise ShapeError(f"vector has length {v.shape}, basis lives in R^{basis.dim_ambient}")
    b = basis.vectors
    v_n = b @ (b.T @ v) if basis.dim else np.zeros_like(v)
    return v_n, v - v_n


@dataclass(frozen=True)
class SigmaExtremes:
    sigma_min: float
    sigma_max: float
    u_min: np.ndarray
    v_min: np.ndarray
    u_max: np.ndarray
    v_max: np.ndarray
    rank: int


def sigma_extremes(s: SvdResult, rel_tol: float = DEFAULT_REL_TOL) -> SigmaExtremes:
    """Largest and least non-zero singular values with their singular vectors.

    The least pair is taken at position ``rank - 1`` of the sorted spectrum,
    i.e. the last singular value above the rank tolerance.
    """
    r = rank(s, rel_tol)
    if r == 0:
        raise DegenerateSpectrum("matrix is zero at the rank tolerance")
    i = r - 1
    return SigmaExtremes(
        sigma_min=float(s.sigma[i]),
        sigma_max=float(s.sigma[0]),
        u_min=s.u[:, i].copy(),
        v_min=s.v[:, i].copy(),
        u_max=s.u[:, 0].copy(),
        v_max=s.v[:, 0].copy(),
        rank=r,
    )


def read_matrix(source) -> np.ndarray:
    """Parse the text format: a ``m n`` header, then m rows of n numbers.

    ``source`` is a path or an open text stream. Errors name the 1-based line.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MatrixParseError(1, "empty input, expected header 'm n'")
    head = lines[0].split()
    try:
        m, n = (int(t) for t in head)
    except ValueError:
        raise MatrixParseError(1, f"bad header {lines[0]!r}, expected 'm n'") from None
    if m < 1 or n < 1:
        raise MatrixParseError(1, f"dimensions must be positive, got {m} {n}")
    if len(lines) - 1 < m:
        raise MatrixParseError(len(lines) + 1, f"expected {m} rows, found {len(lines) - 1}")
    if len(lines) - 1 > m:
        raise MatrixParseError(m + 2, f"expected {m} rows, found {len(lines) - 1}")
    out = np.empty((m, n))
    for i, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if len(toks) != n:
            raise MatrixParseError(i, f"expected {n} values, found {len(toks)}")
        try:
            row = [float(t) for t in toks]
        except ValueError as exc:
            raise MatrixParseError(i, str(exc)) from None
        if not all(np.isfinite(row)):
            raise MatrixParseError(i, "non-finite value")
        out[i - 2] = row
    return out


def format_matrix(a) -> str:
    a = as_matrix(a)
    buf = io.StringIO()
    buf.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        buf.write(" ".join(f"{x:.17g}" for x in row))
        buf.write("\n")
    return buf.getvalue()


def write_matrix(path, a) -> None:
    Path(path).write_text(format_matrix(a))
