"""Dense linear-algebra kernels shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and exactly two
dimensions.  The SVD is a one-sided (Hestenes) Jacobi iteration and the
symmetric eigensolver is a two-sided cyclic Jacobi iteration; both use a
round-robin pair ordering so that each round rotates disjoint column pairs in
a single vectorized update.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

EPS = np.finfo(np.float64).eps

# sigma_i <= RANK_RTOL * sigma_1 counts as zero for numerical rank
RANK_RTOL = 1e-10
# eigenvalues <= PINV_RTOL * lambda_max are dropped by pinv_psd
PINV_RTOL = 1e-12


class ConvergenceError(RuntimeError):
    """Raised when a Jacobi iteration exceeds its sweep cap."""


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate ``m`` as a finite, non-empty 2-D float64 array and return it."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Singular triple ``m = u @ diag(sigma) @ v.T`` with descending sigma.

    ``u`` has ``len(sigma)`` columns for a thin decomposition and ``rows``
    columns when ``full`` is set; the extra columns pair with implicit zero
    singular values.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    full: bool = False

    @property
    def k(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        k = self.k
        return (self.u[:, :k] * self.sigma) @ self.v.T


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method tournament: every pair (p, q) appears in exactly one round.
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = sorted((min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0)
        if pairs:
            p = np.array([a for a, _ in pairs], dtype=np.intp)
            q = np.array([b for _, b in pairs], dtype=np.intp)
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _canonical_signs(u: np.ndarray, *others: np.ndarray) -> None:
    # Largest-|entry| of each u column made positive; argmax picks the lowest row on ties.
    k = u.shape[1]
    if k == 0:
        return
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(k)] < 0
    u[:, flip] *= -1.0
    for o in others:
        kk = min(k, o.shape[1])
        o[:, :kk][:, flip[:kk]] *= -1.0


def _one_sided_jacobi(g: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``g`` in place; returns (g, v) with g_in @ v = g."""
    m, n = g.shape
    v = np.eye(n)
    tol = EPS * m
    # columns this small are zero at working precision; rotating them only cycles on roundoff
    negligible = (EPS * EPS * np.linalg.norm(g)) ** 2
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p_all, q_all in rounds:
            gp = g[:, p_all]
            gq = g[:, q_all]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > negligible)
            if not active.any():
                continue
            rotated = True
            p, q = p_all[active], q_all[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return g, v
    raise ConvergenceError(
        f"one-sided Jacobi SVD did not converge for a {m}x{n} matrix "
        f"after {max_sweeps} sweeps"
    )


def _complete_basis(q: np.ndarray, m: int) -> np.ndarray:
    """Orthonormal columns spanning the orthogonal complement of ``q`` in R^m."""
    if q.shape[1] == 0:
        return np.eye(m)
    full, _ = np.linalg.qr(q, mode="complete")
    comp = full[:, q.shape[1]:]
    # one re-orthogonalization pass for rank-deficient q
    comp = comp - q @ (q.T @ comp)
    comp, _ = np.linalg.qr(comp)
    return comp


def _svd_tall(a: np.ndarray, want_full_u: bool) -> SvdResult:
    m, n = a.shape
    g, v = _one_sided_jacobi(a.copy(), max_sweeps=100 * min(m, n))
    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]
    floor = sigma[0] * EPS * max(m, n) if sigma[0] > 0 else 0.0
    good = int(np.count_nonzero(sigma > max(floor, np.finfo(np.float64).tiny)))
    q = g[:, :good] / sigma[:good]
    ncols = m if want_full_u else n
    if good < ncols:
        q = np.hstack([q, _complete_basis(q, m)[:, : ncols - good]])
    return SvdResult(u=q, sigma=sigma, v=v, full=want_full_u)


def svd(m, want_full_u: bool = False) -> SvdResult:
    """Singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    m : array_like
        Finite real matrix of shape (rows, cols).
    want_full_u : bool
        Return a complete ``rows x rows`` orthonormal ``u``; needed to read
        trailing left singular vectors when ``cols < rows``.

    Returns
    -------
    SvdResult
        ``sigma`` non-increasing with length ``min(rows, cols)``.  Each
        (u column, v column) pair is sign-flipped so that the largest-magnitude
        entry of the u column is positive.

    Raises
    ------
    ConvergenceError
        If more than ``100 * min(rows, cols)`` sweeps are needed.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows >= cols:
        res = _svd_tall(a, want_full_u)
        u, sigma, v = res.u, res.sigma, res.v
    else:
        # Jacobi on the transpose; its accumulated rotations give a full square u.
        res = _svd_tall(a.T, want_full_u=False)
        u, sigma, v = res.v, res.sigma, res.u
    u = u.copy()
    v = v.copy()
    k = len(sigma)
    _canonical_signs(u[:, :k], v)
    if u.shape[1] > k:
        extra = u[:, k:]
        _canonical_signs(extra)
        u[:, k:] = extra
    return SvdResult(u=u, sigma=sigma, v=v, full=want_full_u)


def symmetric_eig(c, max_sweeps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic two-sided Jacobi.

    Returns ``(lam, vecs)`` with ``lam`` in descending order and
    ``c = vecs @ diag(lam) @ vecs.T``.  Eigenvector signs follow the same
    canonical rule as :func:`svd`.
    """
    a = as_matrix(c, "symmetric matrix").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"symmetric matrix must be square, got {a.shape}")
    a = 0.5 * (a + a.T)
    if max_sweeps is None:
        max_sweeps = 100 * n
    vecs = np.eye(n)
    rounds = _round_robin(n)
    floor = EPS * EPS * max(np.linalg.norm(a), np.finfo(np.float64).tiny)
    for _ in range(max_sweeps):
        rotated = False
        for p_all, q_all in rounds:
            apq = a[p_all, q_all]
            app = a[p_all, p_all]
            aqq = a[q_all, q_all]
            active = (np.abs(apq) > EPS * np.sqrt(np.abs(app * aqq))) & (np.abs(apq) > floor)
            if not active.any():
                continue
            rotated = True
            p, q = p_all[active], q_all[active]
            apq, app, aqq = apq[active], app[active], aqq[active]
            theta = (aqq - app) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c_ = 1.0 / np.sqrt(1.0 + t * t)
            s_ = t * c_
            colp, colq = a[:, p], a[:, q]
            a[:, p] = c_ * colp - s_ * colq
            a[:, q] = s_ * colp + c_ * colq
            rowp, rowq = a[p, :], a[q, :]
            a[p, :] = c_[:, None] * rowp - s_[:, None] * rowq
            a[q, :] = s_[:, None] * rowp + c_[:, None] * rowq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = vecs[:, p], vecs[:, q]
            vecs[:, p] = c_ * vp - s_ * vq
            vecs[:, q] = s_ * vp + c_ * vq
        if not rotated:
            lam = np.diag(a).copy()
            order = np.argsort(-lam, kind="stable")
            lam = lam[order]
            vecs = vecs[:, order].copy()
            _canonical_signs(vecs)
            return lam, vecs
    raise ConvergenceError(
        f"cyclic Jacobi eigensolver did not converge for a {n}x{n} matrix "
        f"after {max_sweeps} sweeps"
    )


def truncate_rank(s: SvdResult, k: int) -> np.ndarray:
    """Sum of the leading ``k`` singular triples; ``k = 0`` gives the zero matrix."""
    if not 0 <= k <= s.k:
        raise ValueError(f"truncation rank {k} outside [0, {s.k}]")
    return (s.u[:, :k] * s.sigma[:k]) @ s.v[:, :k].T


def numerical_rank(sigma, rtol: float = RANK_RTOL) -> int:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0 or sigma[0] <= 0:
        return 0
    return int(np.count_nonzero(sigma > rtol * sigma[0]))


def check_psd(c, name: str = "matrix") -> np.ndarray:
    """Validate symmetry (1e-9) and positive semidefiniteness of ``c``."""
    c = as_matrix(c, name)
    if c.shape[0] != c.shape[1]:
        raise ValueError(f"{name} must be square, got {c.shape}")
    scale = max(1.0, float(np.max(np.abs(c))))
    if np.max(np.abs(c - c.T)) > 1e-9 * scale:
        raise ValueError(f"{name} is not symmetric within 1e-9")
    return c


def pinv_psd(c, damping: float = 0.0) -> np.ndarray:
    """Inverse of ``c + damping*I`` for a symmetric PSD ``c``.

    With ``damping == 0`` this is the Moore-Penrose pseudo-inverse, computed
    from the eigendecomposition with eigenvalues at or below
    ``1e-12 * lambda_max`` treated as zero.
    """
    c = check_psd(c)
    if damping < 0 or not np.isfinite(damping):
        raise ValueError(f"damping must be a finite non-negative real, got {damping}")
    lam, vecs = symmetric_eig(c)
    lam_max = lam[0]
    if lam[-1] < -1e-9 * max(abs(lam_max), abs(lam[-1])):
        raise ValueError(f"matrix is indefinite: smallest eigenvalue {lam[-1]:.3e}")
    if damping > 0:
        inv = 1.0 / (np.maximum(lam, 0.0) + damping)
    else:
        keep = lam > PINV_RTOL * lam_max if lam_max > 0 else np.zeros_like(lam, dtype=bool)
        inv = np.zeros_like(lam)
        inv[keep] = 1.0 / lam[keep]
    out = (vecs * inv) @ vecs.T
    return 0.5 * (out + out.T)


def condition_estimate(c) -> float:
    """Ratio of extreme eigenvalues of a PSD matrix; ``inf`` when singular."""
    lam, _ = symmetric_eig(c)
    if lam[-1] <= 0:
        return float("inf")
    return float(lam[0] / lam[-1])


def fro_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))
