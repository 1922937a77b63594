"""Small dense linear-algebra primitives: soft-thresholding, multiresponse
ridge application, skinny SVD with a reproducible sign convention, and QR
orthogonalization with explicit rank-deficiency handling.

Sizes here are at most the operating rank of the solvers, so everything is
plain double-precision dense work.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .splr import OpCounter, ParallelConfig, SplrMatrix, splr_left_multiply


def soft_threshold(d, lam: float) -> np.ndarray:
    """Elementwise (d_i - lam)_+; preserves nonincreasing order."""
    if lam < 0:
        raise ValueError("threshold must be nonnegative")
    return np.maximum(np.asarray(d, dtype=float) - lam, 0.0)


def ridge_scale(d, lam: float) -> np.ndarray:
    """The shrinkage factors d_i / (d_i^2 + lam) of the multiresponse ridge."""
    d = np.asarray(d, dtype=float)
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")
    if lam == 0 and np.any(d == 0):
        raise ValueError("singular ridge: lam = 0 with a zero diagonal value")
    return d / (d * d + lam)


def ridge_apply(U, d, lam: float, X, counter: OpCounter | None = None,
                par: ParallelConfig | None = None) -> np.ndarray:
    """(D^2 + lam I)^{-1} D U^T X without forming an explicit inverse.

    Row k of the result is d_k / (d_k^2 + lam) times row k of U^T X.  ``X``
    may be dense or an :class:`SplrMatrix`; the product U^T X goes through
    the splr kernel in the latter case.
    """
    U = np.asarray(U, dtype=float)
    s = ridge_scale(d, lam)
    if isinstance(X, SplrMatrix):
        UtX = splr_left_multiply(X, U, counter=counter, par=par).T
    else:
        X = np.asarray(X, dtype=float)
        UtX = U.T @ X
        if counter is not None:
            counter.add(U.shape[0] * U.shape[1] * X.shape[1])
    return s[:, None] * UtX


class SmallSvd(NamedTuple):
    """Thin SVD M = U diag(s) V^T with s nonincreasing."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray


def svd_skinny(M) -> SmallSvd:
    """Thin SVD of a p x q matrix (q small), sign-fixed for reproducibility.

    Each left singular vector is flipped so its largest-magnitude entry is
    positive (first occurrence wins on ties), with the matching flip applied
    to the right vector.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("input to svd_skinny must be finite")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    V = Vt.T
    if U.shape[1]:
        picks = np.argmax(np.abs(U), axis=0)
        signs = np.sign(U[picks, np.arange(U.shape[1])])
        signs[signs == 0] = 1.0
        U = U * signs
        V = V * signs
    return SmallSvd(U, s, V)


class OrthoResult(NamedTuple):
    Q: np.ndarray
    R: np.ndarray
    completed: np.ndarray  # True where a dependent column was replaced


# a column is dependent when its residual norm falls below this scale-aware cut
_DEP_TOL = 1e-12


def orthonormalize(M) -> OrthoResult:
    """QR factorization Q R = M with Q^T Q = I, by modified Gram-Schmidt.

    Dependent columns get an arbitrary orthonormal completion (flagged in
    ``completed``) and a zero diagonal in R, so Q R still reconstructs M.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("expected a 2-d array")
    p, q = M.shape
    if q > p:
        raise ValueError("more columns than rows cannot be orthonormalized")
    Q = np.zeros((p, q))
    R = np.zeros((q, q))
    completed = np.zeros(q, dtype=bool)
    for j in range(q):
        v = M[:, j].astype(float, copy=True)
        pre = np.linalg.norm(v)
        for _ in range(2):  # second pass restores orthogonality lost to cancellation
            if j:
                h = Q[:, :j].T @ v
                v -= Q[:, :j] @ h
                R[:j, j] += h
        nrm = np.linalg.norm(v)
        if nrm <= _DEP_TOL * (pre + 1.0):
            completed[j] = True
            Q[:, j] = _complete_column(Q[:, :j])
        else:
            R[j, j] = nrm
            Q[:, j] = v / nrm
    return OrthoResult(Q, R, completed)


def _complete_column(Qprev: np.ndarray) -> np.ndarray:
    p = Qprev.shape[0]
    for k in range(p):
        v = np.zeros(p)
        v[k] = 1.0
        if Qprev.shape[1]:
            v -= Qprev @ (Qprev.T @ v)
        nrm = np.linalg.norm(v)
        if nrm > 0.5:
            return v / nrm
    raise ValueError("could not complete the orthonormal basis")  # pragma: no cover


def random_orthonormal(p: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """q orthonormal columns in R^p from a standard Gaussian draw."""
    if q == 0:
        return np.zeros((p, 0))
    return orthonormalize(rng.standard_normal((p, q))).Q
