"""Storage and kernels for incomplete and sparse-plus-low-rank matrices.

Every solver in this package touches data only through the types here:
``ObservedMatrix`` holds the observed entries of an incomplete matrix in
row-major order with a column-oriented cross index, and ``SplrMatrix``
represents a filled-in matrix as a sparse correction on the observed
pattern plus a skinny outer product.  The two multiply kernels are the
workhorses of the alternating solvers and keep an arithmetic-operation
count so per-iteration cost can be compared across algorithms.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class OpCounter:
    """Accumulator for arithmetic operations (1 op = 1 multiply-add)."""

    __slots__ = ("ops",)

    def __init__(self) -> None:
        self.ops = 0

    def add(self, n) -> None:
        self.ops += int(n)


@dataclass
class ParallelConfig:
    """Block-parallel contract for the splr multiplies.

    ``threads=0`` means one worker per CPU.  With ``deterministic`` set the
    row partition is a fixed block size independent of the worker count, so
    the output is bit-identical no matter how many threads run.
    """

    threads: int = 1
    deterministic: bool = False
    block_rows: int = 256
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False, compare=False)

    @property
    def workers(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)

    def pool(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        return self._pool


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class ObservedMatrix:
    """An m x n matrix observed only on an index set Omega.

    Entries are stored once, sorted row-major; column access goes through
    ``col_ptr``/``col_pos`` which index positions into the entry arrays.

    Parameters
    ----------
    m, n : int
        Matrix dimensions.
    rows, cols : integer arrays of equal length
        0-based indices of the observed cells; duplicates are rejected.
    vals : float array
        Observed values, all finite.
    """

    def __init__(self, m, n, rows, cols, vals):
        m, n = int(m), int(n)
        if m <= 0 or n <= 0:
            raise ValueError(f"matrix dimensions must be positive, got ({m}, {n})")
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.size == cols.size == vals.size):
            raise ValueError("rows, cols, vals must have equal length")
        if rows.size == 0:
            raise ValueError("at least one observed entry is required")
        if rows.min(initial=0) < 0 or rows.max(initial=0) >= m:
            raise ValueError("row index out of bounds")
        if cols.min(initial=0) < 0 or cols.max(initial=0) >= n:
            raise ValueError("column index out of bounds")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observed values must be finite")

        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if dup.any():
            k = int(np.flatnonzero(dup)[0])
            raise ValueError(
                f"duplicate entry at ({rows[k]}, {cols[k]}); duplicates are not summed"
            )

        self.m, self.n = m, n
        self.row = _frozen(rows)
        self.col = _frozen(cols)
        self.val = _frozen(vals)
        self.row_ptr = _frozen(np.searchsorted(rows, np.arange(m + 1)))
        # positions into the row-major entry arrays, grouped by column
        cpos = np.argsort(cols, kind="stable")
        self.col_pos = _frozen(cpos)
        self.col_ptr = _frozen(np.searchsorted(cols[cpos], np.arange(n + 1)))
        self._csr = None
        self._csr_t = None

    @property
    def nnz(self) -> int:
        return self.val.size

    @property
    def n_obs_per_row(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    @property
    def n_obs_per_col(self) -> np.ndarray:
        return np.diff(self.col_ptr)

    @classmethod
    def from_dense(cls, X, mask=None) -> "ObservedMatrix":
        """Build from a dense array; ``mask`` selects observed cells (default all)."""
        X = np.asarray(X, dtype=float)
        if mask is None:
            mask = np.ones(X.shape, dtype=bool)
        r, c = np.nonzero(mask)
        return cls(X.shape[0], X.shape[1], r, c, X[r, c])

    def with_values(self, vals) -> "ObservedMatrix":
        """Same pattern, new values (skips re-sorting and duplicate checks)."""
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if vals.size != self.nnz:
            raise ValueError("value array does not match the pattern size")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observed values must be finite")
        out = object.__new__(ObservedMatrix)
        out.m, out.n = self.m, self.n
        out.row, out.col, out.val = self.row, self.col, _frozen(vals)
        out.row_ptr, out.col_ptr, out.col_pos = self.row_ptr, self.col_ptr, self.col_pos
        out._csr = None
        out._csr_t = None
        return out

    def csr(self) -> sparse.csr_matrix:
        if self._csr is None:
            self._csr = sparse.csr_matrix(
                (self.val, self.col, self.row_ptr), shape=(self.m, self.n)
            )
        return self._csr

    def csr_t(self) -> sparse.csr_matrix:
        """The transpose, also in row-major (CSR) form."""
        if self._csr_t is None:
            self._csr_t = sparse.csr_matrix(
                (self.val[self.col_pos], self.row[self.col_pos], self.col_ptr),
                shape=(self.n, self.m),
            )
        return self._csr_t

    def norm_omega(self) -> float:
        """Frobenius norm of the observed values."""
        return float(np.linalg.norm(self.val))

    def to_dense(self, max_cells: int = 25_000_000) -> np.ndarray:
        if self.m * self.n > max_cells:
            raise ValueError("refusing to densify a matrix this large")
        out = np.zeros((self.m, self.n))
        out[self.row, self.col] = self.val
        return out


@dataclass(frozen=True)
class FactorPair:
    """Low-rank model M = U diag(d) V^T with orthonormal U, V.

    ``d`` holds the singular values of the model, nonnegative and
    nonincreasing.  The factored form used by the alternating solvers
    attaches scale to both sides; the symmetric square-root factors that
    make the ridge penalty equal the nuclear norm are produced on demand
    by :meth:`mmmf_factors`.
    """

    U: np.ndarray
    d: np.ndarray
    V: np.ndarray

    ORTHO_TOL = 1e-10

    def __post_init__(self):
        U = _frozen(np.asarray(self.U, dtype=float))
        V = _frozen(np.asarray(self.V, dtype=float))
        d = _frozen(np.asarray(self.d, dtype=float).ravel())
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "V", V)
        r = d.size
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != r or V.shape[1] != r:
            raise ValueError("factor shapes inconsistent with d")
        if r:
            if not np.all(np.isfinite(U)) or not np.all(np.isfinite(V)) or not np.all(np.isfinite(d)):
                raise ValueError("factors must be finite")
            if d.min() < 0 or np.any(np.diff(d) > 1e-12):
                raise ValueError("d must be nonnegative and nonincreasing")
            for Q in (U, V):
                g = Q.T @ Q
                if np.abs(g - np.eye(r)).max() > self.ORTHO_TOL:
                    raise ValueError("factor columns are not orthonormal")

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.d.size

    @classmethod
    def zero(cls, m: int, n: int) -> "FactorPair":
        return cls(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    def model_at(self, rows, cols) -> np.ndarray:
        """Evaluate M at the given index pairs."""
        if self.r == 0:
            return np.zeros(np.asarray(rows).size)
        return np.einsum("er,er->e", self.U[rows] * self.d, self.V[cols])

    def materialize(self) -> np.ndarray:
        """Dense M; intended for test-scale use."""
        return (self.U * self.d) @ self.V.T

    def rank(self, rel_tol: float = 1e-9) -> int:
        if self.r == 0 or self.d[0] <= 0:
            return 0
        return int(np.sum(self.d > rel_tol * self.d[0]))

    def trim(self, rel_tol: float = 0.0) -> "FactorPair":
        """Drop trailing zero (or relatively negligible) singular values."""
        if self.r == 0:
            return self
        cut = self.d[0] * rel_tol if self.d[0] > 0 else 0.0
        keep = self.d > cut
        if keep.all():
            return self
        return FactorPair(self.U[:, keep], self.d[keep], self.V[:, keep])

    def mmmf_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Symmetric factors (U sqrt(d), V sqrt(d)); their product is M."""
        s = np.sqrt(self.d)
        return self.U * s, self.V * s


class SplrMatrix:
    """Sparse-plus-low-rank matrix  X* = S + left @ right^T.

    ``S`` is supported exactly on the pattern Omega of ``pattern`` and holds
    ``svals`` in the same entry order.  ``left``/``right`` may have width 0
    for a purely sparse matrix.
    """

    def __init__(self, pattern: ObservedMatrix, svals, left, right):
        svals = np.asarray(svals, dtype=float).ravel()
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        if svals.size != pattern.nnz:
            raise ValueError("sparse values do not match the pattern")
        if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[1]:
            raise ValueError("low-rank factor shapes disagree")
        if left.shape[0] != pattern.m or right.shape[0] != pattern.n:
            raise ValueError("low-rank factor dimensions disagree with the pattern")
        if not np.all(np.isfinite(svals)):
            raise ValueError("sparse values must be finite")
        self.pattern = pattern
        self.svals = _frozen(svals)
        self.left = _frozen(left)
        self.right = _frozen(right)
        self._csr = None
        self._csr_t = None

    @property
    def m(self) -> int:
        return self.pattern.m

    @property
    def n(self) -> int:
        return self.pattern.n

    @property
    def lr_rank(self) -> int:
        return self.left.shape[1]

    @classmethod
    def pure_sparse(cls, pattern: ObservedMatrix, svals=None) -> "SplrMatrix":
        vals = pattern.val if svals is None else svals
        return cls(
            pattern, vals, np.zeros((pattern.m, 0)), np.zeros((pattern.n, 0))
        )

    def csr(self) -> sparse.csr_matrix:
        if self._csr is None:
            p = self.pattern
            self._csr = sparse.csr_matrix(
                (self.svals, p.col, p.row_ptr), shape=(p.m, p.n)
            )
        return self._csr

    def csr_t(self) -> sparse.csr_matrix:
        if self._csr_t is None:
            p = self.pattern
            self._csr_t = sparse.csr_matrix(
                (self.svals[p.col_pos], p.row[p.col_pos], p.col_ptr),
                shape=(p.n, p.m),
            )
        return self._csr_t

    def probe(self, rows, cols) -> np.ndarray:
        """Evaluate X* at arbitrary index pairs: s_ij (if observed) + left_i . right_j."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        out = np.zeros(rows.size)
        if self.lr_rank:
            out += np.einsum("er,er->e", self.left[rows], self.right[cols])
        # entries are sorted row-major, i.e. by the flat key i*n + j
        p = self.pattern
        keys = p.row * p.n + p.col
        want = rows * p.n + cols
        idx = np.searchsorted(keys, want)
        idx_c = np.minimum(idx, keys.size - 1)
        hit = keys[idx_c] == want
        out[hit] += self.svals[idx_c[hit]]
        return out

    def to_dense(self, max_cells: int = 250_000) -> np.ndarray:
        if self.m * self.n > max_cells:
            raise ValueError("refusing to densify a matrix this large")
        out = np.zeros((self.m, self.n))
        out[self.pattern.row, self.pattern.col] = self.svals
        if self.lr_rank:
            out += self.left @ self.right.T
        return out

    def frob_norm_sq(self) -> float:
        """||X*||_F^2 without materializing: sparse, cross and Gram terms."""
        p = self.pattern
        total = float(self.svals @ self.svals)
        if self.lr_rank:
            cross = np.einsum(
                "e,er,er->", self.svals, self.left[p.row], self.right[p.col]
            )
            gram = (self.left.T @ self.left) * (self.right.T @ self.right)
            total += 2.0 * float(cross) + float(gram.sum())
        return total


def project_omega(probe, target: ObservedMatrix) -> np.ndarray:
    """P_Omega applied to an arbitrary matrix given as an entry evaluator.

    ``probe(rows, cols)`` must return the matrix values at the index pairs;
    the result is aligned with ``target``'s entry order.
    """
    vals = np.asarray(probe(target.row, target.col), dtype=float).ravel()
    if vals.size != target.nnz:
        raise ValueError("probe returned wrong number of values")
    return vals


def dense_evaluator(M):
    """Entry evaluator for a dense array, for use with :func:`project_omega`."""
    M = np.asarray(M, dtype=float)
    return lambda rows, cols: M[rows, cols]


def splr_from_residual(X: ObservedMatrix, factors: FactorPair) -> SplrMatrix:
    """Filled-in matrix P_Omega(X) + P_Omega-perp(M) stored as sparse + low rank.

    The sparse part holds X - M on Omega and the low-rank part is the model
    itself, so the two pieces sum to X on Omega and to M elsewhere.
    """
    if factors.m != X.m or factors.n != X.n:
        raise ValueError("factor dimensions disagree with the observed matrix")
    res = X.val - factors.model_at(X.row, X.col)
    return SplrMatrix(X, res, factors.U * factors.d, factors.V)


def _run_blocks(fn, n_blocks, par: ParallelConfig | None):
    if par is not None and par.workers > 1 and n_blocks > 1:
        list(par.pool().map(fn, range(n_blocks)))
    else:
        for b in range(n_blocks):
            fn(b)


def _csr_row_block(A: sparse.csr_matrix, lo: int, hi: int) -> sparse.csr_matrix:
    indptr = A.indptr[lo : hi + 1] - A.indptr[lo]
    s, e = A.indptr[lo], A.indptr[hi]
    return sparse.csr_matrix(
        (A.data[s:e], A.indices[s:e], indptr), shape=(hi - lo, A.shape[1]), copy=False
    )


def _blocked_multiply(S, F, G, W, out_rows, par: ParallelConfig | None):
    """out = S @ W + F @ G over a fixed row partition; returns the result."""
    k = W.shape[1]
    out = np.empty((out_rows, k))
    if par is None or (par.workers == 1 and not par.deterministic):
        out[:] = S @ W
        if F.shape[1]:
            out += F @ G
        return out
    if par.deterministic:
        block = par.block_rows
    else:
        block = max(1, -(-out_rows // par.workers))
    n_blocks = -(-out_rows // block)

    def run(b):
        lo, hi = b * block, min((b + 1) * block, out_rows)
        out[lo:hi] = _csr_row_block(S, lo, hi) @ W
        if F.shape[1]:
            out[lo:hi] += F[lo:hi] @ G

    _run_blocks(run, n_blocks, par)
    return out


def splr_right_multiply(X: SplrMatrix, W, counter: OpCounter | None = None,
                        par: ParallelConfig | None = None) -> np.ndarray:
    """X* @ W for a skinny n x k dense W, in O(k|Omega| + (m+n) r k) ops."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != X.n:
        raise ValueError(f"W must be {X.n} x k, got {W.shape}")
    k, r = W.shape[1], X.lr_rank
    G = X.right.T @ W if r else np.zeros((0, k))
    out = _blocked_multiply(X.csr(), X.left, G, W, X.m, par)
    if counter is not None:
        counter.add(k * X.pattern.nnz + (X.m + X.n) * r * k)
    return out


def splr_left_multiply(X: SplrMatrix, W, counter: OpCounter | None = None,
                       par: ParallelConfig | None = None) -> np.ndarray:
    """X*^T @ W for a skinny m x k dense W; transpose analogue of the right multiply."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != X.m:
        raise ValueError(f"W must be {X.m} x k, got {W.shape}")
    k, r = W.shape[1], X.lr_rank
    G = X.left.T @ W if r else np.zeros((0, k))
    out = _blocked_multiply(X.csr_t(), X.right, G, W, X.n, par)
    if counter is not None:
        counter.add(k * X.pattern.nnz + (X.m + X.n) * r * k)
    return out
