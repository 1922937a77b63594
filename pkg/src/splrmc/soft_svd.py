"""Rank-restricted soft SVD of a fully observed matrix by alternating
multiresponse ridge regressions.

The iteration keeps the model in SVD form (A = U D, B = V D) so each ridge
solve is a matrix multiply followed by coordinate-wise shrinkage, and the
relative-change stopping rule is evaluated through a trace identity that
never materializes the full matrix.  A closed-form dense solver is provided
as an independent oracle for testing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .dense import random_orthonormal, orthonormalize, soft_threshold, svd_skinny
from .splr import (FactorPair, OpCounter, ParallelConfig, SplrMatrix,
                   splr_left_multiply, splr_right_multiply)
from .trace import TraceRow

MODEL_VANISH_TOL = 1e-14


@dataclass(frozen=True)
class SoftSvdConfig:
    """Settings for :func:`soft_svd_solve`.

    ``tol`` bounds the relative squared Frobenius change between sweeps;
    ``final_cleanup`` re-derives exact soft-thresholded singular values from
    one last multiply, which reveals exact zeros in the rank.
    """

    rank: int
    lam: float
    tol: float = 1e-5
    max_iter: int = 300
    seed: int = 0
    final_cleanup: bool = True
    trace_every: int = 1

    def validate(self, m: int, n: int) -> None:
        if not 0 < self.rank <= min(m, n):
            raise ValueError(f"rank must be in (0, {min(m, n)}], got {self.rank}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class SoftSvdResult:
    factors: FactorPair
    trace: list
    converged: bool


def _is_splr(X) -> bool:
    return isinstance(X, SplrMatrix)


def _right_mult(X, W, counter, par):
    if _is_splr(X):
        return splr_right_multiply(X, W, counter=counter, par=par)
    out = X @ W
    if counter is not None:
        counter.add(X.shape[0] * X.shape[1] * W.shape[1])
    return out


def _left_mult(X, W, counter, par):
    if _is_splr(X):
        return splr_left_multiply(X, W, counter=counter, par=par)
    out = X.T @ W
    if counter is not None:
        counter.add(X.shape[0] * X.shape[1] * W.shape[1])
    return out


def _frob_sq(X) -> float:
    return X.frob_norm_sq() if _is_splr(X) else float(np.sum(np.asarray(X) ** 2))


def _delta_triplet(U0, s0, V0, U1, s1, V1) -> float:
    """Relative squared Frobenius change between U0 diag(s0) V0^T and the new
    triplet, via the trace identity (no m x n matrix is formed)."""
    denom = float(s0 @ s0)
    new_sq = float(s1 @ s1)
    if denom == 0.0:
        return 0.0 if new_sq == 0.0 else math.inf
    C = U0.T @ U1
    E = V0.T @ V1
    cross = float(np.einsum("i,ij,j,ij->", s0, C, s1, E))
    num = max(denom + new_sq - 2.0 * cross, 0.0)
    return num / denom


def frobenius_delta(old: FactorPair, new: FactorPair) -> float:
    """Relative squared Frobenius change ||M_old - M_new||^2 / ||M_old||^2.

    Returns ``inf`` when the old pair is identically zero (and the new one
    is not); cost is O((m+n) r^2 + r^3).
    """
    if old.m != new.m or old.n != new.n:
        raise ValueError("factor pairs have different shapes")
    return _delta_triplet(old.U, old.d, old.V, new.U, new.d, new.V)


def pad_warm_start(warm: FactorPair, rank: int, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solver state (U, d_state, V) from a prior solution.

    Zero singular values are dropped; if fewer than ``rank`` live directions
    remain, random columns orthogonal to the existing basis are appended with
    d set to the smallest live singular value (1 if there is none).
    """
    live = warm.trim()
    q = min(live.r, rank)
    U_l, V_l, d_l = live.U[:, :q], live.V[:, :q], live.d[:q]
    m, n = warm.m, warm.n
    extra = rank - q
    if extra:
        U = orthonormalize(np.hstack([U_l, rng.standard_normal((m, extra))])).Q
        V = orthonormalize(np.hstack([V_l, rng.standard_normal((n, extra))])).Q
        pad = d_l.min() if q else 1.0
        d_model = np.concatenate([d_l, np.full(extra, pad)])
    else:
        U, V, d_model = U_l, V_l, d_l
    return U, np.sqrt(d_model), V


def _init_state(m, n, cfg: SoftSvdConfig, warm: FactorPair | None, rng):
    if warm is not None:
        if warm.m != m or warm.n != n:
            raise ValueError("warm start has wrong shape")
        return pad_warm_start(warm, cfg.rank, rng)
    U = random_orthonormal(m, cfg.rank, rng)
    return U, np.ones(cfg.rank), np.zeros((n, cfg.rank))


def _safe_scale(d: np.ndarray, lam: float) -> np.ndarray:
    # dead directions (d = 0, lam = 0) stay dead instead of poisoning with 0/0
    out = np.zeros_like(d)
    alive = (d > 0) | (lam > 0)
    out[alive] = d[alive] / (d[alive] ** 2 + lam)
    return out


def soft_svd_solve(X, cfg: SoftSvdConfig, warm_start: FactorPair | None = None,
                   counter: OpCounter | None = None,
                   par: ParallelConfig | None = None) -> SoftSvdResult:
    """Solve min over rank-r Z of 0.5 ||X - Z||_F^2 + lam ||Z||_* by
    alternating ridge regressions.

    Parameters
    ----------
    X : SplrMatrix or dense ndarray
        The fully observed matrix (possibly in sparse-plus-low-rank form).
    cfg : SoftSvdConfig
    warm_start : FactorPair, optional
        Prior solution; padded to the operating rank if its rank is lower.

    Returns
    -------
    SoftSvdResult with orthonormal U, V, soft-thresholded singular values
    and a per-sweep trace.  ``converged`` is False when ``max_iter`` was
    reached first; the factors are still valid in that case.
    """
    m, n = (X.m, X.n) if _is_splr(X) else X.shape
    cfg.validate(m, n)
    counter = counter if counter is not None else OpCounter()
    rng = np.random.default_rng(cfg.seed)
    lam = cfg.lam

    U, d, V = _init_state(m, n, cfg, warm_start, rng)
    x_sq = _frob_sq(X)
    t0 = time.perf_counter()
    trace: list[TraceRow] = []

    # honest objective at the initial pair (it need not be in SVD form)
    B0 = V * d
    s0 = d * d
    if np.any(B0):
        XV = _right_mult(X, V, counter, par)
        fit0 = x_sq - 2.0 * float(np.einsum("k,k->", s0, np.einsum("ik,ik->k", U, XV))) \
            + float(s0 @ s0)
    else:
        fit0 = x_sq
    pen0 = 0.5 * lam * (float(s0.sum()) + float(np.sum(B0 * B0)))
    f0 = 0.5 * max(fit0, 0.0) + pen0
    trace.append(TraceRow(0, 0.0, f0, f0, math.nan, math.nan,
                          int(np.sum(s0 > 1e-9 * max(s0.max(initial=0.0), 1e-300))),
                          counter.ops, d_min_sq=float(s0.min(initial=0.0)),
                          d_max_sq=float(s0.max(initial=0.0))))

    converged = False
    for k in range(1, cfg.max_iter + 1):
        U_prev, s_prev, V_prev = U, d * d, V
        eta = step_sq = grad_sq = 0.0
        dmin_sq, dmax_sq = math.inf, 0.0

        # B half-step: ridge solve for B given A = U diag(d)
        scale = _safe_scale(d, lam)
        Bt = _left_mult(X, U * scale, counter, par)
        dB = Bt - V * d
        eta += 0.5 * float(np.sum((dB * d) ** 2)) + 0.5 * lam * float(np.sum(dB * dB))
        step_sq += float(np.sum(dB * dB))
        grad_sq += float(np.sum((dB * (d * d + lam)) ** 2))
        sv = svd_skinny(Bt * d)
        V, U, d = sv.U, U @ sv.V, np.sqrt(sv.s)
        counter.add(6 * n * cfg.rank**2 + m * cfg.rank**2)
        dmin_sq = min(dmin_sq, float(sv.s.min(initial=0.0)))
        dmax_sq = max(dmax_sq, float(sv.s.max(initial=0.0)))

        # A half-step
        scale = _safe_scale(d, lam)
        At = _right_mult(X, V * scale, counter, par)
        dA = At - U * d
        eta += 0.5 * float(np.sum((dA * d) ** 2)) + 0.5 * lam * float(np.sum(dA * dA))
        step_sq += float(np.sum(dA * dA))
        grad_sq += float(np.sum((dA * (d * d + lam)) ** 2))
        XVb = np.where(scale > 0, At / np.where(scale > 0, scale, 1.0), 0.0)
        sv = svd_skinny(At * d)
        U, V, d = sv.U, V @ sv.V, np.sqrt(sv.s)
        counter.add(6 * m * cfg.rank**2 + n * cfg.rank**2)
        s_now = d * d
        dmin_sq = min(dmin_sq, float(s_now.min(initial=0.0)))
        dmax_sq = max(dmax_sq, float(s_now.max(initial=0.0)))

        delta = _delta_triplet(U_prev, s_prev, V_prev, U, s_now, V)
        model_sq = float(s_now @ s_now)
        vanished = math.sqrt(model_sq) <= MODEL_VANISH_TOL * max(1.0, math.sqrt(x_sq))

        if k % cfg.trace_every == 0 or k == cfg.max_iter or delta <= cfg.tol or vanished:
            # <X, M> reuses the A half-step product: X V_new = (X V_b) R
            T = U.T @ XVb
            inner = float(np.einsum("k,kj,jk->", s_now, T, sv.V))
            fit = max(x_sq - 2.0 * inner + model_sq, 0.0)
            f_val = 0.5 * fit + lam * float(s_now.sum())
            trace.append(TraceRow(k, time.perf_counter() - t0, f_val, f_val, delta,
                                  eta, int(np.sum(s_now > 1e-9 * max(s_now.max(initial=0.0), 1e-300))),
                                  counter.ops, step_sq=step_sq, grad_sq=grad_sq,
                                  d_min_sq=dmin_sq, d_max_sq=dmax_sq))
        if delta <= cfg.tol or vanished:
            converged = True
            break

    if cfg.final_cleanup:
        M = _right_mult(X, V, counter, par)
        sv = svd_skinny(M)
        counter.add(6 * m * cfg.rank**2 + n * cfg.rank**2)
        factors = FactorPair(sv.U, soft_threshold(sv.s, lam), V @ sv.V)
    else:
        factors = FactorPair(U, d * d, V)
    return SoftSvdResult(factors, trace, converged)


def oracle_soft_svd(X, rank: int, lam: float) -> np.ndarray:
    """Closed-form solution U_r S_lam(D_r) V_r^T from a full dense SVD.

    Test-scale only; refuses matrices with min dimension above 100.
    """
    X = np.asarray(X, dtype=float)
    if min(X.shape) > 100:
        raise ValueError("oracle_soft_svd is restricted to test-scale inputs")
    if not 0 < rank <= min(X.shape):
        raise ValueError("rank out of range")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    keep = soft_threshold(s[:rank], lam)
    return (U[:, :rank] * keep) @ Vt[:rank]


def unshrunk_singular_values(d, lam: float) -> np.ndarray:
    """Undo the shrinkage of a lam-regularized run: add lam back to each
    nonzero thresholded singular value."""
    d = np.asarray(d, dtype=float)
    return np.where(d > 0, d + lam, 0.0)
