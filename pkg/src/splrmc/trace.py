"""Per-iteration trace records shared by all solvers.

The first eight fields form the fixed trace-file schema; the remaining
fields are in-memory diagnostics used by the convergence-rate report and
are never serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

TRACE_COLUMNS = ("iter", "seconds", "F", "H", "frob_delta", "eta", "rank", "flops")


@dataclass
class TraceRow:
    k: int
    seconds: float
    F: float
    H: float
    frob_delta: float
    eta: float
    rank: int
    flops: int
    # diagnostics beyond the serialized schema
    step_sq: float = math.nan     # ||A_k - A_k+1||_F^2 + ||B_k - B_k+1||_F^2 (raw updates)
    grad_sq: float = math.nan     # squared gradient norms at the two half-step states
    d_min_sq: float = math.nan    # extreme eigenvalues of the iterate Grams
    d_max_sq: float = math.nan

    def csv_values(self, zero_seconds: bool = False) -> tuple:
        sec = 0.0 if zero_seconds else self.seconds
        return (self.k, sec, self.F, self.H, self.frob_delta, self.eta,
                self.rank, self.flops)
