"""Brute-force k-vector subset sum on planted instances.

Recovering which k of N public vectors were summed takes C(N, k) candidate
checks here; the count is reported to make that growth visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Optional

import numpy as np

from ..numerics import ConfigurationError, RngStream

MATCH_TOL = 1e-9


@dataclass(frozen=True)
class SubsetSumResult:
    indices: Optional[tuple]  # None means "no solution"
    candidates: int
    total: int  # C(N, k)

    @property
    def found(self) -> bool:
        return self.indices is not None


def plant_instance(n: int, d: int, k: int, stream: RngStream):
    """Random public vectors and the sum of ``k`` distinct secret ones."""
    if not 1 <= k <= n:
        raise ConfigurationError("need 1 <= k <= N")
    vecs = stream.child("vectors").normal((n, d))
    secret = tuple(sorted(int(i) for i in stream.child("secret").permutation(n)[:k]))
    return vecs, vecs[list(secret)].sum(axis=0), secret


def subset_sum_recover(public_vecs, target, k: int, early_exit: bool = False) -> SubsetSumResult:
    """Enumerate every k-subset in lexicographic order.

    Full scans always count all C(N, k) candidates and return the first match;
    ``early_exit`` stops at the first match instead.
    """
    V = np.asarray(public_vecs, dtype=float)
    target = np.asarray(target, dtype=float)
    n = V.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError("need 1 <= k <= N")
    if target.shape != V.shape[1:]:
        raise ConfigurationError("target dimension differs from the public vectors")
    found = None
    count = 0
    for subset in combinations(range(n), k):
        count += 1
        if found is None:
            s = V[subset[0]].copy()
            for i in subset[1:]:
                s += V[i]
            if np.max(np.abs(s - target)) <= MATCH_TOL:
                found = subset
                if early_exit:
                    break
    return SubsetSumResult(found, count, comb(n, k))
