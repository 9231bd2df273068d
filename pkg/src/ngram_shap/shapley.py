"""Exact and kernel-approximated Shapley attributions for scalar functions.

Both methods explain ``f`` at a point ``x`` against a background sample:
the value of a coalition S is the mean of ``f`` over background rows with
the coordinates in S overridden by ``x`` (marginal expectation).  Exact
attribution enumerates every coalition; the kernel method samples
coalitions under the Shapley kernel weight and solves a constrained
weighted least-squares problem whose two constraints pin the base value
at the empty-coalition mean and force the attributions to sum to
``f(x)`` exactly.

Explained functions must be vectorized: given an (n, M) array of rows
they return an (n,) array of values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BudgetError, LocalAccuracyError, RankDeficiencyError, ShapeError

EXACT_FEATURE_GUARD = 20
LOCAL_ACCURACY_TOL = 1e-8

# Above this many subsets in a cardinality level, partial sampling draws
# random combinations with rejection instead of enumerating the level.
_ENUMERATION_LIMIT = 1_000_000


@dataclass(frozen=True)
class Coalition:
    """A proper feature subset with its Shapley kernel weight."""

    indices: tuple[int, ...]
    weight: float

    @property
    def cardinality(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class ShapResult:
    """Base value plus per-feature attributions for one explained point.

    ``base_value + phi.sum()`` must reproduce ``fx`` (the explained
    function's value at the instance) to within ``LOCAL_ACCURACY_TOL``;
    construction fails otherwise.
    """

    base_value: float
    phi: np.ndarray
    method: str
    fx: float
    budget: int = 0

    def __post_init__(self):
        gap = self.local_accuracy_gap()
        if not gap <= LOCAL_ACCURACY_TOL:
            raise LocalAccuracyError(
                f"base + sum(phi) differs from f(x) by {gap:g}"
            )

    def local_accuracy_gap(self) -> float:
        return abs(self.base_value + math.fsum(self.phi) - self.fx)


def kernel_weight(m: int, s: int) -> float:
    """Shapley kernel weight of a single subset of size s among m features.

    Defined for proper subsets only; the empty and full coalitions have
    infinite weight and are handled as constraints, never weighted.
    """
    if not 0 < s < m:
        raise ValueError(
            f"kernel weight is infinite for s={s} with m={m}; "
            "the empty and full coalitions enter as constraints"
        )
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def coalition_value(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    indices: Sequence[int],
    background: np.ndarray,
) -> float:
    """Mean of f over background rows with coordinates in S set to x."""
    background = np.atleast_2d(background)
    if background.shape[0] < 1:
        raise ShapeError("background set must contain at least one row")
    if background.shape[1] != len(x):
        raise ShapeError(
            f"background has {background.shape[1]} columns for {len(x)} features"
        )
    hybrid = np.array(background, dtype=np.float64)
    idx = list(indices)
    hybrid[:, idx] = np.asarray(x, dtype=np.float64)[idx]
    return float(np.mean(f(hybrid)))


def _masked_values(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    masks: np.ndarray,
    background: np.ndarray,
    chunk: int = 128,
) -> np.ndarray:
    """Coalition values for many boolean masks at once, chunked for memory."""
    n_bg = background.shape[0]
    out = np.empty(masks.shape[0])
    for lo in range(0, masks.shape[0], chunk):
        part = masks[lo : lo + chunk]
        hybrid = np.where(part[:, None, :], x[None, None, :], background[None, :, :])
        values = f(hybrid.reshape(-1, masks.shape[1]))
        out[lo : lo + chunk] = values.reshape(part.shape[0], n_bg).mean(axis=1)
    return out


def exact_shap(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    background: np.ndarray,
) -> ShapResult:
    """Shapley attributions by full enumeration of all 2^M coalitions.

    Guarded at M <= 20 (the cost is 2^M coalition evaluations); beyond
    that, use :func:`kernel_shap`.
    """
    x = np.asarray(x, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    m = len(x)
    if m > EXACT_FEATURE_GUARD:
        raise BudgetError(
            f"exact enumeration over {m} features needs 2^{m} evaluations; use kernel_shap"
        )
    if background.shape[1] != m:
        raise ShapeError("background column count disagrees with x")

    n_masks = 1 << m
    bits = (np.arange(n_masks)[:, None] >> np.arange(m)[None, :]) & 1
    values = _masked_values(f, x, bits.astype(bool), background)

    # Marginal-contribution weight by coalition size, |S|!(M-|S|-1)!/M!.
    size_weight = np.array(
        [math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)]
    )
    popcount = bits.sum(axis=1)

    phi = np.empty(m)
    all_masks = np.arange(n_masks)
    for i in range(m):
        without = all_masks[(all_masks >> i) & 1 == 0]
        w = size_weight[popcount[without]]
        phi[i] = float(np.dot(w, values[without | (1 << i)] - values[without]))

    return ShapResult(
        base_value=float(values[0]),
        phi=phi,
        method="exact",
        fx=float(values[-1]),
        budget=n_masks - 2,
    )


# ---------------------------------------------------------------------------
# Coalition sampling
# ---------------------------------------------------------------------------


def _level_fill(m: int, budget: int) -> list[tuple[int, int]]:
    """How many subsets each cardinality level contributes to the budget.

    Levels are filled in ascending cardinality (1, 2, ...); the first
    level that does not fit completely is sampled partially and fills the
    rest of the budget.  Returns (cardinality, count) pairs.
    """
    taken: list[tuple[int, int]] = []
    remaining = budget
    for s in range(1, m):
        level_size = math.comb(m, s)
        if remaining >= level_size:
            taken.append((s, level_size))
            remaining -= level_size
        else:
            if remaining > 0:
                taken.append((s, remaining))
            break
        if remaining == 0:
            break
    return taken


def sample_coalitions(m: int, budget: int, seed: int | None = 0) -> list[Coalition]:
    """Pick up to ``budget`` distinct proper coalitions, deterministic per seed.

    Complete cardinality levels are taken in ascending order; a level that
    only partially fits is sampled uniformly without replacement.  When
    the budget covers all 2^M - 2 proper coalitions the result is the full
    enumeration.  Each coalition carries its Shapley kernel weight (never
    frequency-scaled; duplicates are impossible by construction).
    """
    if m < 2:
        raise ValueError("coalition sampling needs at least 2 features")
    if budget < 2:
        raise ValueError("budget must be at least 2")
    rng = np.random.default_rng(seed)
    coalitions: list[Coalition] = []
    for s, count in _level_fill(m, budget):
        w = kernel_weight(m, s)
        level_size = math.comb(m, s)
        if count == level_size:
            coalitions.extend(
                Coalition(indices=c, weight=w)
                for c in itertools.combinations(range(m), s)
            )
        elif level_size <= _ENUMERATION_LIMIT:
            level = list(itertools.combinations(range(m), s))
            picked = rng.choice(level_size, size=count, replace=False)
            coalitions.extend(Coalition(indices=level[i], weight=w) for i in picked)
        else:
            seen: set[tuple[int, ...]] = set()
            while len(seen) < count:
                cand = tuple(sorted(rng.choice(m, size=s, replace=False).tolist()))
                if cand not in seen:
                    seen.add(cand)
                    coalitions.append(Coalition(indices=cand, weight=w))
    return coalitions


def weight_capture_rate(m: int, budget: int) -> float:
    """Fraction of total Shapley kernel weight the sampled coalitions carry.

    Computed per cardinality level in closed form (level s holds total
    weight (m-1)/(s(m-s))), so no subsets are enumerated even for large m.
    Uses the same ascending level fill as :func:`sample_coalitions`.
    """
    if m < 2:
        raise ValueError("capture rate needs at least 2 features")
    if budget < 1:
        raise ValueError("budget must be positive")
    total = math.fsum((m - 1) / (s * (m - s)) for s in range(1, m))
    captured = 0.0
    for s, count in _level_fill(m, budget):
        level_weight = (m - 1) / (s * (m - s))
        level_size = math.comb(m, s)
        if count == level_size:
            captured += level_weight
        else:
            captured += (count / level_size) * level_weight
    return captured / total


# ---------------------------------------------------------------------------
# Kernel SHAP
# ---------------------------------------------------------------------------


def _weighted_lasso(D, r, w, alpha, iters=2000, tol=1e-12):
    """Coordinate-descent lasso on a weighted least-squares objective.

    Minimizes sum_k w_k (r_k - D_k phi)^2 + alpha * ||phi||_1.
    """
    n_col = D.shape[1]
    phi = np.zeros(n_col)
    wD = w[:, None] * D
    col_norm = np.einsum("kj,kj->j", wD, D)  # 2nd-derivative of each coordinate
    resid = r - D @ phi
    for _ in range(iters):
        delta = 0.0
        for j in range(n_col):
            if col_norm[j] == 0.0:
                continue
            rho = phi[j] * col_norm[j] + wD[:, j] @ resid
            new = np.sign(rho) * max(abs(rho) - alpha / 2.0, 0.0) / col_norm[j]
            if new != phi[j]:
                resid -= (new - phi[j]) * D[:, j]
                delta = max(delta, abs(new - phi[j]))
                phi[j] = new
        if delta < tol:
            break
    return phi


def kernel_shap(
    f: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    background: np.ndarray,
    budget: int,
    seed: int | None = 0,
    l1_penalty: float = 0.0,
    allow_rank_deficient: bool = False,
) -> ShapResult:
    """Kernel-weighted least-squares approximation of Shapley attributions.

    Solves ``min sum_S w_S (v(S) - phi_0 - sum_{i in S} phi_i)^2`` over the
    sampled coalitions, subject to ``phi_0 = v(empty)`` and
    ``phi_0 + sum phi_i = f(x)``; the second constraint is eliminated by
    substituting out the last feature's attribution, so local accuracy
    holds by construction.  At full enumeration the solution coincides
    with :func:`exact_shap`.

    A singular system (budget too small to identify all attributions)
    raises :class:`RankDeficiencyError` unless ``allow_rank_deficient``
    opts in to the minimum-norm solution.  ``l1_penalty`` > 0 switches the
    solve to a lasso on the same weighted objective.
    """
    x = np.asarray(x, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    m = len(x)
    if background.shape[1] != m:
        raise ShapeError("background column count disagrees with x")

    base = float(np.mean(f(background)))
    fx = float(f(x[None, :])[0])
    delta = fx - base

    if m == 1:
        # No proper coalitions exist; both constraints fix the answer.
        return ShapResult(base_value=base, phi=np.array([delta]), method="kernel", fx=fx, budget=0)

    coalitions = sample_coalitions(m, budget, seed=seed)
    masks = np.zeros((len(coalitions), m), dtype=bool)
    for k, c in enumerate(coalitions):
        masks[k, list(c.indices)] = True
    weights = np.array([c.weight for c in coalitions])
    values = _masked_values(f, x, masks, background)

    # Substitute phi_m = delta - sum(others): regress the residual response
    # on the difference design so both constraints hold exactly.
    z = masks.astype(np.float64)
    design = z[:, :-1] - z[:, -1:]
    response = values - base - delta * z[:, -1]

    if l1_penalty > 0.0:
        head = _weighted_lasso(design, response, weights, l1_penalty)
    else:
        wd = weights[:, None] * design
        normal = design.T @ wd
        rhs = wd.T @ response
        try:
            factor = cho_factor(normal)
            head = cho_solve(factor, rhs)
            # One step of iterative refinement keeps full-enumeration
            # agreement with exact enumeration at tight tolerances.
            head = head + cho_solve(factor, rhs - normal @ head)
        except np.linalg.LinAlgError:
            rank = int(np.linalg.matrix_rank(normal))
            if not allow_rank_deficient:
                raise RankDeficiencyError(
                    rank=rank,
                    needed=m - 1,
                    message=(
                        f"kernel SHAP normal equations have rank {rank}, need {m - 1}; "
                        f"budget {budget} is too small (try at least {2 * m})"
                    ),
                ) from None
            head, *_ = np.linalg.lstsq(np.sqrt(weights)[:, None] * design,
                                       np.sqrt(weights) * response, rcond=None)

    phi = np.empty(m)
    phi[:-1] = head
    phi[-1] = delta - math.fsum(head)
    return ShapResult(
        base_value=base, phi=phi, method="kernel", fx=fx, budget=len(coalitions)
    )
