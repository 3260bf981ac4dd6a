"""Locally private quantile release and the private federated calibrator.

Each agent publishes one bin edge drawn from an exponential mechanism whose
utility counts how badly an edge misses the requested quantile of the
agent's discretized scores. The federated calibrator compensates for the
randomness in two ways: it targets a slightly inflated coverage level
(controlled by ``gamma``) and asks agents for a correspondingly deeper
order statistic (the rank correction), so the final guarantee is the plain
1 - alpha.

Sampling happens in log space via the Gumbel-max trick; the softmax weights
are formed as ``utility / sensitivity`` directly, which stays finite even at
the degenerate quantile q = 1 that the rank correction can produce on small
samples (there the weight reduces to the count of scores above each edge).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conformal import CalibrationResult, _with_kind
from .coverage_table import CoverageTable, RankPair, TableKey, coverage_probability, select_ranks
from .errors import InfeasibleError, InvalidArgumentError
from .order_stats import as_matrix

__all__ = [
    "BinGrid",
    "DpConfig",
    "DEFAULT_GAMMA_GRID",
    "private_quantile_distribution",
    "private_quantile",
    "rank_correction",
    "GammaSelection",
    "select_gamma",
    "fedcp2_qq_calibrate",
]

# 20 log-spaced mixing candidates; the search objective is flat enough that
# a coarse grid suffices
DEFAULT_GAMMA_GRID: tuple[float, ...] = tuple(np.geomspace(1e-3, 0.5, 20))


@dataclass(frozen=True)
class BinGrid:
    """Discretization edges 0 = e_0 < e_1 < ... < e_B = s_max.

    Bin b is the half-open interval (e_{b-1}, e_b]; a score is discretized
    to its bin's upper edge. Scores must lie in (0, s_max]: anything larger
    must be clipped by the caller *before* the scores reach the mechanism,
    because silent clipping here would invalidate the privacy accounting.
    """

    edges: tuple[float, ...]

    def __post_init__(self) -> None:
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(edges) < 2:
            raise InvalidArgumentError("a bin grid needs at least two edges")
        if edges[0] != 0.0:
            raise InvalidArgumentError(f"the first edge must be 0, got {edges[0]}")
        if any(a >= b for a, b in zip(edges, edges[1:])):
            raise InvalidArgumentError("bin edges must be strictly increasing")

    @classmethod
    def uniform(cls, s_max: float, bins: int = 100) -> "BinGrid":
        if s_max <= 0.0:
            raise InvalidArgumentError(f"s_max must be positive, got {s_max}")
        if bins < 1:
            raise InvalidArgumentError(f"need at least one bin, got {bins}")
        return cls(edges=tuple(np.linspace(0.0, s_max, bins + 1)))

    @property
    def bins(self) -> int:
        return len(self.edges) - 1

    @property
    def s_max(self) -> float:
        return self.edges[-1]

    def bin_index(self, scores) -> np.ndarray:
        """1-based bin index of each score; rejects scores outside (0, s_max]."""
        arr = np.asarray(scores, dtype=float)
        if arr.size and (np.min(arr) <= 0.0 or np.max(arr) > self.s_max):
            raise InvalidArgumentError(
                f"scores must lie in (0, {self.s_max}]; clip before calling, "
                f"got range [{np.min(arr)}, {np.max(arr)}]"
            )
        return np.searchsorted(self.edges, arr, side="left")

    def discretize(self, scores) -> np.ndarray:
        """Each score replaced by the upper edge of its bin."""
        return np.asarray(self.edges)[self.bin_index(scores)]


@dataclass(frozen=True)
class DpConfig:
    """Parameters of the private calibrator.

    ``gamma=None`` requests the automatic grid search. ``epsilon_multiplier``
    rescales the budget actually spent by the mechanism and the rank
    correction; it exists so users of secure shuffling or aggregation can
    account for their amplification factor without this package implementing
    those primitives.
    """

    epsilon: float
    grid: BinGrid
    gamma: float | None = None
    gamma_grid: tuple[float, ...] = field(default=DEFAULT_GAMMA_GRID)
    epsilon_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise InvalidArgumentError(f"gamma must be in (0, 1), got {self.gamma}")
        if len(self.gamma_grid) == 0:
            raise InvalidArgumentError("gamma grid must be nonempty")
        if any(not 0.0 < g < 1.0 for g in self.gamma_grid):
            raise InvalidArgumentError("all gamma candidates must be in (0, 1)")
        if self.epsilon_multiplier <= 0.0:
            raise InvalidArgumentError("epsilon multiplier must be positive")

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon * self.epsilon_multiplier


def _edge_weights(scores, q: float, grid: BinGrid) -> np.ndarray:
    """Utility/sensitivity ratio per candidate edge (smaller is better).

    The raw utility is max(#below/q, #above/(1-q)) with sensitivity
    max(1/q, 1/(1-q)); dividing through first avoids the 1/(1-q) blow-up
    near q = 1.
    """
    if not 0.0 < q <= 1.0:
        raise InvalidArgumentError(f"quantile level must be in (0, 1], got {q}")
    index = grid.bin_index(scores)
    n = index.size
    counts = np.bincount(index, minlength=grid.bins + 1)[1:]
    at_or_below = np.cumsum(counts)
    below = at_or_below - counts  # discretized scores strictly below each edge
    above = n - at_or_below  # strictly above each edge
    if q >= 0.5:
        return np.maximum(below * ((1.0 - q) / q), above)
    return np.maximum(below, above * (q / (1.0 - q)))


def private_quantile_distribution(
    scores: Sequence[float], q: float, epsilon: float, grid: BinGrid
) -> np.ndarray:
    """Exact output distribution of :func:`private_quantile` over the B edges."""
    if epsilon <= 0.0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    logits = -0.5 * epsilon * _edge_weights(scores, q, grid)
    logits -= np.max(logits)
    weights = np.exp(logits)
    return weights / np.sum(weights)


def private_quantile(
    scores: Sequence[float],
    q: float,
    epsilon: float,
    grid: BinGrid,
    rng: np.random.Generator,
) -> float:
    """One private release of (approximately) the q-quantile of ``scores``.

    Output is always one of the grid edges, sampled with probability
    proportional to exp(-epsilon * utility / (2 * sensitivity)). Given its
    random generator the call is deterministic, so per-agent generator
    streams make federated runs reproducible.
    """
    if epsilon <= 0.0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    logits = -0.5 * epsilon * _edge_weights(scores, q, grid)
    choice = int(np.argmax(logits + rng.gumbel(size=logits.size)))
    return float(grid.edges[choice + 1])


def rank_correction(epsilon: float, bins: int, agents: int, gamma_alpha: float) -> int:
    """Extra order-statistic depth compensating the mechanism's downward slack.

    ceil((2/epsilon) * log(bins / (1 - (1 - gamma_alpha)^(1/agents)))); always
    at least 1 for finite inputs, decreasing in epsilon and increasing in the
    bin count.
    """
    if epsilon <= 0.0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    if bins < 1 or agents < 1:
        raise InvalidArgumentError("bins and agents must both be >= 1")
    if not 0.0 < gamma_alpha < 1.0:
        raise InvalidArgumentError(f"gamma*alpha must be in (0, 1), got {gamma_alpha}")
    # 1 - (1-x)^(1/m) via expm1/log1p keeps precision for tiny gamma_alpha
    tail = -math.expm1(math.log1p(-gamma_alpha) / agents)
    return math.ceil((2.0 / epsilon) * math.log(bins / tail))


@dataclass(frozen=True)
class GammaSelection:
    gamma: float
    local_rank: int
    server_rank: int
    correction: int
    corrected_coverage: float


def select_gamma(
    key: TableKey,
    alpha: float,
    epsilon: float,
    bins: int,
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    *,
    table: CoverageTable | None = None,
) -> GammaSelection:
    """Grid search for the mixing parameter of the private calibrator.

    For each candidate gamma the rank pair is selected at the inflated level
    (1 - alpha) / (1 - gamma * alpha) and the corrected local rank must still
    fit inside n. Among feasible candidates the one whose corrected-rank
    coverage is smallest wins (that coverage measures how much the
    compensation overshoots); ties go to the smaller gamma.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must be in (0, 1), got {alpha}")
    if len(gamma_grid) == 0:
        raise InvalidArgumentError("gamma grid must be nonempty")
    best: GammaSelection | None = None
    for gamma in gamma_grid:
        if not 0.0 < gamma < 1.0:
            raise InvalidArgumentError(f"gamma candidates must be in (0, 1), got {gamma}")
        alpha_eff = 1.0 - (1.0 - alpha) / (1.0 - gamma * alpha)
        if alpha_eff <= 0.0:
            continue
        try:
            ranks, _ = select_ranks(key, alpha_eff, table=table)
        except InfeasibleError:
            continue
        correction = rank_correction(epsilon, bins, key.m, gamma * alpha)
        total = ranks.local_rank + correction
        if total > key.n:
            continue
        corrected = coverage_probability(key, RankPair(total, ranks.server_rank))
        candidate = GammaSelection(
            gamma=float(gamma),
            local_rank=ranks.local_rank,
            server_rank=ranks.server_rank,
            correction=correction,
            corrected_coverage=corrected,
        )
        if (
            best is None
            or candidate.corrected_coverage < best.corrected_coverage
            or (
                candidate.corrected_coverage == best.corrected_coverage
                and candidate.gamma < best.gamma
            )
        ):
            best = candidate
    if best is None:
        raise InfeasibleError(
            f"every gamma candidate needs a corrected local rank above n = {key.n}; "
            f"n is too small for epsilon = {epsilon} with {bins} bins"
        )
    return best


def fedcp2_qq_calibrate(
    scores: Sequence[Sequence[float]],
    alpha: float,
    config: DpConfig,
    rng: np.random.Generator,
    *,
    table: CoverageTable | None = None,
    score_kind: str | None = None,
    recorder=None,
) -> CalibrationResult:
    """Private one-shot federated calibration.

    Every agent invokes the private quantile mechanism exactly once at level
    q = max((local_rank + correction) / n, 1/2) and sends the resulting bin
    edge; the server returns the server_rank-th smallest of the m edges.
    Per-agent generators are spawned from ``rng``, so a seeded generator
    reproduces the whole run. The reported guarantee is 1 - alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidArgumentError(f"alpha must be in (0, 1), got {alpha}")
    agents = as_matrix(scores, balanced=True)
    m, n = len(agents), agents[0].size
    key = table.key if table is not None else TableKey(m, n)
    if (key.m, key.n) != (m, n):
        raise InvalidArgumentError(
            f"table is for (m={key.m}, n={key.n}) but scores have (m={m}, n={n})"
        )
    epsilon = config.effective_epsilon
    for agent in agents:
        config.grid.bin_index(agent)  # validate range before any sampling
    if config.gamma is None:
        selection = select_gamma(
            key, alpha, epsilon, config.grid.bins, config.gamma_grid, table=table
        )
    else:
        alpha_eff = 1.0 - (1.0 - alpha) / (1.0 - config.gamma * alpha)
        if alpha_eff <= 0.0:
            raise InfeasibleError(f"gamma = {config.gamma} leaves no attainable level")
        ranks, _ = select_ranks(key, alpha_eff, table=table)
        correction = rank_correction(epsilon, config.grid.bins, m, config.gamma * alpha)
        if ranks.local_rank + correction > n:
            raise InfeasibleError(
                f"corrected local rank {ranks.local_rank + correction} exceeds n = {n}; "
                f"n is too small for epsilon = {epsilon}"
            )
        selection = GammaSelection(
            gamma=config.gamma,
            local_rank=ranks.local_rank,
            server_rank=ranks.server_rank,
            correction=correction,
            corrected_coverage=coverage_probability(
                key, RankPair(ranks.local_rank + correction, ranks.server_rank)
            ),
        )
    q = max((selection.local_rank + selection.correction) / n, 0.5)
    if recorder is not None:
        recorder.downlink(
            {
                "quantile": q,
                "epsilon": epsilon,
                "edges": config.grid.edges,
                "server_rank": selection.server_rank,
            }
        )
    streams = rng.spawn(m)
    sent = np.empty(m)
    for j, agent in enumerate(agents):
        sent[j] = private_quantile(agent, q, epsilon, config.grid, streams[j])
        if recorder is not None:
            recorder.uplink(j, sent[j])
    q_hat = float(np.partition(sent, selection.server_rank - 1)[selection.server_rank - 1])
    return CalibrationResult(
        q_hat=q_hat,
        method="fedcp2_qq",
        guaranteed_coverage=1.0 - alpha,
        params=_with_kind(
            {
                "m": m,
                "n": n,
                "alpha": alpha,
                "epsilon": config.epsilon,
                "effective_epsilon": epsilon,
                "bins": config.grid.bins,
                "s_max": config.grid.s_max,
                "gamma": selection.gamma,
                "local_rank": selection.local_rank,
                "server_rank": selection.server_rank,
                "correction": selection.correction,
                "quantile": q,
                "corrected_coverage": selection.corrected_coverage,
            },
            score_kind,
        ),
    )
