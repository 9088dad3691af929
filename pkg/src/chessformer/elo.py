"""Maximum-likelihood Elo from pairwise results, with profile-likelihood intervals.

P(i beats j) = 1 / (1 + 10^((R_j - R_i) / 400)); a draw counts as half a win
for each side. One agent is pinned to an anchor rating.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

SCALE = 400.0 / math.log(10.0)   # Elo points per natural-log odds unit


@dataclass
class EloEstimate:
    ratings: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    anchor: int
    degenerate: bool

    def interval(self, i: int) -> tuple[float, float]:
        return float(self.lower[i]), float(self.upper[i])


def _tables(pairs: dict, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Score matrix S[i, j] (points i took off j) and game counts G[i, j]."""
    score = np.zeros((n, n))
    games = np.zeros((n, n))
    for (i, j), (w, d, l) in pairs.items():
        score[i, j] += w + 0.5 * d
        score[j, i] += l + 0.5 * d
        games[i, j] += w + d + l
        games[j, i] += w + d + l
    return score, games


def log_likelihood(ratings: np.ndarray, score: np.ndarray, games: np.ndarray) -> float:
    diff = (ratings[:, None] - ratings[None, :]) / SCALE
    # log sigmoid(diff) for every ordered pair, counted once per unordered pair via the score split
    return float(np.sum(score * -np.logaddexp(0.0, -diff)))


def _gradient(ratings, score, games):
    diff = (ratings[:, None] - ratings[None, :]) / SCALE
    p = 1.0 / (1.0 + np.exp(-diff))
    return (score - games * p).sum(axis=1) / SCALE


def is_degenerate(score: np.ndarray) -> bool:
    """The likelihood has no finite maximum unless every agent can reach every other
    through results where it took at least some points."""
    n = score.shape[0]
    if n < 2:
        return True
    count, _ = connected_components(csr_matrix(score > 0), directed=True, connection="strong")
    return count > 1


def _fit(score, games, anchor, anchor_elo, fixed=None, start=None, bound=None):
    n = score.shape[0]
    fixed = dict(fixed or {})
    fixed[anchor] = anchor_elo
    free = [k for k in range(n) if k not in fixed]

    def expand(x):
        r = np.empty(n)
        r[free] = x
        for k, v in fixed.items():
            r[k] = v
        return r

    def nll(x):
        r = expand(x)
        return -log_likelihood(r, score, games), -_gradient(r, score, games)[free]

    x0 = np.full(len(free), float(anchor_elo)) if start is None else np.asarray(start)[free]
    if not free:
        r = expand(np.empty(0))
        return r, log_likelihood(r, score, games)
    bounds = None if bound is None else [(anchor_elo - bound, anchor_elo + bound)] * len(free)
    res = optimize.minimize(nll, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": 1000, "gtol": 1e-10, "ftol": 1e-15})
    r = expand(res.x)
    return r, log_likelihood(r, score, games)


def estimate_elo(pairs: dict, num_agents: int, anchor: int = 0, anchor_elo: float = 0.0,
                 confidence: float = 0.95) -> EloEstimate:
    """Fit ratings from ``{(i, j): [wins_i, draws, losses_i]}``.

    Intervals come from the profile likelihood: the set of values r_k for
    which 2 (l_max - l_profile(r_k)) stays below the chi-square(1) quantile.
    A result set with no finite MLE (for example one side winning every game)
    is flagged and gets unbounded intervals.
    """
    score, games = _tables(pairs, num_agents)
    if not 0 <= anchor < num_agents:
        raise ValueError(f"anchor {anchor} out of range")
    lower = np.full(num_agents, -np.inf)
    upper = np.full(num_agents, np.inf)
    lower[anchor] = upper[anchor] = anchor_elo
    if is_degenerate(score):
        ratings, _ = _fit(score, games, anchor, anchor_elo, bound=4000.0)
        return EloEstimate(ratings, lower, upper, anchor, True)

    ratings, best = _fit(score, games, anchor, anchor_elo)
    cut = stats.chi2.ppf(confidence, df=1) / 2.0

    for k in range(num_agents):
        if k == anchor:
            continue

        def deficit(value, k=k):
            _, ll = _fit(score, games, anchor, anchor_elo, fixed={k: value}, start=ratings)
            return best - ll - cut

        for sign, out in ((-1, lower), (1, upper)):
            step = 50.0
            edge = ratings[k] + sign * step
            while deficit(edge) < 0:
                step *= 2
                edge = ratings[k] + sign * step
                if step > 1e5:
                    edge = None
                    break
            if edge is not None:
                out[k] = optimize.brentq(deficit, ratings[k], edge, xtol=1e-6)
    return EloEstimate(ratings, lower, upper, anchor, False)


def gap_interval(pairs: dict, num_agents: int, i: int, j: int, confidence: float = 0.95) -> tuple[float, float, float]:
    """Estimate and interval for R_j - R_i (re-anchoring at i)."""
    est = estimate_elo(pairs, num_agents, anchor=i, anchor_elo=0.0, confidence=confidence)
    return float(est.ratings[j]), float(est.lower[j]), float(est.upper[j])


def expected_score(diff: float) -> float:
    """Score of a player rated ``diff`` points above the opponent."""
    return 1.0 / (1.0 + 10.0 ** (-diff / 400.0))


def simulate_pairs(ratings, games_per_pair: int, rng: np.random.Generator, draw_scale: float = 0.6) -> dict:
    """Synthetic round robin from planted ratings.

    Each game's expected score follows the logistic model; a share
    ``draw_scale * min(p, 1 - p)`` of games are draws, the rest decisive with
    probabilities chosen to keep the expectation.
    """
    pairs = {}
    n = len(ratings)
    for i in range(n):
        for j in range(i + 1, n):
            p = expected_score(ratings[i] - ratings[j])
            d = draw_scale * min(p, 1 - p)
            w = p - d / 2
            counts = rng.multinomial(games_per_pair, [w, d, 1 - w - d])
            pairs[(i, j)] = [int(c) for c in counts]
    return pairs
