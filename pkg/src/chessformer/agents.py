"""Search-free agents, move-matching metrics, puzzle solving and round-robin play."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import chess
import chess.pgn
import numpy as np
import torch
from scipy import stats

from . import board as cb
from .data import TrainingExample, collate, position_example
from .model import Chessformer, ModelConfig, count_flops

POLICY = "policy"
VALUE = "value"
STRATEGIES = (POLICY, VALUE)
LEGAL_MOVES_ESTIMATE = 20


class Evaluator(Protocol):
    cfg: ModelConfig

    def __call__(self, examples: list[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
        """(policy logits (B, POLICY_SIZE), value logits (B, 3)) in each mover's frame."""


class ModelEvaluator:
    def __init__(self, model: Chessformer, batch_size: int = 256):
        self.model = model.eval()
        self.cfg = model.cfg
        self.batch_size = batch_size
        self.calls = 0

    @torch.no_grad()
    def __call__(self, examples):
        policies, values = [], []
        for start in range(0, len(examples), self.batch_size):
            out = self.model.run(collate(examples[start:start + self.batch_size]))
            policies.append(out.policy.numpy())
            values.append(out.value.numpy())
        self.calls += len(examples)
        return np.concatenate(policies), np.concatenate(values)


@dataclass
class Agent:
    evaluator: Evaluator
    strategy: str = POLICY
    rating: int = 1500            # own rating, human mode only
    opponent_rating: int = 1500
    name: str = "agent"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    @property
    def history(self) -> int:
        return self.evaluator.cfg.history


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def expected_score(value_logits: np.ndarray) -> float:
    p = _softmax(np.asarray(value_logits, dtype=np.float64))
    return float(p[0] + 0.5 * p[1])


def select_move(agent: Agent, p: cb.Position) -> chess.Move:
    """Highest policy score, or the move whose child is worst for the opponent.

    Ties go to the lowest canonical move index.
    """
    moves = cb.legal_moves(p)
    if not moves:
        raise ValueError(f"no legal moves in {p.fen()}")
    turn = p.side_to_move
    order = sorted(moves, key=lambda m: cb.move_to_index(cb.canonical_move(m, turn)))
    if agent.strategy == POLICY:
        ex = position_example(p, agent.history, (agent.rating, agent.opponent_rating))
        policy, _ = agent.evaluator([ex])
        scores = np.array([policy[0, cb.move_to_index(cb.canonical_move(m, turn))] for m in order])
    else:
        children = [position_example(cb.apply_move(p, m), agent.history, (agent.opponent_rating, agent.rating))
                    for m in order]
        _, values = agent.evaluator(children)
        scores = np.array([1.0 - expected_score(v) for v in values])
    return order[int(np.argmax(scores))]


# -- move matching ---------------------------------------------------------------

@dataclass
class MatchingReport:
    accuracy: float
    ci_low: float
    ci_high: float
    perplexity: float
    positions: int


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(successes, trials).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def move_matching(agent: Agent, testset: list[TrainingExample], batch_size: int = 512) -> MatchingReport:
    """Top-1 agreement with the played move and perplexity of the legal-masked policy.

    Examples are evaluated with their own recorded ratings."""
    if agent.strategy != POLICY:
        raise ValueError("move matching needs a policy agent")
    if len(testset) == 0:
        raise ValueError("empty test set")
    hits, nll = 0, 0.0
    for start in range(0, len(testset), batch_size):
        chunk = [testset[i] for i in range(start, min(start + batch_size, len(testset)))]
        policy, _ = agent.evaluator(chunk)
        for row, ex in enumerate(chunk):
            legal = np.asarray(ex.legal)
            scores = policy[row, legal].astype(np.float64)
            hits += int(legal[int(np.argmax(scores))] == ex.target)
            logz = scores.max() + math.log(np.exp(scores - scores.max()).sum())
            nll += logz - scores[int(np.searchsorted(legal, ex.target))]
    n = len(testset)
    low, high = wilson_interval(hits, n)
    return MatchingReport(hits / n, low, high, math.exp(nll / n), n)


# -- puzzles -----------------------------------------------------------------------

@dataclass
class Puzzle:
    id: str
    fen: str
    moves: list[str]
    rating: int = 0


def load_puzzles(source) -> tuple[list[Puzzle], int]:
    """Lichess puzzle CSV (PuzzleId, FEN, Moves, Rating, ...). Returns (valid puzzles, corrupt count)."""
    text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
    rows = csv.reader(io.StringIO(text))
    puzzles, corrupt = [], 0
    for row in rows:
        if not row or row[0] == "PuzzleId":
            continue
        try:
            pz = Puzzle(row[0], row[1], row[2].split(), int(row[3]) if len(row) > 3 and row[3] else 0)
            validate_puzzle(pz)
        except (ValueError, IndexError):
            corrupt += 1
            continue
        puzzles.append(pz)
    return puzzles, corrupt


def validate_puzzle(pz: Puzzle) -> None:
    if len(pz.moves) < 2:
        raise ValueError(f"puzzle {pz.id}: needs a setup move and at least one solution move")
    p = cb.parse_fen(pz.fen)
    for mv in pz.moves:
        p = cb.apply_move(p, mv)


def solve_puzzle(agent: Agent, pz: Puzzle, mate_counts: bool = True) -> bool:
    """Agent must find every solver move; a different move that mates at once also counts."""
    p = cb.apply_move(cb.parse_fen(pz.fen), pz.moves[0])
    for i, expected in enumerate(pz.moves[1:]):
        if i % 2 == 1:
            p = cb.apply_move(p, expected)
            continue
        move = select_move(agent, p)
        if move.uci() == expected:
            p = cb.apply_move(p, move)
            continue
        return mate_counts and cb.apply_move(p, move).board.is_checkmate()
    return True


def puzzle_accuracy(agent: Agent, puzzles: list[Puzzle], mate_counts: bool = True) -> tuple[float, int]:
    solved = sum(solve_puzzle(agent, pz, mate_counts) for pz in puzzles)
    return (solved / len(puzzles) if puzzles else float("nan")), solved


# -- tournaments --------------------------------------------------------------------

@dataclass
class PlayedGame:
    white: int
    black: int
    opening: int
    start_fen: str
    moves: list[str]
    result: str
    termination: str


@dataclass
class MatchResult:
    names: list[str]
    pairs: dict = field(default_factory=dict)   # (i, j), i < j -> [wins_i, draws, losses_i]
    games: list[PlayedGame] = field(default_factory=list)

    def add(self, i: int, j: int, score_i: float, game: PlayedGame | None = None) -> None:
        a, b = (i, j) if i < j else (j, i)
        s = score_i if i < j else 1.0 - score_i
        row = self.pairs.setdefault((a, b), [0, 0, 0])
        row[0 if s == 1.0 else 1 if s == 0.5 else 2] += 1
        if game is not None:
            self.games.append(game)

    def games_played(self) -> int:
        return sum(sum(v) for v in self.pairs.values())

    def table(self) -> str:
        lines = [f"{'pair':<30} {'W':>5} {'D':>5} {'L':>5} {'score':>7}"]
        for (i, j), (w, d, l) in sorted(self.pairs.items()):
            n = w + d + l
            pair = f"{self.names[i]} vs {self.names[j]}"
            lines.append(f"{pair:<30} {w:>5} {d:>5} {l:>5} {(w + d / 2) / n:>7.3f}")
        return "\n".join(lines)

    def to_pgn(self) -> str:
        out = []
        for k, g in enumerate(self.games):
            game = chess.pgn.Game()
            game.headers["Event"] = "Round robin"
            game.headers["Round"] = str(k + 1)
            game.headers["White"] = self.names[g.white]
            game.headers["Black"] = self.names[g.black]
            game.headers["Result"] = g.result
            game.headers["Termination"] = g.termination
            game.headers["Opening"] = str(g.opening)
            board = chess.Board(g.start_fen)
            if g.start_fen != chess.STARTING_FEN:
                game.setup(board)
            node = game
            for mv in g.moves:
                node = node.add_variation(chess.Move.from_uci(mv))
            out.append(str(game))
        return "\n\n".join(out) + "\n"


RESULT_SCORE = {"1-0": 1.0, "0-1": 0.0, "1/2-1/2": 0.5}


def play_game(white: Agent, black: Agent, fen: str, max_plies: int | None = None) -> tuple[str, str, list[str]]:
    """Play to a rules termination (no resignation). ``max_plies`` adjudicates a draw when set."""
    p = cb.parse_fen(fen)
    moves = []
    while True:
        reason = cb.is_game_over(p)
        if reason is not None:
            if reason == "checkmate":
                return ("0-1" if p.side_to_move == chess.WHITE else "1-0"), reason, moves
            return "1/2-1/2", reason, moves
        if max_plies is not None and len(moves) >= max_plies:
            return "1/2-1/2", "adjudicated", moves
        agent = white if p.side_to_move == chess.WHITE else black
        move = select_move(agent, p)
        moves.append(move.uci())
        p = cb.apply_move(p, move)


def read_openings(path) -> list[str]:
    """FEN or EPD lines (EPD's four fields get default clocks)."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split(";", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        fen = " ".join(fields[:4] + (fields[4:6] if len(fields) >= 6 and fields[4].isdigit() else ["0", "1"]))
        cb.parse_fen(fen)
        out.append(fen)
    return out


def round_robin(agents: list[Agent], games_per_pair: int, openings: list[str], seed: int = 0,
                max_plies: int | None = None) -> MatchResult:
    """Every pair plays ``games_per_pair`` games as colour-swapped pairs from sampled openings."""
    if len(agents) < 2:
        raise ValueError("need at least two agents")
    if games_per_pair % 2:
        raise ValueError("games_per_pair must be even (games come in colour-swapped pairs)")
    if not openings:
        raise ValueError("no openings")
    rng = np.random.default_rng(seed)
    result = MatchResult([a.name for a in agents])
    for i, j in itertools.combinations(range(len(agents)), 2):
        for _ in range(games_per_pair // 2):
            k = int(rng.integers(len(openings)))
            for w, b in ((i, j), (j, i)):
                res, why, moves = play_game(agents[w], agents[b], openings[k], max_plies)
                game = PlayedGame(w, b, k, openings[k], moves, res, why)
                result.add(w, b, RESULT_SCORE[res], game)
    return result


# -- costing -------------------------------------------------------------------------

def agent_flops(agent: Agent, positions: int = 1, legal_moves: int | None = None) -> int:
    """Forward FLOPs per move decision. A value agent evaluates every legal move;
    ``legal_moves`` replaces the 20-move estimate with an actual count."""
    per_eval = count_flops(agent.evaluator.cfg)
    if agent.strategy == POLICY:
        return positions * per_eval
    return positions * (LEGAL_MOVES_ESTIMATE if legal_moves is None else legal_moves) * per_eval
