"""Synthetic rated blitz games for desk-scale corpora.

Players pick moves by a softmax over a one-ply heuristic (material won, piece
safety, centralization, pawn advance, checks, castling). Lower ratings use a
hotter softmax, so move choice depends on skill the way the pipeline expects.
Games carry Elo headers and %clk comments.
"""
from __future__ import annotations

import io

import chess
import chess.pgn
import numpy as np

VALUES = {chess.PAWN: 1.0, chess.KNIGHT: 3.0, chess.BISHOP: 3.2, chess.ROOK: 5.0, chess.QUEEN: 9.0, chess.KING: 0.0}
_CENTER = np.array([3.5 - abs(3.5 - (sq % 8)) + 3.5 - abs(3.5 - (sq // 8)) for sq in range(64)]) / 7.0


def temperature(rating: float) -> float:
    return 0.08 + 1.6 * float(np.clip((2800 - rating) / 2400, 0.0, 1.0))


def move_scores(board: chess.Board, moves: list[chess.Move]) -> np.ndarray:
    turn = board.turn
    scores = np.empty(len(moves))
    for i, m in enumerate(moves):
        piece = board.piece_type_at(m.from_square)
        value = VALUES[piece]
        s = 0.0
        if board.is_en_passant(m):
            s += 1.0
        else:
            captured = board.piece_type_at(m.to_square)
            if captured:
                s += VALUES[captured]
        if m.promotion:
            s += VALUES[m.promotion] - 1.0
            value = VALUES[m.promotion]
        if board.is_attacked_by(not turn, m.to_square):
            defended = len(board.attackers(turn, m.to_square)) > (1 if board.is_attacked_by(turn, m.from_square) else 0)
            s -= value * (0.4 if defended else 0.9)
        elif board.is_attacked_by(not turn, m.from_square):
            s += 0.5 * value
        if piece != chess.KING:
            s += 0.3 * (_CENTER[m.to_square] - _CENTER[m.from_square])
        if piece == chess.PAWN:
            s += 0.05 * abs(chess.square_rank(m.to_square) - chess.square_rank(m.from_square))
        if board.is_castling(m):
            s += 0.6
        if board.gives_check(m):
            s += 0.25
        scores[i] = s
    return scores


def choose_move(board: chess.Board, rating: float, rng: np.random.Generator) -> tuple[chess.Move, np.ndarray, list]:
    moves = list(board.legal_moves)
    logits = move_scores(board, moves) / temperature(rating)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return moves[rng.choice(len(moves), p=p)], p, moves


def material(board: chess.Board, color: bool) -> float:
    return sum(VALUES[p.piece_type] for p in board.piece_map().values() if p.color == color)


def play_game(white_elo: int, black_elo: int, rng: np.random.Generator, base: float = 180.0,
              max_plies: int = 160) -> chess.pgn.Game:
    board = chess.Board()
    game = chess.pgn.Game()
    node = game
    clocks = {chess.WHITE: base, chess.BLACK: base}
    result = None
    while True:
        outcome = board.outcome(claim_draw=True)
        if outcome is not None:
            result = outcome.result()
            break
        if board.ply() >= max_plies:
            diff = material(board, chess.WHITE) - material(board, chess.BLACK)
            result = "1-0" if diff >= 3 else "0-1" if diff <= -3 else "1/2-1/2"
            break
        mover = board.turn
        rating = white_elo if mover == chess.WHITE else black_elo
        move, _, _ = choose_move(board, rating, rng)
        clocks[mover] -= float(rng.gamma(2.0, 1.0 + board.ply() / 60))
        if clocks[mover] <= 0:
            result = "0-1" if mover == chess.WHITE else "1-0"
            break
        board.push(move)
        node = node.add_variation(move)
        node.set_clock(round(clocks[mover]))
    game.headers["Event"] = "Synthetic blitz"
    game.headers["White"] = f"bot{white_elo}"
    game.headers["Black"] = f"bot{black_elo}"
    game.headers["WhiteElo"] = str(white_elo)
    game.headers["BlackElo"] = str(black_elo)
    game.headers["TimeControl"] = f"{int(base)}+0"
    game.headers["Result"] = result
    return game


def generate_pgn(num_games: int, seed: int = 0, low: int = 400, high: int = 2800, out=None) -> str | None:
    """Write ``num_games`` games as PGN to ``out`` (a text stream) or return the text."""
    rng = np.random.default_rng(seed)
    sink = out if out is not None else io.StringIO()
    for _ in range(num_games):
        white = int(rng.integers(low, high))
        black = int(np.clip(white + rng.normal(0, 150), low, high))
        game = play_game(white, black, rng)
        print(game, file=sink, end="\n\n")
    return None if out is not None else sink.getvalue()
