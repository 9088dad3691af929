"""Chess state, move generation and side-to-move canonicalization.

Rules are delegated to python-chess; this module pins down the conventions the
rest of the package depends on: square indexing (a1=0 ... h8=63), the 12-plane
piece order, the rank-mirror flip for black, and the policy move encoding.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import chess
import chess.polyglot
import numpy as np

WHITE, BLACK = chess.WHITE, chess.BLACK
PROMOTION_PIECES = (chess.KNIGHT, chess.BISHOP, chess.ROOK, chess.QUEEN)
PIECE_TYPES = (chess.PAWN, chess.KNIGHT, chess.BISHOP, chess.ROOK, chess.QUEEN, chess.KING)
START_FEN = chess.STARTING_FEN

# (from_file, to_file) pairs for a pawn stepping from the 7th to the 8th rank
PROMOTION_PAIRS = tuple((f, t) for f in range(8) for t in range(max(0, f - 1), min(8, f + 2)))
_PAIR_INDEX = {pair: i for i, pair in enumerate(PROMOTION_PAIRS)}
NUM_BASE_MOVES = 64 * 64
NUM_PROMO_MOVES = len(PROMOTION_PAIRS) * len(PROMOTION_PIECES)
POLICY_SIZE = NUM_BASE_MOVES + NUM_PROMO_MOVES


class FENError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class IllegalMoveError(ValueError):
    pass


def square_index(name: str) -> int:
    return chess.parse_square(name)


def square_name(index: int) -> str:
    return chess.square_name(index)


@dataclass(frozen=True, eq=False)
class Position:
    """Immutable chess state.

    ``board`` carries the move stack from the root of the game so history and
    repetitions can be recovered. It is a private copy and is never mutated.
    """

    board: chess.Board
    repetition_keys: tuple[int, ...]

    @property
    def side_to_move(self) -> bool:
        return self.board.turn

    @property
    def castling(self) -> tuple[bool, bool, bool, bool]:
        """(white king-side, white queen-side, black king-side, black queen-side)"""
        b = self.board
        return (
            b.has_kingside_castling_rights(WHITE),
            b.has_queenside_castling_rights(WHITE),
            b.has_kingside_castling_rights(BLACK),
            b.has_queenside_castling_rights(BLACK),
        )

    @property
    def en_passant(self) -> int | None:
        ep = self.board.ep_square
        return None if ep is None else chess.square_file(ep)

    @property
    def halfmove_clock(self) -> int:
        return self.board.halfmove_clock

    @property
    def fullmove(self) -> int:
        return self.board.fullmove_number

    def piece_at(self, square: int) -> chess.Piece | None:
        return self.board.piece_at(square)

    def fen(self) -> str:
        return to_fen(self)

    def ply(self) -> int:
        return len(self.board.move_stack)

    def repetition_count(self) -> int:
        """How many times the current position has occurred, including now."""
        return self.repetition_keys.count(self.repetition_keys[-1])

    def history(self, n: int) -> list[chess.Board]:
        """Current board followed by up to ``n`` earlier boards (most recent first)."""
        b = self.board.copy()
        out = [b.copy(stack=False)]
        while len(out) <= n and b.move_stack:
            b.pop()
            out.append(b.copy(stack=False))
        return out

    def __repr__(self) -> str:
        return f"Position({self.fen()!r})"


def position_key(board: chess.Board) -> int:
    return chess.polyglot.zobrist_hash(board)


def from_board(board: chess.Board) -> Position:
    """Wrap a python-chess board (copied), replaying its stack for repetition keys."""
    board = board.copy()
    replay = board.root()
    keys = [position_key(replay)]
    for move in board.move_stack:
        replay.push(move)
        keys.append(position_key(replay))
    return Position(board, tuple(keys))


_PLACEMENT_RE = re.compile(r"^[pnbrqkPNBRQK1-8]+$")
_CASTLING_RE = re.compile(r"^(-|K?Q?k?q?)$")
_EP_RE = re.compile(r"^(-|[a-h][36])$")


def parse_fen(text: str) -> Position:
    fields = text.split()
    if not 4 <= len(fields) <= 6:
        raise FENError("fen", f"expected 4-6 fields, got {len(fields)}")
    placement, side, castling, ep = fields[:4]
    halfmove = fields[4] if len(fields) > 4 else "0"
    fullmove = fields[5] if len(fields) > 5 else "1"

    ranks = placement.split("/")
    if len(ranks) != 8:
        raise FENError("placement", f"expected 8 ranks, got {len(ranks)}")
    for rank in ranks:
        if not _PLACEMENT_RE.match(rank):
            raise FENError("placement", f"bad characters in rank {rank!r}")
        width = sum(int(c) if c.isdigit() else 1 for c in rank)
        if width != 8:
            raise FENError("placement", f"rank {rank!r} spans {width} files")
    if side not in ("w", "b"):
        raise FENError("side_to_move", f"expected 'w' or 'b', got {side!r}")
    if not _CASTLING_RE.match(castling) or castling == "":
        raise FENError("castling", f"bad castling string {castling!r}")
    if not _EP_RE.match(ep):
        raise FENError("en_passant", f"bad en passant square {ep!r}")
    if not halfmove.isdigit():
        raise FENError("halfmove_clock", f"not a non-negative integer: {halfmove!r}")
    if not fullmove.isdigit() or int(fullmove) < 1:
        raise FENError("fullmove", f"not a positive integer: {fullmove!r}")

    board = chess.Board(" ".join([placement, side, castling, ep, halfmove, fullmove]))
    status = board.status()
    checks = [
        (chess.STATUS_NO_WHITE_KING | chess.STATUS_NO_BLACK_KING | chess.STATUS_TOO_MANY_KINGS,
         "placement", "each side needs exactly one king"),
        (chess.STATUS_PAWNS_ON_BACKRANK, "placement", "pawn on first or last rank"),
        (chess.STATUS_TOO_MANY_WHITE_PAWNS | chess.STATUS_TOO_MANY_BLACK_PAWNS
         | chess.STATUS_TOO_MANY_WHITE_PIECES | chess.STATUS_TOO_MANY_BLACK_PIECES,
         "placement", "too many pieces"),
        (chess.STATUS_BAD_CASTLING_RIGHTS, "castling", "rights inconsistent with placement"),
        (chess.STATUS_INVALID_EP_SQUARE, "en_passant", "no double pawn push could have produced it"),
        (chess.STATUS_OPPOSITE_CHECK, "side_to_move", "side not to move is in check"),
    ]
    for mask, field, message in checks:
        if status & mask:
            raise FENError(field, message)
    return Position(board, (position_key(board),))


def to_fen(p: Position) -> str:
    # "fen" keeps the en passant square after every double push, as written by most GUIs
    return p.board.fen(en_passant="fen")


def start_position() -> Position:
    return parse_fen(START_FEN)


def legal_moves(p: Position) -> list[chess.Move]:
    return list(p.board.legal_moves)


def parse_move(text: str) -> chess.Move:
    try:
        return chess.Move.from_uci(text)
    except (ValueError, TypeError) as exc:
        raise IllegalMoveError(f"bad move syntax {text!r}") from exc


def apply_move(p: Position, m: chess.Move | str) -> Position:
    if m is None:
        raise IllegalMoveError("no move given")
    if isinstance(m, str):
        m = parse_move(m)
    if not isinstance(m, chess.Move):
        raise IllegalMoveError(f"not a move: {m!r}")
    if not p.board.is_legal(m):
        reason = "pseudo-legal but leaves king in check" if p.board.is_pseudo_legal(m) else "not a legal move"
        raise IllegalMoveError(f"{m.uci()} in {to_fen(p)}: {reason}")
    board = p.board.copy()
    board.push(m)
    return Position(board, p.repetition_keys + (position_key(board),))


def perft(p: Position, depth: int) -> int:
    if depth < 0:
        raise ValueError("depth must be non-negative")
    board = p.board.copy(stack=False)

    def count(d: int) -> int:
        if d == 0:
            return 1
        moves = list(board.legal_moves)
        if d == 1:
            return len(moves)
        total = 0
        for move in moves:
            board.push(move)
            total += count(d - 1)
            board.pop()
        return total

    return count(depth)


def canonical_planes(board: chess.Board, perspective: bool) -> np.ndarray:
    """64x12 one-hot planes of ``board`` seen by ``perspective``.

    Planes are [own P,N,B,R,Q,K, opponent P,N,B,R,Q,K]. For black the ranks
    are mirrored (files kept) so the viewer's pawns always advance upward.
    """
    flip = perspective == BLACK
    masks = []
    for color in (perspective, not perspective):
        for piece_type in PIECE_TYPES:
            bb = board.pieces_mask(piece_type, color)
            masks.append(chess.flip_vertical(bb) if flip else bb)
    raw = np.array(masks, dtype="<u8").view(np.uint8).reshape(12, 8)
    return np.unpackbits(raw, axis=1, bitorder="little").T.copy()


def canonicalize(p: Position) -> np.ndarray:
    return canonical_planes(p.board, p.side_to_move)


def mirror_move(m: chess.Move) -> chess.Move:
    return chess.Move(chess.square_mirror(m.from_square), chess.square_mirror(m.to_square), m.promotion)


def canonical_move(m: chess.Move, turn: bool) -> chess.Move:
    return m if turn == WHITE else mirror_move(m)


def mirror_position(p: Position) -> Position:
    """Color-mirrored twin: ranks flipped, colors swapped, history included."""
    root = p.board.root().mirror()
    root.halfmove_clock = p.board.root().halfmove_clock
    root.fullmove_number = p.board.root().fullmove_number
    q = Position(root, (position_key(root),))
    for move in p.board.move_stack:
        q = apply_move(q, mirror_move(move))
    return q


def move_to_index(m: chess.Move) -> int:
    """Policy index of a canonical move (mover plays up the board)."""
    if m.promotion is None:
        return m.from_square * 64 + m.to_square
    from_file, to_file = chess.square_file(m.from_square), chess.square_file(m.to_square)
    if chess.square_rank(m.from_square) != 6 or chess.square_rank(m.to_square) != 7:
        raise ValueError(f"not a canonical promotion: {m.uci()}")
    pair = _PAIR_INDEX[(from_file, to_file)]
    return NUM_BASE_MOVES + pair * 4 + PROMOTION_PIECES.index(m.promotion)


def index_to_move(index: int) -> chess.Move:
    if index < NUM_BASE_MOVES:
        return chess.Move(index // 64, index % 64)
    pair, piece = divmod(index - NUM_BASE_MOVES, 4)
    from_file, to_file = PROMOTION_PAIRS[pair]
    return chess.Move(chess.square(from_file, 6), chess.square(to_file, 7), PROMOTION_PIECES[piece])


def legal_indices(p: Position) -> list[int]:
    """Sorted policy indices of the legal moves, in the mover's frame."""
    turn = p.side_to_move
    return sorted(move_to_index(canonical_move(m, turn)) for m in p.board.legal_moves)


def is_game_over(p: Position) -> str | None:
    """Termination reason or None: checkmate, stalemate, repetition, fifty-move, material."""
    b = p.board
    if not any(b.generate_legal_moves()):
        return "checkmate" if b.is_check() else "stalemate"
    if p.repetition_count() >= 3:
        return "repetition"
    if b.halfmove_clock >= 100:
        return "fifty-move"
    if b.is_insufficient_material():
        return "insufficient material"
    return None
